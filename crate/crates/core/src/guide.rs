//! Image-level signals computed over one class shortlist: class-weighted
//! image entropy, the rare-class diversity index and the rank-conditioned
//! similarity penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::io::embeddings::EmbeddingStore;
use crate::lius::Candidate;
use crate::types::{DetectionRecord, ImageId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSignals {
    pub image_id: ImageId,
    pub cwie_raw: f64,
    pub cwie_norm: f64,
    pub rcdi_raw: f64,
    pub rcdi_norm: f64,
    pub rcsp: f64,
}

/// Detections grouped by image, input order preserved within each image.
pub type ImageDetections<'a> = BTreeMap<ImageId, Vec<&'a DetectionRecord>>;

pub fn group_by_image(records: &[DetectionRecord]) -> ImageDetections<'_> {
    let mut map: ImageDetections<'_> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id).or_default().push(r);
    }
    map
}

fn weight(ratios: &[f64], d: &DetectionRecord) -> f64 {
    ratios.get(d.class_id as usize).copied().unwrap_or(0.0)
}

/// Class-weighted image entropy: each detection's class-distribution entropy
/// scaled by the weight of its predicted class, summed over the image.
pub fn cwie(detections: &[&DetectionRecord], ratios: &[f64]) -> f64 {
    detections
        .iter()
        .map(|d| weight(ratios, d) * d.class_distribution().entropy())
        .sum()
}

/// Sum of class weights over the distinct predicted classes in an image.
pub fn rcdi(detections: &[&DetectionRecord], ratios: &[f64]) -> f64 {
    let mut classes: Vec<_> = detections.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes.iter().map(|&c| ratios.get(c as usize).copied().unwrap_or(0.0)).sum()
}

/// Scales non-negative scores by their maximum (minimum pinned at 0). An
/// all-zero list stays zero.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(&v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(PalError::NegativeScore(v));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| v / max).collect())
}

/// Cosine similarity in f64; a zero vector is similar to nothing.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Similarity penalty along a ranked list (best first). The top image scores
/// 1; every later image scores one minus its highest cosine similarity to
/// any image ranked above it, negative similarities counting as 0.
pub fn rcsp(ranked: &[ImageId], embeddings: &EmbeddingStore) -> Result<Vec<f64>> {
    let vectors: Vec<&[f32]> = ranked.iter().map(|&id| embeddings.require(id)).collect::<Result<_>>()?;
    Ok((0..vectors.len())
        .map(|i| {
            let max_sim = vectors[..i]
                .iter()
                .map(|m| cosine(vectors[i], m))
                .fold(0.0, f64::max);
            (1.0 - max_sim).clamp(0.0, 1.0)
        })
        .collect())
}

/// All three signals for one class shortlist, already in rank order.
/// Normalization runs over exactly this list.
pub fn guide_signals(
    candidates: &[Candidate],
    detections: &ImageDetections<'_>,
    ratios: &[f64],
    embeddings: &EmbeddingStore,
) -> Result<Vec<ImageSignals>> {
    let empty = Vec::new();
    let per_image = |id: ImageId| detections.get(&id).unwrap_or(&empty).as_slice();
    let cwie_raw: Vec<f64> = candidates.iter().map(|c| cwie(per_image(c.image_id), ratios)).collect();
    let rcdi_raw: Vec<f64> = candidates.iter().map(|c| rcdi(per_image(c.image_id), ratios)).collect();
    let cwie_norm = minmax_normalize(&cwie_raw)?;
    let rcdi_norm = minmax_normalize(&rcdi_raw)?;
    let ids: Vec<ImageId> = candidates.iter().map(|c| c.image_id).collect();
    let penalty = rcsp(&ids, embeddings)?;
    Ok((0..candidates.len())
        .map(|i| ImageSignals {
            image_id: ids[i],
            cwie_raw: cwie_raw[i],
            cwie_norm: cwie_norm[i],
            rcdi_raw: rcdi_raw[i],
            rcdi_norm: rcdi_norm[i],
            rcsp: penalty[i],
        })
        .collect())
}
