//! Box geometry, pre-NMS proposal counting and TP/FP labelling.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{PalError, Result};
use crate::io::records::{DetectionDump, GroundTruthSet, MatchedPool};
use crate::types::{BBox, ClassId, DetectionRecord, ImageId};

/// Intersection over union of two boxes in continuous coordinates.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(overlap(a, b))
}

/// [`iou`] for boxes already known to be valid.
pub(crate) fn overlap(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Counts, for each final detection of one image, the raw proposals that
/// suppression folded into it.
///
/// A proposal goes to the single detection it overlaps most (lowest index on
/// ties) provided that overlap reaches `threshold`; otherwise it is left
/// unassigned. Counts therefore partition a subset of the proposals.
pub fn assign_pre_nms_counts(detections: &[BBox], proposals: &[BBox], threshold: f64) -> Vec<u32> {
    let mut counts = vec![0u32; detections.len()];
    for p in proposals {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in detections.iter().enumerate() {
            let v = overlap(d, p);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            if v >= threshold {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Marks each labelled-pool detection as a true or false positive.
///
/// Within every (image, class) group detections are visited by descending
/// confidence, ties by input position. Each takes the unmatched ground-truth
/// box of the same class with the highest IoU, if that IoU reaches
/// `threshold`. A ground-truth box is matched at most once.
pub fn label_tp_fp(
    detections: &[DetectionRecord],
    gt: &GroundTruthSet,
    threshold: f64,
) -> Result<Vec<DetectionRecord>> {
    let known = gt.image_ids();
    let mut gt_boxes: HashMap<(ImageId, ClassId), Vec<BBox>> = HashMap::new();
    for ann in &gt.annotations {
        gt_boxes.entry((ann.image_id, ann.class_id)).or_default().push(ann.bbox);
    }

    let mut groups: BTreeMap<(ImageId, ClassId), Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        if !known.contains(&d.image_id) {
            return Err(PalError::UnknownImage(d.image_id));
        }
        groups.entry((d.image_id, d.class_id)).or_default().push(i);
    }

    let mut out = detections.to_vec();
    for (key, mut members) in groups {
        members.sort_by(|&a, &b| {
            detections[b]
                .confidence
                .total_cmp(&detections[a].confidence)
                .then(a.cmp(&b))
        });
        let boxes = gt_boxes.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let mut used = vec![false; boxes.len()];
        for i in members {
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in boxes.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = overlap(&detections[i].bbox, gb);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            out[i].tp_label = Some(match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            });
        }
    }
    Ok(out)
}

/// Turns a detector dump into [`DetectionRecord`]s with pre-NMS counts, and
/// TP/FP labels when ground truth is supplied.
pub fn match_pool(dump: &DetectionDump, gt: Option<&GroundTruthSet>, iou_prenms: f64, iou_tp: f64) -> Result<MatchedPool> {
    let mut det_by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
    for (i, d) in dump.final_detections.iter().enumerate() {
        det_by_image.entry(d.image_id).or_default().push(i);
    }
    let mut prop_by_image: HashMap<ImageId, Vec<BBox>> = HashMap::new();
    for p in &dump.pre_nms_proposals {
        prop_by_image.entry(p.image_id).or_default().push(p.bbox);
    }

    let per_image: Vec<(Vec<usize>, Vec<u32>)> = det_by_image
        .into_par_iter()
        .map(|(image, idx)| {
            let boxes: Vec<BBox> = idx.iter().map(|&i| dump.final_detections[i].bbox).collect();
            let props = prop_by_image.get(&image).map(Vec::as_slice).unwrap_or(&[]);
            let counts = assign_pre_nms_counts(&boxes, props, iou_prenms);
            (idx, counts)
        })
        .collect();

    let mut records: Vec<DetectionRecord> = dump
        .final_detections
        .iter()
        .map(|d| DetectionRecord {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: d.bbox,
            confidence: d.confidence,
            class_probabilities: d.class_probabilities.clone(),
            pre_nms_count: 0,
            tp_label: None,
        })
        .collect();
    for (idx, counts) in per_image {
        for (i, c) in idx.into_iter().zip(counts) {
            records[i].pre_nms_count = c;
        }
    }
    if let Some(gt) = gt {
        if gt.classes != dump.classes {
            return Err(PalError::Validation(
                "ground truth and detections declare different class lists".into(),
            ));
        }
        records = label_tp_fp(&records, gt, iou_tp)?;
    }
    Ok(MatchedPool {
        classes: dump.classes.clone(),
        images: dump.images.clone(),
        records,
    })
}
