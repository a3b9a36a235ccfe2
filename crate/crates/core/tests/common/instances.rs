//! Random miniature rounds for oracle comparisons.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pal_core::{BBox, DetectionRecord, EmbeddingStore, ImageId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub num_classes: usize,
    pub labelled_ids: Vec<ImageId>,
    pub unlabelled_ids: Vec<ImageId>,
    pub labelled: Vec<DetectionRecord>,
    pub unlabelled: Vec<DetectionRecord>,
    pub embeddings: EmbeddingStore,
    pub raw_embeddings: BTreeMap<ImageId, Vec<f32>>,
    pub budget: usize,
}

fn record(rng: &mut ChaCha8Rng, image_id: ImageId, num_classes: usize, labelled: bool) -> DetectionRecord {
    let class_id = rng.random_range(0..num_classes) as u32;
    let tp = rng.random_bool(0.5);
    // TPs lean towards more proposals and higher confidence, with overlap
    let (count, confidence) = if tp {
        (rng.random_range(2..30u32), rng.random_range(0.3..1.0))
    } else {
        (rng.random_range(0..12u32), rng.random_range(0.0..0.7))
    };
    let class_probabilities = rng.random_bool(0.7).then(|| {
        let mut p: Vec<f64> = (0..num_classes).map(|_| rng.random_range(0.0..1.0)).collect();
        p[class_id as usize] = 0.0;
        let rest: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v = if rest > 0.0 { *v / rest * (1.0 - confidence) } else { 0.0 };
        }
        p[class_id as usize] = if rest > 0.0 { confidence } else { 1.0 };
        p
    });
    DetectionRecord {
        image_id,
        class_id,
        bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        confidence,
        class_probabilities,
        pre_nms_count: count,
        tp_label: labelled.then_some(tp),
    }
}

/// At most 20 images and 5 classes; both pools get at least one detection.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = rng.random_range(1..=5);
    let n_images = rng.random_range(4..=20u64);
    let n_labelled = rng.random_range(1..n_images);
    let dim = rng.random_range(2..=6);
    let labelled_ids: Vec<ImageId> = (1..=n_labelled).collect();
    let unlabelled_ids: Vec<ImageId> = (n_labelled + 1..=n_images).collect();

    let mut labelled = Vec::new();
    for &id in &labelled_ids {
        for _ in 0..rng.random_range(0..=12) {
            labelled.push(record(&mut rng, id, num_classes, true));
        }
    }
    if labelled.is_empty() {
        labelled.push(record(&mut rng, labelled_ids[0], num_classes, true));
    }
    let mut unlabelled = Vec::new();
    for &id in &unlabelled_ids {
        for _ in 0..rng.random_range(0..=5) {
            unlabelled.push(record(&mut rng, id, num_classes, false));
        }
    }
    if unlabelled.is_empty() {
        unlabelled.push(record(&mut rng, unlabelled_ids[0], num_classes, false));
    }

    let mut raw = BTreeMap::new();
    for id in 1..=n_images {
        let v: Vec<f32> = if rng.random_bool(0.05) {
            vec![0.0; dim]
        } else {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        raw.insert(id, v);
    }
    // occasionally an exact duplicate, which must get the full penalty
    if n_images > 5 && rng.random_bool(0.3) {
        let v = raw[&n_images].clone();
        raw.insert(n_images - 1, v);
    }
    let embeddings = EmbeddingStore::from_rows(dim, raw.clone()).unwrap();
    let budget = rng.random_range(1..=12);
    Instance {
        num_classes,
        labelled_ids,
        unlabelled_ids,
        labelled,
        unlabelled,
        embeddings,
        raw_embeddings: raw,
        budget,
    }
}
