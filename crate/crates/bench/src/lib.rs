//! Workloads shared by the selection benchmarks.

use std::collections::BTreeSet;

use pal_core::lius::Sample;
use pal_core::matching::match_pool;
use pal_core::simulator::{generate_world, simulate_detector, subset_dump, World, WorldParams};
use pal_core::{DetectionRecord, ImageId, RoundState, SelectionConfig};

/// One simulated selection round: matched pools plus the state to run it on.
pub struct Workload {
    pub world: World,
    pub labelled: Vec<DetectionRecord>,
    pub unlabelled: Vec<DetectionRecord>,
    pub state: RoundState,
    pub config: SelectionConfig,
}

impl Workload {
    /// Generates a world of `num_images` images and labels the first
    /// `labelled` of them. Detector skill is fixed at 0.5 for every class.
    pub fn new(num_images: usize, labelled: usize, budget: usize, seed: u64) -> Workload {
        let params = WorldParams {
            num_images,
            ..Default::default()
        };
        let world = generate_world(&params, seed).expect("valid world parameters");
        let ids = world.image_ids();
        let skill = vec![0.5; params.num_classes];
        let dump = simulate_detector(&world, &skill, &ids, seed);
        let config = SelectionConfig::default();

        let l: BTreeSet<ImageId> = ids[..labelled].iter().copied().collect();
        let u: BTreeSet<ImageId> = ids[labelled..].iter().copied().collect();
        let lp = match_pool(&subset_dump(&dump, &l), Some(&world.gt), config.iou_prenms, config.iou_tp)
            .expect("labelled pool matches");
        let up = match_pool(&subset_dump(&dump, &u), None, config.iou_prenms, config.iou_tp)
            .expect("unlabelled pool matches");
        let state = RoundState::new(l, u, budget).expect("disjoint pools");
        Workload {
            world,
            labelled: lp.records,
            unlabelled: up.records,
            state,
            config,
        }
    }

    /// Classifier training samples of one class from the labelled pool.
    pub fn samples(&self, class_id: u32) -> Vec<Sample> {
        self.labelled
            .iter()
            .filter(|r| r.class_id == class_id)
            .map(|r| Sample {
                pre_nms_count: r.pre_nms_count as f64,
                confidence: r.confidence,
                tp: r.tp_label.unwrap_or(false),
            })
            .collect()
    }
}
