//! Synthetic detection worlds and multi-round selection campaigns.
//!
//! Detector retraining is replaced by a saturating per-class skill curve:
//! `skill_c = base + gain * (1 - exp(-rate * n_c))` where `n_c` counts the
//! labelled ground-truth instances of class `c`. Higher skill means more
//! objects found, more confident true positives and denser proposal clusters
//! around them, so TP and FP features drift apart as labelling proceeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{entropy_baseline_score, run_round, RoundInputs, RoundState};
use crate::error::{PalError, Result};
use crate::guide::group_by_image;
use crate::io::config::SelectionConfig;
use crate::io::embeddings::{save_embeddings, EmbeddingStore};
use crate::io::manifest::write_selection_manifest;
use crate::io::records::{
    write_detection_dump, write_ground_truth, Annotation, Detection, DetectionDump, GroundTruthSet, ImageInfo, Proposal,
};
use crate::lius::{ClassifierBank, Sample, TpClassifier};
use crate::matching::{label_tp_fp, match_pool};
use crate::types::{BBox, ClassId, DetectionRecord, ImageId};

/// Confidence distributions for one class. True-positive confidence has a
/// Beta distribution whose mean moves from `tp_mean_low` to `tp_mean_high`
/// as skill goes from 0 to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub tp_mean_low: f64,
    pub tp_mean_high: f64,
    pub tp_concentration: f64,
    pub fp_mean: f64,
    pub fp_concentration: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            tp_mean_low: 0.35,
            tp_mean_high: 0.9,
            tp_concentration: 8.0,
            fp_mean: 0.32,
            fp_concentration: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// One entry per class; empty means the default model for every class.
    pub confidence: Vec<ConfidenceModel>,
    /// Mean number of spurious detections per image.
    pub fp_rate: f64,
    /// Mean proposal count around a true positive is `base + gain * skill`.
    pub tp_proposals_base: f64,
    pub tp_proposals_gain: f64,
    pub fp_proposals: f64,
    /// Stray proposals per image not tied to any detection.
    pub background_proposals: f64,
    /// Relative box jitter of proposals around their detection.
    pub jitter: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            confidence: Vec::new(),
            fp_rate: 1.0,
            tp_proposals_base: 3.0,
            tp_proposals_gain: 25.0,
            fp_proposals: 3.0,
            background_proposals: 5.0,
            jitter: 0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillCurve {
    pub base: f64,
    pub gain: f64,
    pub rate: f64,
}

impl Default for SkillCurve {
    fn default() -> Self {
        SkillCurve {
            base: 0.15,
            gain: 0.8,
            rate: 0.03,
        }
    }
}

impl SkillCurve {
    pub fn skill(&self, labelled_instances: usize) -> f64 {
        (self.base + self.gain * (1.0 - (-self.rate * labelled_instances as f64).exp())).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub num_images: usize,
    pub num_classes: usize,
    /// Class `k` (0-based) is drawn with weight `(k + 1)^-exponent`.
    pub class_exponent: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub embedding_dim: usize,
    pub clusters: usize,
    pub embedding_noise: f64,
    pub detector: DetectorParams,
    pub skill: SkillCurve,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            num_images: 2000,
            num_classes: 10,
            class_exponent: 2.0,
            min_objects: 1,
            max_objects: 5,
            image_width: 640,
            image_height: 480,
            embedding_dim: 16,
            clusters: 8,
            embedding_noise: 0.35,
            detector: DetectorParams::default(),
            skill: SkillCurve::default(),
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PalError::Validation(format!("world params: {m}")));
        if self.num_images == 0 || self.num_classes == 0 || self.embedding_dim == 0 || self.clusters == 0 {
            return bad("counts must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.class_exponent >= 0.0) {
            return bad("class_exponent must be >= 0");
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad("images must be at least 8x8 pixels");
        }
        let d = &self.detector;
        if !d.confidence.is_empty() && d.confidence.len() != self.num_classes {
            return bad("detector.confidence needs one entry per class");
        }
        for m in self.confidence_models() {
            let means = [m.tp_mean_low, m.tp_mean_high, m.fp_mean];
            if means.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || !(m.tp_concentration > 0.0 && m.fp_concentration > 0.0) {
                return bad("confidence means must lie in (0, 1) with positive concentration");
            }
        }
        let rates = [d.fp_rate, d.tp_proposals_base, d.tp_proposals_gain, d.fp_proposals, d.background_proposals, d.jitter];
        if rates.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("detector rates must be finite and >= 0");
        }
        let s = &self.skill;
        if !(s.base >= 0.0 && s.gain >= 0.0 && s.rate >= 0.0 && s.base + s.gain <= 1.0) {
            return bad("skill curve must stay within [0, 1]");
        }
        Ok(())
    }

    pub fn confidence_models(&self) -> Vec<ConfidenceModel> {
        if self.detector.confidence.is_empty() {
            vec![ConfidenceModel::default(); self.num_classes]
        } else {
            self.detector.confidence.clone()
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class{c}")).collect()
    }
}

/// The `[simulation]` table of a config file: `[simulation.world]` and
/// `[simulation.campaign]`, both optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub world: WorldParams,
    pub campaign: CampaignParams,
}

impl SimulationSettings {
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self> {
        let err = |e: String| PalError::Config {
            keys: "simulation".into(),
            msg: e,
        };
        let mut table: toml::Table = if json {
            serde_json::from_str(text).map_err(|e| err(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| err(e.to_string()))?
        };
        let Some(sim) = table.remove("simulation") else {
            return Ok(SimulationSettings::default());
        };
        let settings: SimulationSettings = sim.try_into().map_err(|e: toml::de::Error| err(e.to_string()))?;
        settings.world.validate()?;
        Ok(settings)
    }
}

pub fn load_simulation_settings(path: impl AsRef<std::path::Path>) -> Result<SimulationSettings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PalError::io(path, e))?;
    SimulationSettings::from_str_with_format(&text, crate::io::config::is_json(path))
        .map_err(|e| e.context(format!("loading config {}", path.display())))
}

/// A generated world: ground truth for every image plus embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub params: WorldParams,
    pub gt: GroundTruthSet,
    pub embeddings: EmbeddingStore,
    /// Context cluster each image's embedding was drawn around.
    pub clusters: Vec<usize>,
    /// Ground-truth instances per class over the whole world.
    pub class_counts: Vec<usize>,
}

impl World {
    pub fn image_ids(&self) -> Vec<ImageId> {
        self.gt.images.iter().map(|i| i.image_id).collect()
    }

    /// Class with the fewest ground-truth instances, lowest id on ties.
    pub fn rarest_class(&self) -> ClassId {
        (0..self.class_counts.len())
            .min_by_key(|&c| (self.class_counts[c], c))
            .unwrap_or(0) as ClassId
    }

    /// Ground-truth instance counts per class over a set of images.
    pub fn instance_counts(&self, images: &BTreeSet<ImageId>) -> Vec<usize> {
        let mut n = vec![0; self.params.num_classes];
        for a in &self.gt.annotations {
            if images.contains(&a.image_id) {
                n[a.class_id as usize] += 1;
            }
        }
        n
    }

    /// Expected fraction of all ground-truth instances a detector with the
    /// given per-class skill finds.
    pub fn recall_proxy(&self, skill: &[f64]) -> f64 {
        let total: usize = self.class_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.class_counts
            .iter()
            .zip(skill)
            .map(|(&n, &s)| n as f64 * s)
            .sum::<f64>()
            / total as f64
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5EED_u64, |acc, &p| mix_seed(acc, p));
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_box(rng: &mut ChaCha8Rng, width: f64, height: f64) -> BBox {
    let w = rng.random_range(0.05..0.3) * width;
    let h = rng.random_range(0.05..0.3) * height;
    let x = rng.random_range(0.0..(width - w));
    let y = rng.random_range(0.0..(height - h));
    BBox::new(x, y, w, h)
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, scale: f64) -> BBox {
    if scale == 0.0 {
        return *b;
    }
    let n = Normal::new(0.0, scale).expect("finite jitter");
    BBox::new(
        b.x + n.sample(rng) * b.w,
        b.y + n.sample(rng) * b.h,
        b.w * n.sample(rng).exp(),
        b.h * n.sample(rng).exp(),
    )
}

fn beta_sample(rng: &mut ChaCha8Rng, mean: f64, concentration: f64) -> f64 {
    let mean = mean.clamp(1e-3, 1.0 - 1e-3);
    let dist = Beta::new(mean * concentration, (1.0 - mean) * concentration).expect("positive beta shape");
    dist.sample(rng).clamp(0.0, 1.0)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive rate").sample(rng) as usize
}

pub fn class_weights(params: &WorldParams) -> Vec<f64> {
    (0..params.num_classes)
        .map(|k| ((k + 1) as f64).powf(-params.class_exponent))
        .collect()
}

fn cumulative_weights(params: &WorldParams) -> Vec<f64> {
    let mut w = class_weights(params);
    for i in 1..w.len() {
        w[i] += w[i - 1];
    }
    w
}

fn draw_class(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> ClassId {
    let u = rng.random_range(0.0..*cumulative.last().expect("at least one class"));
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1) as ClassId
}

/// Builds a world reproducibly from `seed`.
pub fn generate_world(params: &WorldParams, seed: u64) -> Result<World> {
    params.validate()?;
    let mut rng = rng_for(&[seed, 0xA11]);
    let (w, h) = (params.image_width as f64, params.image_height as f64);
    let cumulative = cumulative_weights(params);

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..params.clusters)
        .map(|_| (0..params.embedding_dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let mut gt = GroundTruthSet {
        classes: params.class_names(),
        ..Default::default()
    };
    let mut embeddings = EmbeddingStore::new(params.embedding_dim);
    let mut clusters = Vec::with_capacity(params.num_images);
    let mut class_counts = vec![0; params.num_classes];
    let mut next_ann = 1u64;
    for i in 0..params.num_images {
        let image_id = i as ImageId + 1;
        gt.images.push(ImageInfo {
            image_id,
            width: params.image_width,
            height: params.image_height,
        });
        let k = rng.random_range(params.min_objects..=params.max_objects);
        for _ in 0..k {
            let class_id = draw_class(&mut rng, &cumulative);
            class_counts[class_id as usize] += 1;
            gt.annotations.push(Annotation {
                id: next_ann,
                image_id,
                class_id,
                bbox: random_box(&mut rng, w, h),
            });
            next_ann += 1;
        }
        let cluster = rng.random_range(0..params.clusters);
        clusters.push(cluster);
        let v: Vec<f32> = centers[cluster]
            .iter()
            .map(|c| (c + params.embedding_noise * unit.sample(&mut rng)) as f32)
            .collect();
        embeddings.insert(image_id, v)?;
    }
    Ok(World {
        params: params.clone(),
        gt,
        embeddings,
        clusters,
        class_counts,
    })
}

fn class_distribution(rng: &mut ChaCha8Rng, num_classes: usize, class_id: ClassId, confidence: f64) -> Vec<f64> {
    if num_classes == 1 {
        return vec![1.0];
    }
    let mut rest: Vec<f64> = (0..num_classes).map(|_| rng.random_range(0.05..1.0)).collect();
    rest[class_id as usize] = 0.0;
    let total: f64 = rest.iter().sum();
    let mut probs: Vec<f64> = rest.iter().map(|r| r / total * (1.0 - confidence)).collect();
    probs[class_id as usize] = confidence;
    probs
}

/// Simulated inference over `images`. Each image's output depends only on
/// the world, the skill vector, `seed` and the image id, so any subset of
/// images sees identical detections.
pub fn simulate_detector(world: &World, skill: &[f64], images: &[ImageId], seed: u64) -> DetectionDump {
    let params = &world.params;
    let d = &params.detector;
    let models = params.confidence_models();
    let (w, h) = (params.image_width as f64, params.image_height as f64);
    let cumulative = cumulative_weights(params);
    let mut by_image: BTreeMap<ImageId, Vec<&Annotation>> = BTreeMap::new();
    for a in &world.gt.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }

    let per_image: Vec<(Vec<Detection>, Vec<Proposal>)> = images
        .par_iter()
        .map(|&image_id| {
            let mut rng = rng_for(&[seed, image_id]);
            let mut dets = Vec::new();
            let mut props = Vec::new();
            let mut emit = |rng: &mut ChaCha8Rng, class_id: ClassId, bbox: BBox, confidence: f64, n_props: usize| {
                for _ in 0..n_props {
                    props.push(Proposal {
                        image_id,
                        bbox: jitter_box(rng, &bbox, d.jitter),
                        confidence: (confidence * rng.random_range(0.5..1.0)).clamp(0.0, 1.0),
                    });
                }
                dets.push(Detection {
                    image_id,
                    class_id,
                    bbox,
                    confidence,
                    class_probabilities: Some(class_distribution(rng, params.num_classes, class_id, confidence)),
                });
            };
            for a in by_image.get(&image_id).map(Vec::as_slice).unwrap_or(&[]) {
                let c = a.class_id as usize;
                let s = skill.get(c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
                if rng.random::<f64>() >= s {
                    continue;
                }
                let m = &models[c];
                let conf = beta_sample(&mut rng, m.tp_mean_low + (m.tp_mean_high - m.tp_mean_low) * s, m.tp_concentration);
                let bbox = jitter_box(&mut rng, &a.bbox, d.jitter * 0.5);
                let n_props = poisson(&mut rng, d.tp_proposals_base + d.tp_proposals_gain * s);
                emit(&mut rng, a.class_id, bbox, conf, n_props);
            }
            for _ in 0..poisson(&mut rng, d.fp_rate) {
                let class_id = draw_class(&mut rng, &cumulative);
                let m = &models[class_id as usize];
                let conf = beta_sample(&mut rng, m.fp_mean, m.fp_concentration);
                let bbox = random_box(&mut rng, w, h);
                let n_props = poisson(&mut rng, d.fp_proposals);
                emit(&mut rng, class_id, bbox, conf, n_props);
            }
            for _ in 0..poisson(&mut rng, d.background_proposals) {
                props.push(Proposal {
                    image_id,
                    bbox: random_box(&mut rng, w, h),
                    confidence: rng.random_range(0.0..0.3),
                });
            }
            (dets, props)
        })
        .collect();

    let mut dump = DetectionDump {
        classes: params.class_names(),
        images: images.to_vec(),
        ..Default::default()
    };
    for (dets, props) in per_image {
        dump.final_detections.extend(dets);
        dump.pre_nms_proposals.extend(props);
    }
    dump
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Entropy,
    Pal,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Entropy, Strategy::Pal];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Pal => "pal",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = PalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "pal" => Ok(Strategy::Pal),
            other => Err(PalError::Validation(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignParams {
    pub rounds: usize,
    pub budget: usize,
    pub initial_labelled: usize,
    pub seed: u64,
}

impl Default for CampaignParams {
    fn default() -> Self {
        CampaignParams {
            rounds: 4,
            budget: 100,
            initial_labelled: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: usize,
    /// Images PAL could not fill from its class budgets, topped up at random.
    pub topped_up: usize,
    pub labelled_images: usize,
    pub labelled_fraction: f64,
    pub labelled_instances: Vec<usize>,
    /// Expected recall of the detector retrained on the updated labelled set.
    pub recall_proxy: f64,
    /// Fraction of labelled instances that belong to the rarest class.
    pub rare_class_share: f64,
    /// Held-out TP/FP accuracy of the classifier that scores the rarest class,
    /// trained on this round's labelled detections.
    pub rare_class_clc_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCurve {
    pub strategy: Strategy,
    pub rounds: Vec<RoundReport>,
    #[serde(skip)]
    pub final_labelled: BTreeSet<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub num_images: usize,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub rarest_class: ClassId,
    pub rounds: usize,
    pub budget: usize,
    pub initial_labelled: usize,
    pub strategies: Vec<StrategyCurve>,
}

fn initial_split(world: &World, params: &CampaignParams) -> (Vec<ImageId>, Vec<ImageId>) {
    let mut ids = world.image_ids();
    ids.shuffle(&mut rng_for(&[params.seed, 0x1417]));
    let m = params.initial_labelled.min(ids.len());
    let unlabelled = ids.split_off(m);
    (ids, unlabelled)
}

fn split_records(records: &[DetectionRecord], pool: &BTreeSet<ImageId>) -> (Vec<DetectionRecord>, Vec<DetectionRecord>) {
    records.iter().cloned().partition(|r| pool.contains(&r.image_id))
}

fn rare_class_accuracy(
    bank: &ClassifierBank,
    rare: ClassId,
    held_out: &[DetectionRecord],
) -> Result<Option<f64>> {
    let (model, _) = bank.route(rare);
    let Some(model) = model else { return Ok(None) };
    let samples = Sample::from_records(held_out.iter().filter(|r| r.class_id == rare))?;
    if samples.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for s in &samples {
        let p = model.predict_tp(s.pre_nms_count, s.confidence)?;
        if (p >= 0.5) == s.tp {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

/// Runs one strategy for `params.rounds` rounds of selection.
pub fn run_campaign(
    world: &World,
    strategy: Strategy,
    params: &CampaignParams,
    cfg: &SelectionConfig,
) -> Result<StrategyCurve> {
    run_campaign_with_output(world, strategy, params, cfg, None)
}

/// Restricts a dump to the images in `pool`, keeping its pool index order.
pub fn subset_dump(dump: &DetectionDump, pool: &BTreeSet<ImageId>) -> DetectionDump {
    DetectionDump {
        classes: dump.classes.clone(),
        images: dump.images.iter().copied().filter(|id| pool.contains(id)).collect(),
        final_detections: dump
            .final_detections
            .iter()
            .filter(|d| pool.contains(&d.image_id))
            .cloned()
            .collect(),
        pre_nms_proposals: dump
            .pre_nms_proposals
            .iter()
            .filter(|p| pool.contains(&p.image_id))
            .cloned()
            .collect(),
    }
}

/// Writes the world's ground truth and embeddings as `gt.jsonl` and
/// `embeddings.palemb` under `dir`.
pub fn write_world(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PalError::io(dir, e))?;
    write_ground_truth(&world.gt, dir.join("gt.jsonl"))?;
    save_embeddings(&world.embeddings, dir.join("embeddings.palemb"))
}

/// As [`run_campaign`], additionally writing each round's detection dumps
/// (`round-N/labelled.jsonl`, `round-N/unlabelled.jsonl`), the pool state
/// and, for PAL, the selection manifest under `emit`.
pub fn run_campaign_with_output(
    world: &World,
    strategy: Strategy,
    params: &CampaignParams,
    cfg: &SelectionConfig,
    emit: Option<&Path>,
) -> Result<StrategyCurve> {
    let (labelled, unlabelled) = initial_split(world, params);
    if params.budget * params.rounds > unlabelled.len() {
        return Err(PalError::Validation(format!(
            "budget {} x {} rounds exceeds the {} unlabelled images",
            params.budget,
            params.rounds,
            unlabelled.len()
        )));
    }
    let mut state = RoundState::new(labelled, unlabelled, params.budget)?;
    let all_images = world.image_ids();
    let n_classes = world.params.num_classes;
    let rare = world.rarest_class();
    let mut reports = Vec::with_capacity(params.rounds);

    for round in 1..=params.rounds {
        let counts = world.instance_counts(&state.labelled);
        let skill: Vec<f64> = counts.iter().map(|&n| world.params.skill.skill(n)).collect();
        let dump = simulate_detector(world, &skill, &all_images, mix_seed(params.seed, round as u64));
        let round_dir = emit.map(|d| d.join(format!("round-{round}")));
        if let Some(dir) = &round_dir {
            std::fs::create_dir_all(dir).map_err(|e| PalError::io(dir, e))?;
            write_detection_dump(&subset_dump(&dump, &state.labelled), dir.join("labelled.jsonl"))?;
            write_detection_dump(&subset_dump(&dump, &state.unlabelled), dir.join("unlabelled.jsonl"))?;
            let mut s = state.clone();
            s.round = round as u32;
            let json = serde_json::to_string_pretty(&s).expect("state serializes");
            let path = dir.join("state.json");
            std::fs::write(&path, json + "\n").map_err(|e| PalError::io(&path, e))?;
        }
        let matched = match_pool(&dump, None, cfg.iou_prenms, cfg.iou_tp)?;
        let (l_raw, u_records) = split_records(&matched.records, &state.labelled);
        let l_records = label_tp_fp(&l_raw, &world.gt, cfg.iou_tp)?;

        let bank = ClassifierBank::train(n_classes, &l_records, &cfg.classifier)?;
        let held_out = label_tp_fp(&u_records, &world.gt, cfg.iou_tp)?;
        let clc_accuracy = rare_class_accuracy(&bank, rare, &held_out)?;

        let mut chosen: Vec<ImageId> = match strategy {
            Strategy::Random => {
                let mut pool: Vec<ImageId> = state.unlabelled.iter().copied().collect();
                pool.shuffle(&mut rng_for(&[params.seed, round as u64, 0xAA]));
                pool.truncate(params.budget);
                pool
            }
            Strategy::Entropy => {
                let groups = group_by_image(&u_records);
                let empty = Vec::new();
                let mut ranked: Vec<(f64, ImageId)> = state
                    .unlabelled
                    .iter()
                    .map(|&id| (entropy_baseline_score(groups.get(&id).unwrap_or(&empty)), id))
                    .collect();
                ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                ranked.into_iter().take(params.budget).map(|(_, id)| id).collect()
            }
            Strategy::Pal => {
                let inputs = RoundInputs {
                    num_classes: n_classes,
                    labelled: &l_records,
                    unlabelled: &u_records,
                    embeddings: &world.embeddings,
                };
                let mut s = state.clone();
                s.round = round as u32;
                let manifest = run_round(&inputs, cfg, &s).map_err(|e| e.context(format!("round {round}")))?;
                if let Some(dir) = &round_dir {
                    write_selection_manifest(&manifest, dir.join("manifest.json"))?;
                }
                manifest.selected_ids().into_iter().collect()
            }
        };
        let selected = chosen.len();
        let mut topped_up = 0;
        if chosen.len() < params.budget {
            let taken: BTreeSet<ImageId> = chosen.iter().copied().collect();
            let mut rest: Vec<ImageId> = state.unlabelled.iter().copied().filter(|id| !taken.contains(id)).collect();
            rest.shuffle(&mut rng_for(&[params.seed, round as u64, 0x70]));
            rest.truncate(params.budget - chosen.len());
            topped_up = rest.len();
            chosen.extend(rest);
        }

        for id in &chosen {
            state.unlabelled.remove(id);
            state.labelled.insert(*id);
        }
        state.round += 1;

        let counts = world.instance_counts(&state.labelled);
        let skill: Vec<f64> = counts.iter().map(|&n| world.params.skill.skill(n)).collect();
        let total: usize = counts.iter().sum();
        reports.push(RoundReport {
            round,
            selected,
            topped_up,
            labelled_images: state.labelled.len(),
            labelled_fraction: state.labelled.len() as f64 / world.params.num_images as f64,
            rare_class_share: if total == 0 { 0.0 } else { counts[rare as usize] as f64 / total as f64 },
            labelled_instances: counts,
            recall_proxy: world.recall_proxy(&skill),
            rare_class_clc_accuracy: clc_accuracy,
        });
    }

    Ok(StrategyCurve {
        strategy,
        rounds: reports,
        final_labelled: state.labelled,
    })
}

/// Runs several strategies on the same world and initial split.
pub fn run_campaigns(
    world: &World,
    strategies: &[Strategy],
    params: &CampaignParams,
    cfg: &SelectionConfig,
) -> Result<CampaignReport> {
    run_campaigns_with_output(world, strategies, params, cfg, None)
}

/// As [`run_campaigns`]; with `emit`, the world files go to its root and each
/// strategy's rounds to `emit/<strategy>/`.
pub fn run_campaigns_with_output(
    world: &World,
    strategies: &[Strategy],
    params: &CampaignParams,
    cfg: &SelectionConfig,
    emit: Option<&Path>,
) -> Result<CampaignReport> {
    if let Some(dir) = emit {
        write_world(world, dir)?;
    }
    let curves = strategies
        .par_iter()
        .map(|&s| {
            let dir = emit.map(|d| d.join(s.name()));
            run_campaign_with_output(world, s, params, cfg, dir.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CampaignReport {
        seed: params.seed,
        num_images: world.params.num_images,
        num_classes: world.params.num_classes,
        class_counts: world.class_counts.clone(),
        rarest_class: world.rarest_class(),
        rounds: params.rounds,
        budget: params.budget,
        initial_labelled: params.initial_labelled,
        strategies: curves,
    })
}

/// Plain-text table of a campaign report.
pub fn render_report(report: &CampaignReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "campaign seed={} images={} classes={} rarest_class={} budget={} rounds={}",
        report.seed, report.num_images, report.num_classes, report.rarest_class, report.budget, report.rounds
    );
    let _ = writeln!(
        out,
        "{:<8} {:>5} {:>9} {:>8} {:>9} {:>9} {:>8}",
        "strategy", "round", "labelled", "fraction", "recall", "rare_shr", "clc_acc"
    );
    for curve in &report.strategies {
        for r in &curve.rounds {
            let acc = r
                .rare_class_clc_accuracy
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "{:<8} {:>5} {:>9} {:>8.4} {:>9.4} {:>9.4} {:>8}",
                curve.strategy.name(),
                r.round,
                r.labelled_images,
                r.labelled_fraction,
                r.recall_proxy,
                r.rare_class_share,
                acc
            );
        }
    }
    out
}
