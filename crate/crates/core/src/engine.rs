//! One active-learning round, end to end.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::guide::{group_by_image, guide_signals, ImageSignals};
use crate::io::config::SelectionConfig;
use crate::io::embeddings::EmbeddingStore;
use crate::io::records::{DetectionDump, GroundTruthSet};
use crate::lius::{
    allocate_budgets, compute_class_ratios, image_capacity, shortlist_candidates, BudgetPlan, Candidate,
    ClassStats, ClassifierBank, InstanceScore,
};
use crate::matching::match_pool;
use crate::types::{ClassId, DetectionRecord, ImageId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedImage {
    pub image_id: ImageId,
    /// Index, within the image, of the detection that put it on the shortlist.
    pub instance: usize,
    pub lius: f64,
    pub cwie: f64,
    pub rcdi: f64,
    pub rcsp: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_id: ClassId,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub r_c: f64,
    pub capacity: usize,
    pub b_c: usize,
    pub shortlisted: usize,
    pub deficit: usize,
    pub selected: Vec<SelectedImage>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub budget: usize,
    pub allocated: usize,
    pub selected: usize,
    pub deficit: usize,
}

/// The images chosen in one round with their full score breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub round: u32,
    pub budget: usize,
    pub per_class: Vec<ClassSelection>,
    pub totals: ManifestTotals,
}

impl SelectionManifest {
    pub fn empty(round: u32, budget: usize) -> Self {
        SelectionManifest {
            round,
            budget,
            per_class: Vec::new(),
            totals: ManifestTotals {
                budget,
                ..Default::default()
            },
        }
    }

    pub fn selected_ids(&self) -> BTreeSet<ImageId> {
        self.per_class
            .iter()
            .flat_map(|c| c.selected.iter().map(|s| s.image_id))
            .collect()
    }
}

/// Labelled and unlabelled pools for the current round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub budget: usize,
    pub labelled: BTreeSet<ImageId>,
    pub unlabelled: BTreeSet<ImageId>,
    #[serde(default)]
    pub history: Vec<SelectionManifest>,
}

impl RoundState {
    pub fn new(
        labelled: impl IntoIterator<Item = ImageId>,
        unlabelled: impl IntoIterator<Item = ImageId>,
        budget: usize,
    ) -> Result<Self> {
        let state = RoundState {
            round: 1,
            budget,
            labelled: labelled.into_iter().collect(),
            unlabelled: unlabelled.into_iter().collect(),
            history: Vec::new(),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.round == 0 {
            return Err(PalError::Validation("round index starts at 1".into()));
        }
        if let Some(id) = self.labelled.intersection(&self.unlabelled).next() {
            return Err(PalError::Validation(format!(
                "image {id} is in both the labelled and unlabelled pool"
            )));
        }
        Ok(())
    }
}

/// Matched detections for both pools plus the embedding store.
#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub num_classes: usize,
    pub labelled: &'a [DetectionRecord],
    pub unlabelled: &'a [DetectionRecord],
    pub embeddings: &'a EmbeddingStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub signals: ImageSignals,
    pub score: f64,
}

impl ScoredCandidate {
    fn to_selected(&self) -> SelectedImage {
        SelectedImage {
            image_id: self.candidate.image_id,
            instance: self.candidate.instance,
            lius: self.candidate.lius,
            cwie: self.signals.cwie_norm,
            rcdi: self.signals.rcdi_norm,
            rcsp: self.signals.rcsp,
            score: self.score,
        }
    }
}

/// `alpha * lius + gamma * rcsp + beta * (cwie + rcdi)` on normalized signals.
pub fn combine_score(lius: f64, signals: &ImageSignals, cfg: &SelectionConfig) -> f64 {
    cfg.alpha * lius + cfg.gamma * signals.rcsp + cfg.beta * (signals.cwie_norm + signals.rcdi_norm)
}

/// Takes up to `b_c` of a class's candidates by descending score (ties by
/// ascending image id), skipping and then claiming images in `claimed`.
pub fn select_top(candidates: &[ScoredCandidate], b_c: usize, claimed: &mut BTreeSet<ImageId>) -> Vec<ScoredCandidate> {
    let mut ranked: Vec<&ScoredCandidate> = candidates.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.candidate.image_id.cmp(&b.candidate.image_id))
    });
    let mut out = Vec::new();
    for c in ranked {
        if out.len() == b_c {
            break;
        }
        if claimed.insert(c.candidate.image_id) {
            out.push(c.clone());
        }
    }
    out
}

/// Class visiting order for cross-class deduplication: fewest unlabelled
/// instances first, ties by class id.
pub fn selection_order(stats: &[ClassStats]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by_key(|&i| (stats[i].n_unlabelled, stats[i].class_id));
    order
}

/// Unweighted sum of detection class-distribution entropies.
pub fn entropy_baseline_score(detections: &[&DetectionRecord]) -> f64 {
    detections.iter().map(|d| d.class_distribution().entropy()).sum()
}

/// Everything a round computed, for inspection and testing.
#[derive(Debug, Clone)]
pub struct RoundTrace {
    pub bank: ClassifierBank,
    pub scores: Vec<InstanceScore>,
    pub stats: Vec<ClassStats>,
    pub capacity: Vec<usize>,
    pub plan: BudgetPlan,
    pub shortlists: Vec<Vec<ScoredCandidate>>,
    pub manifest: SelectionManifest,
}

fn check_membership(records: &[DetectionRecord], pool: &BTreeSet<ImageId>, name: &str) -> Result<()> {
    match records.iter().find(|r| !pool.contains(&r.image_id)) {
        Some(r) => Err(PalError::Validation(format!(
            "detection on image {} supplied as {name} but the image is not in the {name} pool",
            r.image_id
        ))),
        None => Ok(()),
    }
}

pub fn run_round(inputs: &RoundInputs<'_>, cfg: &SelectionConfig, state: &RoundState) -> Result<SelectionManifest> {
    run_round_traced(inputs, cfg, state).map(|t| t.manifest)
}

pub fn run_round_traced(inputs: &RoundInputs<'_>, cfg: &SelectionConfig, state: &RoundState) -> Result<RoundTrace> {
    state.validate()?;
    check_membership(inputs.labelled, &state.labelled, "labelled")?;
    check_membership(inputs.unlabelled, &state.unlabelled, "unlabelled")?;
    let n = inputs.num_classes;

    let bank = ClassifierBank::train(n, inputs.labelled, &cfg.classifier)
        .map_err(|e| e.context("training TP/FP classifiers"))?;

    if inputs.unlabelled.is_empty() {
        return Ok(RoundTrace {
            bank,
            scores: Vec::new(),
            stats: Vec::new(),
            capacity: vec![0; n],
            plan: BudgetPlan {
                per_class: vec![0; n],
                total_b: state.budget,
            },
            shortlists: vec![Vec::new(); n],
            manifest: SelectionManifest::empty(state.round, state.budget),
        });
    }

    let scores = bank.score(inputs.unlabelled).map_err(|e| e.context("scoring instances"))?;
    let stats = compute_class_ratios(n, inputs.labelled, inputs.unlabelled)
        .map_err(|e| e.context("computing class ratios"))?;
    let capacity = image_capacity(n, inputs.unlabelled);
    let plan = allocate_budgets(&stats, &capacity, state.budget);
    let shortlists = shortlist_candidates(&scores, &plan);

    let ratios: Vec<f64> = stats.iter().map(|s| s.r_c).collect();
    let groups = group_by_image(inputs.unlabelled);
    let scored: Vec<Vec<ScoredCandidate>> = shortlists
        .par_iter()
        .map(|list| {
            let signals = guide_signals(list, &groups, &ratios, inputs.embeddings)?;
            Ok(list
                .iter()
                .zip(signals)
                .map(|(c, s)| ScoredCandidate {
                    score: combine_score(c.lius, &s, cfg),
                    candidate: c.clone(),
                    signals: s,
                })
                .collect())
        })
        .collect::<Result<_>>()
        .map_err(|e| e.context("computing image signals"))?;

    let mut claimed = BTreeSet::new();
    let mut chosen: Vec<Vec<ScoredCandidate>> = vec![Vec::new(); n];
    for c in selection_order(&stats) {
        chosen[c] = select_top(&scored[c], plan.per_class[c], &mut claimed);
    }

    let per_class: Vec<ClassSelection> = (0..n)
        .map(|c| {
            let mut selected: Vec<SelectedImage> = chosen[c].iter().map(ScoredCandidate::to_selected).collect();
            selected.sort_by_key(|s| s.image_id);
            ClassSelection {
                class_id: c as ClassId,
                n_labelled: stats[c].n_labelled,
                n_unlabelled: stats[c].n_unlabelled,
                r_c: stats[c].r_c,
                capacity: capacity[c],
                b_c: plan.per_class[c],
                shortlisted: scored[c].len(),
                deficit: plan.per_class[c] - selected.len(),
                selected,
            }
        })
        .collect();
    let selected = per_class.iter().map(|c| c.selected.len()).sum();
    let manifest = SelectionManifest {
        round: state.round,
        budget: state.budget,
        totals: ManifestTotals {
            budget: state.budget,
            allocated: plan.allocated(),
            selected,
            deficit: per_class.iter().map(|c| c.deficit).sum(),
        },
        per_class,
    };

    Ok(RoundTrace {
        bank,
        scores,
        stats,
        capacity,
        plan,
        shortlists: scored,
        manifest,
    })
}

/// Matches raw dumps (ground truth only for the labelled pool) and runs the
/// round on the result.
pub fn run_round_from_dumps(
    gt: &GroundTruthSet,
    labelled: &DetectionDump,
    unlabelled: &DetectionDump,
    embeddings: &EmbeddingStore,
    cfg: &SelectionConfig,
    state: &RoundState,
) -> Result<SelectionManifest> {
    if labelled.classes != unlabelled.classes {
        return Err(PalError::Validation("labelled and unlabelled dumps declare different classes".into()));
    }
    let l = match_pool(labelled, Some(gt), cfg.iou_prenms, cfg.iou_tp).map_err(|e| e.context("matching labelled pool"))?;
    let u = match_pool(unlabelled, None, cfg.iou_prenms, cfg.iou_tp).map_err(|e| e.context("matching unlabelled pool"))?;
    let inputs = RoundInputs {
        num_classes: labelled.classes.len(),
        labelled: &l.records,
        unlabelled: &u.records,
        embeddings,
    };
    run_round(&inputs, cfg, state)
}

/// Moves the selected images from the unlabelled to the labelled pool and
/// advances the round.
pub fn update_pools(state: &RoundState, manifest: &SelectionManifest) -> Result<RoundState> {
    let selected = manifest.selected_ids();
    if let Some(id) = selected.iter().find(|id| !state.unlabelled.contains(id)) {
        return Err(PalError::Validation(format!(
            "selected image {id} is not in the unlabelled pool"
        )));
    }
    let mut next = state.clone();
    next.labelled.extend(selected.iter().copied());
    next.unlabelled.retain(|id| !selected.contains(id));
    next.round += 1;
    next.history.push(manifest.clone());
    Ok(next)
}
