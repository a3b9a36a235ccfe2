//! Instance-level uncertainty.
//!
//! A logistic classifier per class separates true from false positives in the
//! `(pre-NMS count, confidence)` plane. The binary entropy of its prediction
//! is the instance score. This module also derives the class weights, splits
//! the image budget across classes and builds each class shortlist.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::io::config::ClassifierParams;
use crate::types::{plogp, ClassId, DetectionRecord, ImageId};

/// One labelled training point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub pre_nms_count: f64,
    pub confidence: f64,
    pub tp: bool,
}

impl Sample {
    /// Converts labelled records; every record must carry a TP/FP label.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a DetectionRecord>) -> Result<Vec<Sample>> {
        records
            .into_iter()
            .map(|r| {
                let tp = r.tp_label.ok_or_else(|| {
                    PalError::Validation(format!(
                        "labelled detection on image {} has no TP/FP label",
                        r.image_id
                    ))
                })?;
                Ok(Sample {
                    pre_nms_count: r.pre_nms_count as f64,
                    confidence: r.confidence,
                    tp,
                })
            })
            .collect()
    }
}

/// Anything that maps detection features to a TP probability.
pub trait TpClassifier {
    fn predict_tp(&self, pre_nms_count: f64, confidence: f64) -> Result<f64>;
}

/// Logistic TP/FP classifier over standardized `(pre-NMS count, confidence)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// `None` for the pooled fallback model.
    pub class_id: Option<ClassId>,
    /// Intercept, pre-NMS count slope, confidence slope.
    pub coefficients: [f64; 3],
    /// Infinite when the information matrix is singular or the model is
    /// untrained; stored as `null` in JSON.
    #[serde(with = "unbounded")]
    pub std_errors: [f64; 3],
    pub feature_means: [f64; 2],
    pub feature_stds: [f64; 2],
    pub trained: bool,
    pub fallback: bool,
    pub converged: bool,
    pub iterations: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl ClassifierModel {
    fn untrained(class_id: Option<ClassId>, n_pos: usize, n_neg: usize) -> Self {
        ClassifierModel {
            class_id,
            coefficients: [0.0; 3],
            std_errors: [f64::INFINITY; 3],
            feature_means: [0.0; 2],
            feature_stds: [1.0; 2],
            trained: false,
            fallback: class_id.is_none(),
            converged: false,
            iterations: 0,
            n_pos,
            n_neg,
        }
    }

    /// Linear predictor on raw features.
    pub fn logit(&self, pre_nms_count: f64, confidence: f64) -> f64 {
        let z1 = (pre_nms_count - self.feature_means[0]) / self.feature_stds[0];
        let z2 = (confidence - self.feature_means[1]) / self.feature_stds[1];
        let [b0, b1, b2] = self.coefficients;
        b0 + b1 * z1 + b2 * z2
    }
}

impl TpClassifier for ClassifierModel {
    fn predict_tp(&self, pre_nms_count: f64, confidence: f64) -> Result<f64> {
        if !self.trained {
            return Err(PalError::Untrained(self.class_id.unwrap_or(ClassId::MAX)));
        }
        Ok(sigmoid(self.logit(pre_nms_count, confidence)))
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        v.map(|x| x.is_finite().then_some(x)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        Ok(<[Option<f64>; 3]>::deserialize(d)?.map(|x| x.unwrap_or(f64::INFINITY)))
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Solves a symmetric positive definite 3x3 system by Cholesky.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut l = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = y[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

fn diag_of_inverse(a: [[f64; 3]; 3]) -> Option<[f64; 3]> {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        *o = solve3(a, e)?[i];
    }
    Some(out)
}

struct Design {
    rows: Vec<[f64; 3]>,
    y: Vec<f64>,
    lambda: f64,
}

impl Design {
    fn n(&self) -> f64 {
        self.rows.len() as f64
    }

    /// Mean negative log-likelihood plus `lambda / 2` times the squared slopes.
    fn objective(&self, beta: &[f64; 3]) -> f64 {
        let nll: f64 = self
            .rows
            .iter()
            .zip(&self.y)
            .map(|(x, &y)| {
                let s = dot(x, beta);
                if y > 0.5 {
                    softplus(-s)
                } else {
                    softplus(s)
                }
            })
            .sum();
        nll / self.n() + 0.5 * self.lambda * (beta[1] * beta[1] + beta[2] * beta[2])
    }

    /// Gradient and Hessian of [`Design::objective`].
    fn derivatives(&self, beta: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        for (x, &y) in self.rows.iter().zip(&self.y) {
            let p = sigmoid(dot(x, beta));
            let w = p * (1.0 - p);
            for i in 0..3 {
                g[i] += (p - y) * x[i];
                for j in 0..3 {
                    h[i][j] += w * x[i] * x[j];
                }
            }
        }
        let n = self.n();
        for i in 0..3 {
            g[i] /= n;
            for j in 0..3 {
                h[i][j] /= n;
            }
        }
        for i in 1..3 {
            g[i] += self.lambda * beta[i];
            h[i][i] += self.lambda;
        }
        (g, h)
    }
}

fn dot(x: &[f64; 3], b: &[f64; 3]) -> f64 {
    x[0] * b[0] + x[1] * b[1] + x[2] * b[2]
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

fn fit(class_id: Option<ClassId>, samples: &[Sample], params: &ClassifierParams) -> ClassifierModel {
    let n_pos = samples.iter().filter(|s| s.tp).count();
    let n_neg = samples.len() - n_pos;
    if n_pos < params.min_pos.max(1) || n_neg < params.min_neg.max(1) {
        return ClassifierModel::untrained(class_id, n_pos, n_neg);
    }

    let (m1, s1) = mean_std(samples.iter().map(|s| s.pre_nms_count));
    let (m2, s2) = mean_std(samples.iter().map(|s| s.confidence));
    let design = Design {
        rows: samples
            .iter()
            .map(|s| [1.0, (s.pre_nms_count - m1) / s1, (s.confidence - m2) / s2])
            .collect(),
        y: samples.iter().map(|s| if s.tp { 1.0 } else { 0.0 }).collect(),
        lambda: params.l2_lambda,
    };

    // Damped Newton (IRLS) from zero.
    let mut beta = [0.0f64; 3];
    let mut f = design.objective(&beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let (g, h) = design.derivatives(&beta);
        let Some(step) = solve3(h, g) else { break };
        let descent = -dot(&g, &step);
        let mut t = 1.0;
        let mut next = beta;
        let mut f_next = f;
        for _ in 0..40 {
            next = [beta[0] - t * step[0], beta[1] - t * step[1], beta[2] - t * step[2]];
            f_next = design.objective(&next);
            // the slack keeps full Newton steps near the optimum, where
            // objective differences fall below rounding error
            if f_next <= f + 1e-4 * t * descent + 1e-14 * f.abs().max(1.0) {
                break;
            }
            t *= 0.5;
        }
        if f_next > f + 1e-14 * f.abs().max(1.0) {
            // no descent left at working precision
            break;
        }
        let change = (0..3).map(|i| (next[i] - beta[i]).abs()).fold(0.0, f64::max);
        beta = next;
        f = f_next;
        if change < params.tol {
            converged = true;
            break;
        }
    }

    let (_, h) = design.derivatives(&beta);
    let n = design.n();
    let info = h.map(|row| row.map(|v| v * n));
    let std_errors = diag_of_inverse(info)
        .map(|d| d.map(|v| v.max(0.0).sqrt()))
        .unwrap_or([f64::INFINITY; 3]);

    ClassifierModel {
        class_id,
        coefficients: beta,
        std_errors,
        feature_means: [m1, m2],
        feature_stds: [s1, s2],
        trained: true,
        fallback: class_id.is_none(),
        converged,
        iterations,
        n_pos,
        n_neg,
    }
}

/// Fits the classifier for one class. Too few positives or negatives yield a
/// model with `trained == false`.
pub fn train_clc(class_id: ClassId, samples: &[Sample], params: &ClassifierParams) -> ClassifierModel {
    fit(Some(class_id), samples, params)
}

/// Fits the pooled model used for classes that cannot support their own.
pub fn train_fallback_clc(samples: &[Sample], params: &ClassifierParams) -> ClassifierModel {
    fit(None, samples, params)
}

pub fn predict_tp_probability(model: &ClassifierModel, pre_nms_count: f64, confidence: f64) -> Result<f64> {
    model.predict_tp(pre_nms_count, confidence)
}

/// Binary Shannon entropy in nats.
pub fn lius_score(p: f64) -> f64 {
    -(plogp(p) + plogp(1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Class,
    Fallback,
    None,
}

/// Per-class classifiers plus the pooled fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    pub models: Vec<ClassifierModel>,
    pub fallback: Option<ClassifierModel>,
}

impl ClassifierBank {
    /// Trains one model per declared class. The fallback is trained only when
    /// at least one class lacks a usable model.
    pub fn train(num_classes: usize, labelled: &[DetectionRecord], params: &ClassifierParams) -> Result<Self> {
        let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); num_classes];
        for r in labelled {
            let slot = by_class.get_mut(r.class_id as usize).ok_or_else(|| {
                PalError::Validation(format!("class_id {} outside {num_classes} classes", r.class_id))
            })?;
            slot.extend(Sample::from_records([r])?);
        }
        let models: Vec<ClassifierModel> = by_class
            .par_iter()
            .enumerate()
            .map(|(c, s)| train_clc(c as ClassId, s, params))
            .collect();
        let fallback = models.iter().any(|m| !m.trained).then(|| {
            let pooled: Vec<Sample> = by_class.concat();
            train_fallback_clc(&pooled, params)
        });
        Ok(ClassifierBank { models, fallback })
    }

    /// The model that scores `class_id`, if any.
    pub fn route(&self, class_id: ClassId) -> (Option<&ClassifierModel>, ModelSource) {
        match self.models.get(class_id as usize) {
            Some(m) if m.trained => (Some(m), ModelSource::Class),
            _ => match &self.fallback {
                Some(f) if f.trained => (Some(f), ModelSource::Fallback),
                _ => (None, ModelSource::None),
            },
        }
    }

    /// Scores every unlabelled detection. `instance` is the detection's
    /// position among its image's detections in input order. Classes without
    /// a usable model score 0.
    pub fn score(&self, unlabelled: &[DetectionRecord]) -> Result<Vec<InstanceScore>> {
        let mut seen: BTreeMap<ImageId, usize> = BTreeMap::new();
        unlabelled
            .iter()
            .map(|r| {
                let slot = seen.entry(r.image_id).or_insert(0);
                let instance = *slot;
                *slot += 1;
                let (model, source) = self.route(r.class_id);
                let p_tp = model
                    .map(|m| m.predict_tp(r.pre_nms_count as f64, r.confidence))
                    .transpose()?;
                Ok(InstanceScore {
                    image_id: r.image_id,
                    class_id: r.class_id,
                    instance,
                    p_tp,
                    lius: p_tp.map_or(0.0, lius_score),
                    source,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub instance: usize,
    pub p_tp: Option<f64>,
    pub lius: f64,
    pub source: ModelSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: ClassId,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub r_c: f64,
}

/// Class weights `r_c = 1 - (n_cl / N_l + n_cu / N_u) / 2` for every declared
/// class.
pub fn compute_class_ratios(
    num_classes: usize,
    labelled: &[DetectionRecord],
    unlabelled: &[DetectionRecord],
) -> Result<Vec<ClassStats>> {
    if labelled.is_empty() {
        return Err(PalError::EmptyPool("labelled"));
    }
    if unlabelled.is_empty() {
        return Err(PalError::EmptyPool("unlabelled"));
    }
    let count = |recs: &[DetectionRecord]| -> Result<Vec<usize>> {
        let mut n = vec![0usize; num_classes];
        for r in recs {
            *n.get_mut(r.class_id as usize).ok_or_else(|| {
                PalError::Validation(format!("class_id {} outside {num_classes} classes", r.class_id))
            })? += 1;
        }
        Ok(n)
    };
    let nl = count(labelled)?;
    let nu = count(unlabelled)?;
    let (tl, tu) = (labelled.len() as f64, unlabelled.len() as f64);
    Ok((0..num_classes)
        .map(|c| ClassStats {
            class_id: c as ClassId,
            n_labelled: nl[c],
            n_unlabelled: nu[c],
            r_c: (1.0 - 0.5 * (nl[c] as f64 / tl + nu[c] as f64 / tu)).clamp(0.0, 1.0),
        })
        .collect())
}

/// Number of distinct unlabelled images containing each class.
pub fn image_capacity(num_classes: usize, unlabelled: &[DetectionRecord]) -> Vec<usize> {
    let mut sets: Vec<BTreeSet<ImageId>> = vec![BTreeSet::new(); num_classes];
    for r in unlabelled {
        if let Some(s) = sets.get_mut(r.class_id as usize) {
            s.insert(r.image_id);
        }
    }
    sets.iter().map(BTreeSet::len).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub per_class: Vec<usize>,
    pub total_b: usize,
}

impl BudgetPlan {
    pub fn allocated(&self) -> usize {
        self.per_class.iter().sum()
    }
}

/// Hamilton apportionment of `amount` over `members` by `weights`; remainder
/// ties go to the lower index. Zero total weight falls back to equal weights.
fn largest_remainder(amount: usize, members: &[usize], weights: &[f64]) -> Vec<usize> {
    if members.is_empty() || amount == 0 {
        return vec![0; members.len()];
    }
    let total: f64 = members.iter().map(|&i| weights[i]).sum();
    let w = |i: usize| if total > 0.0 { weights[i] / total } else { 1.0 / members.len() as f64 };
    let exact: Vec<f64> = members.iter().map(|&i| amount as f64 * w(i)).collect();
    let mut shares: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut given: usize = shares.iter().sum();
    let mut k = 0;
    while given < amount {
        shares[order[k % order.len()]] += 1;
        given += 1;
        k += 1;
    }
    // floating-point floors can overshoot by one in degenerate cases
    let mut k = order.len();
    while given > amount {
        k -= 1;
        let i = order[k % order.len()];
        if shares[i] > 0 {
            shares[i] -= 1;
            given -= 1;
        }
        if k == 0 {
            k = order.len();
        }
    }
    shares
}

/// Splits `b` images across classes proportionally to `r_c`, capped by each
/// class's image capacity, with clamped surplus poured back into the classes
/// that still have room.
pub fn allocate_budgets(stats: &[ClassStats], capacity: &[usize], b: usize) -> BudgetPlan {
    let n = stats.len();
    assert_eq!(n, capacity.len(), "one capacity per class");
    let weights: Vec<f64> = stats.iter().map(|s| s.r_c.max(0.0)).collect();
    let mut alloc = vec![0usize; n];
    if b == 0 || capacity.iter().all(|&c| c == 0) {
        return BudgetPlan { per_class: alloc, total_b: b };
    }

    let mut members: Vec<usize> = (0..n).collect();
    let mut pending = b;
    while pending > 0 && !members.is_empty() {
        let shares = largest_remainder(pending, &members, &weights);
        pending = 0;
        for (&i, s) in members.iter().zip(shares) {
            alloc[i] += s;
            if alloc[i] > capacity[i] {
                pending += alloc[i] - capacity[i];
                alloc[i] = capacity[i];
            }
        }
        members.retain(|&i| alloc[i] < capacity[i]);
    }
    BudgetPlan { per_class: alloc, total_b: b }
}

/// An image shortlisted for one class, carried by its most uncertain
/// instance of that class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub instance: usize,
    pub lius: f64,
}

/// Ranks images per class by their highest class instance score (ties by
/// ascending image id) and keeps the top `2 * b_c`.
pub fn shortlist_candidates(scores: &[InstanceScore], plan: &BudgetPlan) -> Vec<Vec<Candidate>> {
    let n = plan.per_class.len();
    let mut best: Vec<BTreeMap<ImageId, Candidate>> = vec![BTreeMap::new(); n];
    for s in scores {
        let Some(map) = best.get_mut(s.class_id as usize) else { continue };
        let cand = Candidate {
            image_id: s.image_id,
            class_id: s.class_id,
            instance: s.instance,
            lius: s.lius,
        };
        map.entry(s.image_id)
            .and_modify(|c| {
                if s.lius > c.lius || (s.lius == c.lius && s.instance < c.instance) {
                    *c = cand.clone();
                }
            })
            .or_insert(cand);
    }
    best.into_iter()
        .zip(&plan.per_class)
        .map(|(map, &b_c)| {
            let mut list: Vec<Candidate> = map.into_values().collect();
            list.sort_by(|a, b| b.lius.total_cmp(&a.lius).then(a.image_id.cmp(&b.image_id)));
            list.truncate(2 * b_c);
            list
        })
        .collect()
}
