//! Straightforward recomputation of one selection round, written without
//! calling into pal-core so it can check the engine. Slow and simple on
//! purpose: every quantity is recomputed from the raw records.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use pal_core::{ClassId, DetectionRecord, ImageId};

#[derive(Debug, Clone)]
pub struct OracleParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub min_pos: usize,
    pub min_neg: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePick {
    pub image_id: ImageId,
    pub instance: usize,
    pub lius: f64,
    pub cwie: f64,
    pub rcdi: f64,
    pub rcsp: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleClass {
    pub r_c: f64,
    pub capacity: usize,
    pub b_c: usize,
    pub shortlisted: usize,
    pub picks: Vec<OraclePick>,
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub fn binary_entropy(p: f64) -> f64 {
    -(xlogx(p) + xlogx(1.0 - p))
}

fn distribution_entropy(d: &DetectionRecord) -> f64 {
    match &d.class_probabilities {
        Some(ps) => -ps.iter().map(|&p| xlogx(p)).sum::<f64>(),
        None => binary_entropy(d.confidence),
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Fitted model as (means, stds, coefficients), or None when the class has
/// too few positives or negatives.
pub type OracleModel = ([f64; 2], [f64; 2], Vec<f64>);

pub fn fit_logistic(rows: &[(f64, f64, bool)], p: &OracleParams) -> Option<OracleModel> {
    let pos = rows.iter().filter(|r| r.2).count();
    let neg = rows.len() - pos;
    if pos < p.min_pos.max(1) || neg < p.min_neg.max(1) {
        return None;
    }
    let n = rows.len() as f64;
    let col = |f: &dyn Fn(&(f64, f64, bool)) -> f64| -> (f64, f64) {
        let m = rows.iter().map(f).sum::<f64>() / n;
        let v = rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n;
        (m, if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
    };
    let (m1, s1) = col(&|r| r.0);
    let (m2, s2) = col(&|r| r.1);
    let x: Vec<[f64; 3]> = rows.iter().map(|r| [1.0, (r.0 - m1) / s1, (r.1 - m2) / s2]).collect();
    let y: Vec<f64> = rows.iter().map(|r| if r.2 { 1.0 } else { 0.0 }).collect();

    let loss = |b: &[f64]| -> f64 {
        let mut l = 0.0;
        for (xi, &yi) in x.iter().zip(&y) {
            let t = xi[0] * b[0] + xi[1] * b[1] + xi[2] * b[2];
            // log(1 + exp(-t)) for y = 1, log(1 + exp(t)) for y = 0
            let s = if yi == 1.0 { -t } else { t };
            l += if s > 30.0 { s + (-s).exp() } else { s.exp().ln_1p() };
        }
        l / n + p.lambda / 2.0 * (b[1] * b[1] + b[2] * b[2])
    };

    let mut b = vec![0.0; 3];
    for _ in 0..500 {
        let mut g = vec![0.0; 3];
        let mut h = vec![vec![0.0; 3]; 3];
        for (xi, &yi) in x.iter().zip(&y) {
            let t = xi[0] * b[0] + xi[1] * b[1] + xi[2] * b[2];
            let mu = 1.0 / (1.0 + (-t).exp());
            for i in 0..3 {
                g[i] += (mu - yi) * xi[i] / n;
                for j in 0..3 {
                    h[i][j] += mu * (1.0 - mu) * xi[i] * xi[j] / n;
                }
            }
        }
        for i in 1..3 {
            g[i] += p.lambda * b[i];
            h[i][i] += p.lambda;
        }
        let step = solve(h, g);
        let mut t = 1.0;
        let base = loss(&b);
        let mut next = b.clone();
        for _ in 0..60 {
            next = (0..3).map(|i| b[i] - t * step[i]).collect();
            // accept anything within rounding noise of the current loss
            if loss(&next) <= base + 1e-14 * base.abs().max(1.0) {
                break;
            }
            t /= 2.0;
        }
        let change = (0..3).map(|i| (next[i] - b[i]).abs()).fold(0.0, f64::max);
        b = next;
        if change < 1e-13 {
            break;
        }
    }
    Some(([m1, m2], [s1, s2], b))
}

pub fn predict(model: &OracleModel, count: f64, conf: f64) -> f64 {
    let (m, s, b) = model;
    let t = b[0] + b[1] * (count - m[0]) / s[0] + b[2] * (conf - m[1]) / s[1];
    1.0 / (1.0 + (-t).exp())
}

/// Largest-remainder split of `amount` over `active` by weight, remainder
/// ties to the lower class id.
fn hamilton(amount: usize, active: &[usize], r: &[f64]) -> BTreeMap<usize, usize> {
    let total: f64 = active.iter().map(|&c| r[c]).sum();
    let quota = |c: usize| {
        let w = if total > 0.0 { r[c] / total } else { 1.0 / active.len() as f64 };
        amount as f64 * w
    };
    let mut out: BTreeMap<usize, usize> = active.iter().map(|&c| (c, quota(c).floor() as usize)).collect();
    let mut by_rem: Vec<usize> = active.to_vec();
    by_rem.sort_by(|&a, &b| {
        let ra = quota(a) - quota(a).floor();
        let rb = quota(b) - quota(b).floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = amount - out.values().sum::<usize>();
    let mut i = 0;
    while left > 0 {
        *out.get_mut(&by_rem[i % by_rem.len()]).unwrap() += 1;
        left -= 1;
        i += 1;
    }
    out
}

pub fn budgets(r: &[f64], cap: &[usize], b: usize) -> Vec<usize> {
    let mut alloc = vec![0; r.len()];
    if b == 0 || cap.iter().all(|&c| c == 0) {
        return alloc;
    }
    let mut remaining = b;
    let mut active: Vec<usize> = (0..r.len()).collect();
    while remaining > 0 && !active.is_empty() {
        let shares = hamilton(remaining, &active, r);
        remaining = 0;
        for (&c, &s) in &shares {
            let room = cap[c] - alloc[c];
            let take = s.min(room);
            alloc[c] += take;
            remaining += s - take;
        }
        active.retain(|&c| alloc[c] < cap[c]);
    }
    alloc
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Recomputes a whole round. Returns one entry per class.
pub fn run(
    num_classes: usize,
    labelled: &[DetectionRecord],
    unlabelled: &[DetectionRecord],
    embeddings: &BTreeMap<ImageId, Vec<f32>>,
    p: &OracleParams,
) -> Vec<OracleClass> {
    let rows = |c: Option<ClassId>| -> Vec<(f64, f64, bool)> {
        labelled
            .iter()
            .filter(|d| c.is_none_or(|c| d.class_id == c))
            .map(|d| (d.pre_nms_count as f64, d.confidence, d.tp_label.unwrap()))
            .collect()
    };
    let per_class: Vec<Option<OracleModel>> = (0..num_classes).map(|c| fit_logistic(&rows(Some(c as ClassId)), p)).collect();
    let pooled = if per_class.iter().any(Option::is_none) {
        fit_logistic(&rows(None), p)
    } else {
        None
    };

    // instance index = position among the image's unlabelled detections
    let mut instance = Vec::new();
    let mut seen: BTreeMap<ImageId, usize> = BTreeMap::new();
    for d in unlabelled {
        let k = seen.entry(d.image_id).or_insert(0);
        instance.push(*k);
        *k += 1;
    }
    let lius: Vec<f64> = unlabelled
        .iter()
        .map(|d| {
            let model = per_class[d.class_id as usize].as_ref().or(pooled.as_ref());
            model.map_or(0.0, |m| binary_entropy(predict(m, d.pre_nms_count as f64, d.confidence)))
        })
        .collect();

    let nl = labelled.len() as f64;
    let nu = unlabelled.len() as f64;
    let r: Vec<f64> = (0..num_classes as ClassId)
        .map(|c| {
            let a = labelled.iter().filter(|d| d.class_id == c).count() as f64;
            let b = unlabelled.iter().filter(|d| d.class_id == c).count() as f64;
            1.0 - 0.5 * (a / nl + b / nu)
        })
        .collect();
    let n_u: Vec<usize> = (0..num_classes as ClassId)
        .map(|c| unlabelled.iter().filter(|d| d.class_id == c).count())
        .collect();
    let cap: Vec<usize> = (0..num_classes as ClassId)
        .map(|c| {
            unlabelled
                .iter()
                .filter(|d| d.class_id == c)
                .map(|d| d.image_id)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect();
    let b_c = budgets(&r, &cap, p.budget);

    let image_dets = |id: ImageId| unlabelled.iter().filter(move |d| d.image_id == id);
    let mut scored: Vec<Vec<OraclePick>> = Vec::new();
    for c in 0..num_classes {
        // best instance per image: highest lius, then lowest index
        let mut best: BTreeMap<ImageId, (f64, usize)> = BTreeMap::new();
        for (k, d) in unlabelled.iter().enumerate() {
            if d.class_id as usize != c {
                continue;
            }
            let e = best.entry(d.image_id).or_insert((lius[k], instance[k]));
            if lius[k] > e.0 || (lius[k] == e.0 && instance[k] < e.1) {
                *e = (lius[k], instance[k]);
            }
        }
        let mut list: Vec<(ImageId, f64, usize)> = best.into_iter().map(|(id, (l, j))| (id, l, j)).collect();
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(2 * b_c[c]);

        let cw: Vec<f64> = list
            .iter()
            .map(|&(id, _, _)| image_dets(id).map(|d| r[d.class_id as usize] * distribution_entropy(d)).sum())
            .collect();
        let rd: Vec<f64> = list
            .iter()
            .map(|&(id, _, _)| {
                let ks: BTreeSet<ClassId> = image_dets(id).map(|d| d.class_id).collect();
                ks.iter().map(|&k| r[k as usize]).sum()
            })
            .collect();
        let norm = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().copied().fold(0.0, f64::max);
            v.iter().map(|x| if m > 0.0 { x / m } else { 0.0 }).collect()
        };
        let (cwn, rdn) = (norm(&cw), norm(&rd));
        let picks: Vec<OraclePick> = list
            .iter()
            .enumerate()
            .map(|(i, &(id, l, j))| {
                let mut max_sim = 0.0f64;
                for prev in &list[..i] {
                    max_sim = max_sim.max(cos(&embeddings[&id], &embeddings[&prev.0]));
                }
                let rcsp = if i == 0 { 1.0 } else { 1.0 - max_sim };
                OraclePick {
                    image_id: id,
                    instance: j,
                    lius: l,
                    cwie: cwn[i],
                    rcdi: rdn[i],
                    rcsp,
                    score: p.alpha * l + p.gamma * rcsp + p.beta * (cwn[i] + rdn[i]),
                }
            })
            .collect();
        scored.push(picks);
    }

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by_key(|&c| (n_u[c], c));
    let mut taken: BTreeSet<ImageId> = BTreeSet::new();
    let mut out: Vec<OracleClass> = (0..num_classes)
        .map(|c| OracleClass {
            r_c: r[c],
            capacity: cap[c],
            b_c: b_c[c],
            shortlisted: scored[c].len(),
            picks: Vec::new(),
        })
        .collect();
    for c in order {
        let mut ranked = scored[c].clone();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        for pick in ranked {
            if out[c].picks.len() == b_c[c] {
                break;
            }
            if taken.insert(pick.image_id) {
                out[c].picks.push(pick);
            }
        }
        out[c].picks.sort_by_key(|p| p.image_id);
    }
    out
}

fn iou(a: &pal_core::BBox, b: &pal_core::BBox) -> f64 {
    let w = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let h = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Pre-NMS count per detection: each proposal goes to the same-image
/// detection it overlaps most (IoU at least `thr`, ties to the earlier one).
pub fn pre_nms_counts(dump: &pal_core::DetectionDump, thr: f64) -> Vec<u32> {
    let dets = &dump.final_detections;
    let mut counts = vec![0u32; dets.len()];
    for p in &dump.pre_nms_proposals {
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in dets.iter().enumerate() {
            if d.image_id != p.image_id {
                continue;
            }
            let v = iou(&d.bbox, &p.bbox);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            counts[i] += 1;
        }
    }
    counts
}

/// TP flags by greedy matching in descending confidence (ties by index)
/// against unused same-class boxes, each detection taking its best box.
pub fn tp_flags(dump: &pal_core::DetectionDump, gt: &pal_core::GroundTruthSet, thr: f64) -> Vec<bool> {
    let dets = &dump.final_detections;
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut used = vec![false; gt.annotations.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (k, a) in gt.annotations.iter().enumerate() {
            if used[k] || a.image_id != d.image_id || a.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &a.bbox);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            used[k] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Builds the manifest the engine should produce from oracle output.
pub fn to_manifest(
    round: u32,
    budget: usize,
    labelled: &[DetectionRecord],
    unlabelled: &[DetectionRecord],
    classes: &[OracleClass],
) -> pal_core::SelectionManifest {
    use pal_core::engine::{ClassSelection, ManifestTotals, SelectedImage};
    let count = |recs: &[DetectionRecord], c: usize| recs.iter().filter(|d| d.class_id as usize == c).count();
    let per_class: Vec<ClassSelection> = classes
        .iter()
        .enumerate()
        .map(|(c, o)| ClassSelection {
            class_id: c as ClassId,
            n_labelled: count(labelled, c),
            n_unlabelled: count(unlabelled, c),
            r_c: o.r_c,
            capacity: o.capacity,
            b_c: o.b_c,
            shortlisted: o.shortlisted,
            deficit: o.b_c - o.picks.len(),
            selected: o
                .picks
                .iter()
                .map(|p| SelectedImage {
                    image_id: p.image_id,
                    instance: p.instance,
                    lius: p.lius,
                    cwie: p.cwie,
                    rcdi: p.rcdi,
                    rcsp: p.rcsp,
                    score: p.score,
                })
                .collect(),
        })
        .collect();
    pal_core::SelectionManifest {
        round,
        budget,
        totals: ManifestTotals {
            budget,
            allocated: classes.iter().map(|o| o.b_c).sum(),
            selected: classes.iter().map(|o| o.picks.len()).sum(),
            deficit: per_class.iter().map(|c| c.deficit).sum(),
        },
        per_class,
    }
}
