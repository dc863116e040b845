//! Evaluation metrics: Chamfer-distance AP, rasterized-IoU AP, and the
//! query-consistency ratio between the two stages.
//!
//! Both AP variants share the standard detection protocol: predictions are
//! pooled per class across the dataset, sorted by descending score, greedily
//! matched against unmatched GT of the same sample, and scored by the area
//! under the all-point interpolated precision-recall curve. Classes with no
//! GT anywhere are reported as `null` and excluded from the mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assign_loss::MatchAssignment;
use crate::geometry::{
    chamfer_distance, rasterize_instance, ClassId, GridSpec, MapInstance, Mask,
};

/// Chamfer matching thresholds in meters.
pub const CHAMFER_THRESHOLDS_M: [f64; 3] = [0.5, 1.0, 1.5];

/// IoU thresholds: closed (filled) elements use the looser-to-stricter band
/// 0.50..0.75, line elements 0.25..0.50, both in steps of 0.05.
pub fn iou_thresholds(class: ClassId) -> [f64; 6] {
    let base = if class.is_closed() { 0.50 } else { 0.25 };
    std::array::from_fn(|i| base + 0.05 * i as f64)
}

/// A predicted map element with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance: MapInstance,
    pub score: f64,
}

/// Per-class AP rows keyed by formatted threshold; `None` marks classes with
/// no GT in the dataset (excluded from the mean).
pub type ApTable = BTreeMap<String, Option<BTreeMap<String, f64>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_chamfer: ApTable,
    pub map_chamfer: f64,
    pub ap_raster: ApTable,
    pub map_raster: f64,
    pub util: f64,
    pub n_samples: usize,
}

fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Area under the all-point interpolated precision-recall curve.
/// `hits` are (score, is_tp) pairs in any order; `n_gt` is the number of GT
/// instances of the class.
pub fn average_precision(hits: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut sorted: Vec<(f64, bool)> = hits.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (rank, (_, is_tp)) in sorted.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Interpolate: precision at recall r = max precision at any recall >= r.
    let mut pmax = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        pmax[i] = pmax[i].max(pmax[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..n {
        if recall[i] > prev_r {
            ap += (recall[i] - prev_r) * pmax[i];
            prev_r = recall[i];
        }
    }
    ap
}

/// Sorted prediction indices for one class: descending score, ties broken by
/// (sample, position) for determinism.
fn class_predictions(
    preds: &[Vec<ScoredInstance>],
    class: ClassId,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (si, sample) in preds.iter().enumerate() {
        for (pi, p) in sample.iter().enumerate() {
            if p.instance.class_id == class {
                out.push((si, pi, p.score));
            }
        }
    }
    out.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    out
}

fn gt_indices(gts: &[Vec<MapInstance>], class: ClassId) -> Vec<Vec<usize>> {
    gts.iter()
        .map(|sample| {
            sample
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class_id == class)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Greedy Chamfer matching: each prediction (in score order) claims the
/// nearest unmatched GT of its sample and is a TP if that distance beats `t`.
fn chamfer_hits(
    preds: &[Vec<ScoredInstance>],
    order: &[(usize, usize, f64)],
    gt_m: &[Vec<Vec<[f64; 2]>>],
    grid: &GridSpec,
    t: f64,
) -> Vec<(f64, bool)> {
    let to_m = |inst: &MapInstance| -> Vec<[f64; 2]> {
        inst.points.iter().map(|p| grid.to_meters(*p)).collect()
    };
    let mut matched: Vec<Vec<bool>> = gt_m.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for &(si, pi, score) in order {
        let pm = to_m(&preds[si][pi].instance);
        let mut best: Option<(f64, usize)> = None;
        for (k, g) in gt_m[si].iter().enumerate() {
            if matched[si][k] {
                continue;
            }
            let d = chamfer_distance(&pm, g).expect("instances are nonempty");
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        let is_tp = match best {
            Some((d, k)) if d < t => {
                matched[si][k] = true;
                true
            }
            _ => false,
        };
        hits.push((score, is_tp));
    }
    hits
}

fn class_gt_meters(
    gts: &[Vec<MapInstance>],
    per_gt: &[Vec<usize>],
    grid: &GridSpec,
) -> Vec<Vec<Vec<[f64; 2]>>> {
    per_gt
        .iter()
        .enumerate()
        .map(|(si, idx)| {
            idx.iter()
                .map(|&i| gts[si][i].points.iter().map(|p| grid.to_meters(*p)).collect())
                .collect()
        })
        .collect()
}

/// Chamfer-distance AP over the dataset. Distances are evaluated in meters.
pub fn chamfer_ap(
    preds: &[Vec<ScoredInstance>],
    gts: &[Vec<MapInstance>],
    grid: &GridSpec,
    thresholds: &[f64],
) -> (ApTable, f64) {
    assert_eq!(preds.len(), gts.len());
    let mut table = ApTable::new();
    let mut class_means = Vec::new();
    for class in ClassId::ALL {
        let per_gt = gt_indices(gts, class);
        let n_gt: usize = per_gt.iter().map(Vec::len).sum();
        if n_gt == 0 {
            table.insert(class.name().to_string(), None);
            continue;
        }
        let order = class_predictions(preds, class);
        let gt_m = class_gt_meters(gts, &per_gt, grid);
        let mut row = BTreeMap::new();
        let mut sum = 0.0;
        for &t in thresholds {
            let hits = chamfer_hits(preds, &order, &gt_m, grid, t);
            let ap = average_precision(&hits, n_gt);
            sum += ap;
            row.insert(threshold_key(t), ap);
        }
        class_means.push(sum / thresholds.len() as f64);
        table.insert(class.name().to_string(), Some(row));
    }
    let map = if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    };
    (table, map)
}

/// Raw (un-interpolated) precision-recall points under the Chamfer protocol
/// at one threshold, one point per prediction rank, per class. Classes with
/// no GT are omitted.
pub fn chamfer_pr_curves(
    preds: &[Vec<ScoredInstance>],
    gts: &[Vec<MapInstance>],
    grid: &GridSpec,
    threshold_m: f64,
) -> BTreeMap<String, Vec<[f64; 2]>> {
    assert_eq!(preds.len(), gts.len());
    let mut out = BTreeMap::new();
    for class in ClassId::ALL {
        let per_gt = gt_indices(gts, class);
        let n_gt: usize = per_gt.iter().map(Vec::len).sum();
        if n_gt == 0 {
            continue;
        }
        let order = class_predictions(preds, class);
        let gt_m = class_gt_meters(gts, &per_gt, grid);
        let hits = chamfer_hits(preds, &order, &gt_m, grid, threshold_m);
        let mut points = Vec::with_capacity(hits.len());
        let mut tp = 0usize;
        for (rank, (_, is_tp)) in hits.iter().enumerate() {
            if *is_tp {
                tp += 1;
            }
            points.push([tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64]);
        }
        out.insert(class.name().to_string(), points);
    }
    out
}

/// IoU between two binary masks; empty-union pairs score 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        let (xa, yb) = (*x > 0.5, *y > 0.5);
        if xa && yb {
            inter += 1;
        }
        if xa || yb {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rasterized AP: instances are drawn on the grid (closed shapes filled,
/// lines stroked `stroke_px` wide) and matched by best mask IoU.
pub fn rasterized_ap(
    preds: &[Vec<ScoredInstance>],
    gts: &[Vec<MapInstance>],
    grid: &GridSpec,
    stroke_px: usize,
) -> (ApTable, f64) {
    assert_eq!(preds.len(), gts.len());
    let mut table = ApTable::new();
    let mut class_means = Vec::new();
    for class in ClassId::ALL {
        let per_gt = gt_indices(gts, class);
        let n_gt: usize = per_gt.iter().map(Vec::len).sum();
        if n_gt == 0 {
            table.insert(class.name().to_string(), None);
            continue;
        }
        let order = class_predictions(preds, class);
        let gt_masks: Vec<Vec<Mask>> = per_gt
            .iter()
            .enumerate()
            .map(|(si, idx)| {
                idx.iter()
                    .map(|&i| rasterize_instance(&gts[si][i], grid, stroke_px))
                    .collect()
            })
            .collect();
        let pred_masks: Vec<Mask> = order
            .iter()
            .map(|&(si, pi, _)| rasterize_instance(&preds[si][pi].instance, grid, stroke_px))
            .collect();
        let thresholds = iou_thresholds(class);
        let mut row = BTreeMap::new();
        let mut sum = 0.0;
        for &t in &thresholds {
            let mut matched: Vec<Vec<bool>> =
                per_gt.iter().map(|idx| vec![false; idx.len()]).collect();
            let mut hits = Vec::with_capacity(order.len());
            for (oi, &(si, _, score)) in order.iter().enumerate() {
                let mut best: Option<(f64, usize)> = None;
                for (k, g) in gt_masks[si].iter().enumerate() {
                    if matched[si][k] {
                        continue;
                    }
                    let iou = mask_iou(&pred_masks[oi], g);
                    if best.map_or(true, |(bi, _)| iou > bi) {
                        best = Some((iou, k));
                    }
                }
                let is_tp = match best {
                    Some((iou, k)) if iou >= t => {
                        matched[si][k] = true;
                        true
                    }
                    _ => false,
                };
                hits.push((score, is_tp));
            }
            let ap = average_precision(&hits, n_gt);
            sum += ap;
            row.insert(threshold_key(t), ap);
        }
        class_means.push(sum / thresholds.len() as f64);
        table.insert(class.name().to_string(), Some(row));
    }
    let map = if class_means.is_empty() {
        0.0
    } else {
        class_means.iter().sum::<f64>() / class_means.len() as f64
    };
    (table, map)
}

/// Per-sample agreement count: GT instances whose matched query index is the
/// same in both assignments.
pub fn util_sample(
    first_stage: &MatchAssignment,
    second_stage: &MatchAssignment,
    n_gt: usize,
) -> (usize, usize) {
    let a = first_stage.query_of_gt();
    let b = second_stage.query_of_gt();
    let agree = (0..n_gt)
        .filter(|g| match (a.get(g), b.get(g)) {
            (Some(qa), Some(qb)) => qa == qb,
            _ => false,
        })
        .count();
    (agree, n_gt)
}

/// Dataset-level consistency ratio, micro-averaged (weighted by GT count);
/// samples without GT are skipped.
pub fn util(samples: &[(MatchAssignment, MatchAssignment, usize)]) -> f64 {
    let mut agree = 0usize;
    let mut total = 0usize;
    for (a, b, n_gt) in samples {
        if *n_gt == 0 {
            continue;
        }
        let (s, n) = util_sample(a, b, *n_gt);
        agree += s;
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        agree as f64 / total as f64
    }
}

/// Assembles the full report for one evaluation pass.
pub fn compute_report(
    preds: &[Vec<ScoredInstance>],
    gts: &[Vec<MapInstance>],
    grid: &GridSpec,
    stroke_px: usize,
    util_value: f64,
) -> MetricsReport {
    let (ap_chamfer, map_chamfer) = chamfer_ap(preds, gts, grid, &CHAMFER_THRESHOLDS_M);
    let (ap_raster, map_raster) = rasterized_ap(preds, gts, grid, stroke_px);
    MetricsReport {
        ap_chamfer,
        map_chamfer,
        ap_raster,
        map_raster,
        util: util_value,
        n_samples: preds.len(),
    }
}
