//! Bipartite matching and the training losses.
//!
//! Matching runs on detached prediction values (costs are plain arrays);
//! the losses are then built on the tape against the matched targets.
//! Matched queries are supervised toward their GT class/mask/points,
//! unmatched ones toward "no object". Denoise rows skip matching entirely:
//! row `g * n_gt + i` is always supervised by GT instance `i`.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::config::{LossWeights, RunConfig};
use crate::geometry::{equivalent_orderings, MapInstance, NUM_CLASSES};
use crate::graph::{Tape, Var};
use crate::impnet::{gt_mask_row, DenoiseBatch, ImpOutput};
use crate::mmpnet::MmpOutput;

/// Matched `(query_index, gt_index)` pairs, sorted by query index.
/// Queries absent from `pairs` are implicitly "no object".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn gt_of_query(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().copied().collect()
    }

    pub fn query_of_gt(&self) -> BTreeMap<usize, usize> {
        self.pairs.iter().map(|&(q, g)| (g, q)).collect()
    }
}

/// Square Jonker-Volgenant assignment. Returns (col_of_row, row duals,
/// col duals); reduced costs are nonnegative on every edge and zero on
/// matched edges.
fn jv_square(cost: &Array2<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j] = row (1-based) matched to column j; column 0 is virtual.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    (col_of_row, u, v)
}

/// Kuhn's augmenting-path matching on a boolean adjacency; returns whether
/// every row can be matched.
fn perfect_matching_exists(adj: &[Vec<usize>], n_cols: usize) -> bool {
    let n_rows = adj.len();
    if n_rows > n_cols {
        return false;
    }
    let mut col_match = vec![usize::MAX; n_cols];
    fn try_row(
        r: usize,
        adj: &[Vec<usize>],
        col_match: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for &c in &adj[r] {
            if !seen[c] {
                seen[c] = true;
                if col_match[c] == usize::MAX
                    || try_row(col_match[c], adj, col_match, seen)
                {
                    col_match[c] = r;
                    return true;
                }
            }
        }
        false
    }
    for r in 0..n_rows {
        let mut seen = vec![false; n_cols];
        if !try_row(r, adj, &mut col_match, &mut seen) {
            return false;
        }
    }
    true
}

/// Minimum-cost assignment of `min(n, m)` pairs with deterministic
/// tie-breaking: among all optima, picks the one whose query-to-gt vector
/// (unmatched = +inf sentinel, queries in ascending order) is
/// lexicographically smallest.
pub fn hungarian(cost: &Array2<f64>) -> MatchAssignment {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return MatchAssignment { pairs: Vec::new() };
    }
    // Pad to square with zero-cost dummy rows/columns; dummies absorb the
    // unmatched side without changing the real total.
    let size = n.max(m);
    let mut sq = Array2::zeros((size, size));
    for i in 0..n {
        for j in 0..m {
            assert!(cost[[i, j]].is_finite(), "hungarian requires finite costs");
            sq[[i, j]] = cost[[i, j]];
        }
    }
    let (_, u, v) = jv_square(&sq);
    let max_abs = cost.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let eps = 1e-9 * (1.0 + max_abs);

    // Tight edges under the optimal duals; every optimal perfect matching of
    // the square problem lives inside this graph.
    let tight = |i: usize, j: usize| (sq[[i, j]] - u[i + 1] - v[j + 1]).abs() <= eps;

    // Fix rows in ascending order, preferring real columns in ascending
    // order and any dummy column (= unmatched) last; keep a choice only if
    // the remaining rows still admit a perfect matching over tight edges.
    let mut fixed_col = vec![usize::MAX; size];
    let mut col_taken = vec![false; size];
    for i in 0..size {
        // Candidates: for real rows, real columns ascending then dummies;
        // dummy rows take any remaining tight column.
        let mut cands: Vec<usize> = (0..size).filter(|&j| !col_taken[j] && tight(i, j)).collect();
        if i < n {
            cands.sort_by_key(|&j| (j >= m, j));
        }
        let mut chosen = usize::MAX;
        for &j in &cands {
            // Remaining rows i+1.. must match into remaining columns.
            let adj: Vec<Vec<usize>> = (i + 1..size)
                .map(|r| {
                    (0..size)
                        .filter(|&c| c != j && !col_taken[c] && tight(r, c))
                        .collect()
                })
                .collect();
            if perfect_matching_exists(&adj, size) {
                chosen = j;
                break;
            }
        }
        assert!(chosen != usize::MAX, "tight graph lost feasibility");
        fixed_col[i] = chosen;
        col_taken[chosen] = true;
    }

    let mut pairs: Vec<(usize, usize)> = (0..n)
        .filter(|&i| fixed_col[i] < m)
        .map(|i| (i, fixed_col[i]))
        .collect();
    pairs.sort_unstable();
    debug_assert_eq!(pairs.len(), n.min(m));
    MatchAssignment { pairs }
}

/// Reference oracle: exhaustive search over all injective assignments with
/// the same lexicographic tie-breaking. Exponential; for small inputs only.
pub fn brute_force_assignment(cost: &Array2<f64>) -> MatchAssignment {
    let (n, m) = cost.dim();
    let k = n.min(m);
    let mut best: Option<(f64, Vec<usize>)> = None;
    // Enumerate all ways to pick an ordered injective map from a k-subset of
    // rows... simpler: recurse over rows, each row picks a free column or
    // stays unmatched, pruned so exactly k pairs form.
    fn rec(
        i: usize,
        n: usize,
        m: usize,
        k: usize,
        used: &mut Vec<bool>,
        col_of: &mut Vec<usize>,
        matched: usize,
        total: f64,
        cost: &Array2<f64>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if i == n {
            if matched == k {
                let better = match best {
                    None => true,
                    Some((bt, bv)) => {
                        total < *bt - 1e-12
                            || ((total - *bt).abs() <= 1e-12 && col_of[..] < bv[..])
                    }
                };
                if better {
                    *best = Some((total, col_of.clone()));
                }
            }
            return;
        }
        // Remaining rows must be able to complete k pairs.
        let remaining = n - i;
        if matched + remaining >= k {
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    col_of.push(j);
                    rec(i + 1, n, m, k, used, col_of, matched + 1, total + cost[[i, j]], cost, best);
                    col_of.pop();
                    used[j] = false;
                }
            }
        }
        if matched + remaining > k {
            col_of.push(usize::MAX);
            rec(i + 1, n, m, k, used, col_of, matched, total, cost, best);
            col_of.pop();
        }
    }
    let mut used = vec![false; m];
    let mut col_of = Vec::new();
    rec(0, n, m, k, &mut used, &mut col_of, 0, 0.0, cost, &mut best);
    let (_, cols) = best.expect("nonempty cost matrix");
    let pairs = cols
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != usize::MAX)
        .map(|(r, &c)| (r, c))
        .collect();
    MatchAssignment { pairs }
}

pub fn assignment_total(cost: &Array2<f64>, a: &MatchAssignment) -> f64 {
    a.pairs.iter().map(|&(i, j)| cost[[i, j]]).sum()
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

const DICE_EPS: f64 = 1.0;

fn dice_cost_value(p: &[f64], t: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sums: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
    1.0 - (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
}

/// Rasterized GT supervision targets for one sample.
pub struct SegTargets {
    /// `(n_gt, H*W)`, values {0, 1}.
    pub masks: Array2<f64>,
    pub classes: Vec<usize>,
}

pub fn seg_targets(gt: &[MapInstance], cfg: &RunConfig) -> SegTargets {
    let hw = cfg.grid.height_px * cfg.grid.width_px;
    let mut masks = Array2::zeros((gt.len(), hw));
    let mut classes = Vec::with_capacity(gt.len());
    for (i, inst) in gt.iter().enumerate() {
        let row = gt_mask_row(inst, cfg);
        for (j, v) in row.iter().enumerate() {
            masks[[i, j]] = *v;
        }
        classes.push(inst.class_id.index());
    }
    SegTargets { masks, classes }
}

/// Matching cost between predicted (mask, class) and GT: negative GT-class
/// probability, all-pixel BCE on mask probabilities, and dice cost.
pub fn seg_cost(
    pred_masks: &Array2<f64>,
    pred_class_logits: &Array2<f64>,
    targets: &SegTargets,
    w: &LossWeights,
) -> Array2<f64> {
    let n = pred_masks.nrows();
    let n_gt = targets.masks.nrows();
    let hw = pred_masks.ncols();
    assert_eq!(targets.masks.ncols(), hw);
    let mut cost = Array2::zeros((n, n_gt));
    for i in 0..n {
        let logits: Vec<f64> = pred_class_logits.row(i).to_vec();
        let probs = softmax_slice(&logits);
        let p: Vec<f64> = pred_masks
            .row(i)
            .iter()
            .map(|v| v.clamp(1e-12, 1.0 - 1e-12))
            .collect();
        for j in 0..n_gt {
            let t: Vec<f64> = targets.masks.row(j).to_vec();
            let bce = p
                .iter()
                .zip(&t)
                .map(|(pv, tv)| -(tv * pv.ln() + (1.0 - tv) * (1.0 - pv).ln()))
                .sum::<f64>()
                / hw as f64;
            let dice = dice_cost_value(&p, &t);
            cost[[i, j]] =
                w.w_cls * (-probs[targets.classes[j]]) + w.w_bce * bce + w.w_dice * dice;
        }
    }
    cost
}

/// Mean coordinate-wise L1 between a predicted point block and the best
/// equivalent ordering of a GT instance; returns `(cost, ordering_index)`.
///
/// Exact cost ties break to the lexicographically smallest point sequence,
/// not the enumeration index: symmetric shapes (e.g. parallelograms) tie
/// exactly, and downstream terms computed against the chosen ordering must
/// not depend on which equivalent ordering happened to come first.
pub fn best_ordering_l1(
    pred: &[[f64; 2]],
    orderings: &[Vec<[f64; 2]>],
) -> (f64, usize) {
    let n_p = pred.len();
    let mut best = (f64::INFINITY, 0usize);
    for (oi, ord) in orderings.iter().enumerate() {
        assert_eq!(ord.len(), n_p, "ordering length mismatch");
        let mut s = 0.0;
        for (p, g) in pred.iter().zip(ord) {
            s += (p[0] - g[0]).abs() + (p[1] - g[1]).abs();
        }
        let mean = s / (2.0 * n_p as f64);
        if mean < best.0 || (mean == best.0 && seq_lt(ord, &orderings[best.1])) {
            best = (mean, oi);
        }
    }
    best
}

/// Strict lexicographic order on point sequences (coordinates compared in
/// reading order).
fn seq_lt(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    for (p, q) in a.iter().zip(b) {
        for k in 0..2 {
            if p[k] < q[k] {
                return true;
            }
            if p[k] > q[k] {
                return false;
            }
        }
    }
    false
}

/// Matching cost between predicted polylines and GT instances: negative
/// GT-class probability plus the ordering-minimized mean L1.
pub fn map_cost(
    pred_points: &Array2<f64>,
    n_p: usize,
    pred_class_logits: &Array2<f64>,
    gt: &[MapInstance],
    w: &LossWeights,
) -> Array2<f64> {
    let n = pred_class_logits.nrows();
    assert_eq!(pred_points.nrows(), n * n_p);
    let orderings: Vec<_> = gt.iter().map(equivalent_orderings).collect();
    let mut cost = Array2::zeros((n, gt.len()));
    for i in 0..n {
        let logits: Vec<f64> = pred_class_logits.row(i).to_vec();
        let probs = softmax_slice(&logits);
        let block: Vec<[f64; 2]> = (0..n_p)
            .map(|j| {
                [
                    pred_points[[i * n_p + j, 0]],
                    pred_points[[i * n_p + j, 1]],
                ]
            })
            .collect();
        for (j, inst) in gt.iter().enumerate() {
            let (l1, _) = best_ordering_l1(&block, &orderings[j]);
            cost[[i, j]] = w.w_cls * (-probs[inst.class_id.index()]) + w.w_pt * l1;
        }
    }
    cost
}

/// Accumulates named weighted sub-terms as tape nodes.
pub struct TermSums {
    map: BTreeMap<String, Var>,
}

impl TermSums {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    fn add(&mut self, tape: &mut Tape, name: &str, v: Var) {
        let entry = match self.map.get(name) {
            Some(prev) => tape.add(*prev, v),
            None => v,
        };
        self.map.insert(name.to_string(), entry);
    }

    pub fn values(&self, tape: &Tape) -> BTreeMap<String, f64> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), tape.value(*v)[[0, 0]]))
            .collect()
    }
}

impl Default for TermSums {
    fn default() -> Self {
        Self::new()
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Array2::zeros((1, 1)))
}

/// Focal classification loss over all rows: matched rows target their GT
/// class, the rest target "no object"; mean over rows.
fn focal_class_loss(
    tape: &mut Tape,
    class_logits: Var,
    target_class: &[usize],
    foreground: &[bool],
    w: &LossWeights,
) -> Var {
    let (n, c1) = tape.shape(class_logits);
    assert_eq!(target_class.len(), n);
    let mut one_hot = Array2::zeros((n, c1));
    let mut alpha = Array2::zeros((n, 1));
    for i in 0..n {
        one_hot[[i, target_class[i]]] = 1.0;
        alpha[[i, 0]] = if foreground[i] {
            w.focal_alpha
        } else {
            1.0 - w.focal_alpha
        };
    }
    let oh = tape.constant(one_hot);
    let al = tape.constant(alpha);
    let ls = tape.log_softmax_rows(class_logits);
    let picked = tape.mul(ls, oh);
    let log_pt = tape.row_sum(picked); // (n, 1)
    let neg = tape.mul_scalar(log_pt, -1.0); // -log p_t >= 0
    let modulated = if w.focal_gamma == 0.0 {
        neg
    } else {
        let pt = tape.exp(log_pt);
        let one_minus = tape.mul_scalar(pt, -1.0);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        let focal = tape.pow_const(one_minus, w.focal_gamma);
        tape.mul(focal, neg)
    };
    let weighted = tape.mul(modulated, al);
    tape.mean_all(weighted)
}

/// One layer of segmentation loss for a row subset. `mask_logits` and
/// `class_logits` must already be sliced to the subset.
fn loss_seg_layer(
    tape: &mut Tape,
    mask_logits: Var,
    class_logits: Var,
    targets: &SegTargets,
    assignment: &MatchAssignment,
    w: &LossWeights,
) -> Vec<(&'static str, Var)> {
    let n = tape.shape(class_logits).0;
    let no_object = NUM_CLASSES;
    let mut target_class = vec![no_object; n];
    let mut foreground = vec![false; n];
    for &(q, g) in &assignment.pairs {
        target_class[q] = targets.classes[g];
        foreground[q] = true;
    }
    let focal = focal_class_loss(tape, class_logits, &target_class, &foreground, w);
    let focal = tape.mul_scalar(focal, w.w_cls);
    let mut out = vec![("focal", focal)];

    if !assignment.pairs.is_empty() {
        let q_idx: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let g_idx: Vec<usize> = assignment.pairs.iter().map(|p| p.1).collect();
        let logits = tape.gather_rows(mask_logits, &q_idx);
        let t_arr = {
            let hw = targets.masks.ncols();
            let mut t = Array2::zeros((g_idx.len(), hw));
            for (r, &g) in g_idx.iter().enumerate() {
                for j in 0..hw {
                    t[[r, j]] = targets.masks[[g, j]];
                }
            }
            t
        };
        let t = tape.constant(t_arr);
        let bce_el = tape.bce_logits(logits, t);
        let bce = tape.mean_all(bce_el);
        let bce = tape.mul_scalar(bce, w.w_bce);
        out.push(("bce", bce));

        let p = tape.sigmoid(logits);
        let pt = tape.mul(p, t);
        let inter = tape.row_sum(pt); // (k,1)
        let ps = tape.row_sum(p);
        let ts = tape.row_sum(t);
        let sums = tape.add(ps, ts);
        let num = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num, DICE_EPS);
        let den = tape.add_scalar(sums, DICE_EPS);
        let frac = tape.div(num, den);
        let dice_rows = tape.mul_scalar(frac, -1.0);
        let dice_rows = tape.add_scalar(dice_rows, 1.0);
        let dice = tape.mean_all(dice_rows);
        let dice = tape.mul_scalar(dice, w.w_dice);
        out.push(("dice", dice));
    }
    out
}

/// One layer of map loss for a row subset; `points` is `(n * n_p, 2)`.
fn loss_map_layer(
    tape: &mut Tape,
    points: Var,
    class_logits: Var,
    n_p: usize,
    gt: &[MapInstance],
    assignment: &MatchAssignment,
    w: &LossWeights,
) -> Vec<(&'static str, Var)> {
    let n = tape.shape(class_logits).0;
    let no_object = NUM_CLASSES;
    let mut target_class = vec![no_object; n];
    let mut foreground = vec![false; n];
    for &(q, g) in &assignment.pairs {
        target_class[q] = gt[g].class_id.index();
        foreground[q] = true;
    }
    let focal = focal_class_loss(tape, class_logits, &target_class, &foreground, w);
    let focal = tape.mul_scalar(focal, w.w_cls);
    let mut out = vec![("focal", focal)];
    if assignment.pairs.is_empty() {
        return out;
    }

    let values = tape.value(points).clone();
    let orderings: Vec<_> = gt.iter().map(equivalent_orderings).collect();

    // Pick the best equivalent GT ordering per pair on detached values.
    let mut row_idx = Vec::new();
    let mut target_rows = Vec::new();
    let mut chosen: Vec<(usize, usize)> = Vec::new(); // (gt index, ordering index)
    for &(q, g) in &assignment.pairs {
        let block: Vec<[f64; 2]> = (0..n_p)
            .map(|j| [values[[q * n_p + j, 0]], values[[q * n_p + j, 1]]])
            .collect();
        let (_, oi) = best_ordering_l1(&block, &orderings[g]);
        for j in 0..n_p {
            row_idx.push(q * n_p + j);
            target_rows.push(orderings[g][oi][j]);
        }
        chosen.push((g, oi));
    }
    let pred = tape.gather_rows(points, &row_idx);
    let t_arr = Array2::from_shape_fn((target_rows.len(), 2), |(r, c)| target_rows[r][c]);
    let t = tape.constant(t_arr);
    let diff = tape.sub(pred, t);
    let ad = tape.abs(diff);
    let l1 = tape.mean_all(ad);
    let l1 = tape.mul_scalar(l1, w.w_pt);
    out.push(("l1", l1));

    // Direction: 1 - cosine similarity between adjacent-point edges, per
    // pair, against the chosen ordering; zero-length GT edges contribute 0.
    let mut pair_terms = Vec::new();
    for (pair, &(g, oi)) in assignment.pairs.iter().zip(&chosen) {
        let (q, _) = *pair;
        let block = tape.slice_rows(points, q * n_p, (q + 1) * n_p);
        let closed = gt[g].closed;
        let pred_edges = if closed {
            let rolled_idx: Vec<usize> = (1..n_p).chain(std::iter::once(0)).collect();
            let rolled = tape.gather_rows(block, &rolled_idx);
            tape.sub(rolled, block)
        } else {
            let hi = tape.slice_rows(block, 1, n_p);
            let lo = tape.slice_rows(block, 0, n_p - 1);
            tape.sub(hi, lo)
        };
        let ord = &orderings[g][oi];
        let n_e = if closed { n_p } else { n_p - 1 };
        let mut ge = Array2::zeros((n_e, 2));
        let mut gn = Array2::ones((n_e, 1));
        let mut valid = Array2::zeros((n_e, 1));
        let mut n_valid = 0usize;
        for e in 0..n_e {
            let a = ord[e];
            let b = ord[(e + 1) % n_p];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let norm = (dx * dx + dy * dy).sqrt();
            ge[[e, 0]] = dx;
            ge[[e, 1]] = dy;
            if norm > 0.0 {
                gn[[e, 0]] = norm;
                valid[[e, 0]] = 1.0;
                n_valid += 1;
            }
        }
        if n_valid == 0 {
            continue;
        }
        let gev = tape.constant(ge);
        let gnv = tape.constant(gn);
        let vv = tape.constant(valid);
        let prod = tape.mul(pred_edges, gev);
        let dot = tape.row_sum(prod);
        let sq = tape.mul(pred_edges, pred_edges);
        let pn2 = tape.row_sum(sq);
        let pn2 = tape.add_scalar(pn2, 1e-12);
        let pn = tape.sqrt(pn2);
        let den = tape.mul(pn, gnv);
        let cos = tape.div(dot, den);
        let neg = tape.mul_scalar(cos, -1.0);
        let omc = tape.add_scalar(neg, 1.0);
        let masked = tape.mul(omc, vv);
        let s = tape.sum_all(masked);
        pair_terms.push(tape.mul_scalar(s, 1.0 / n_valid as f64));
    }
    if !pair_terms.is_empty() {
        let cat = tape.concat_rows(&pair_terms);
        let dir = tape.sum_all(cat);
        let dir = tape.mul_scalar(dir, w.w_dir / assignment.pairs.len() as f64);
        out.push(("dir", dir));
    }
    out
}

/// Identity assignment for denoise rows: row `g * n_gt + i` -> GT `i`.
pub fn identity_assignment(groups: usize, n_gt: usize) -> MatchAssignment {
    let pairs = (0..groups * n_gt).map(|r| (r, r % n_gt)).collect();
    MatchAssignment { pairs }
}

/// Everything the trainer needs from one sample's loss computation.
pub struct SampleLoss {
    pub total: Var,
    pub l_seg: Var,
    pub l_map: Var,
    pub l_dn: Var,
    pub terms: TermSums,
    /// Segmentation-cost match at the last first-stage state (learnable rows).
    pub imp_last_match: Option<MatchAssignment>,
    /// Map-cost match at the first decoder layer (learnable rows).
    pub mmp_first_match: Option<MatchAssignment>,
}

/// Composes the full training loss for one sample: deep supervision with
/// per-layer Hungarian matching on the learnable rows of both stages, plus
/// identity-assigned denoising loss on the denoise rows.
pub fn total_loss(
    tape: &mut Tape,
    cfg: &RunConfig,
    imp: Option<&ImpOutput>,
    mmp: Option<&MmpOutput>,
    gt: &[MapInstance],
    dn: Option<&DenoiseBatch>,
) -> SampleLoss {
    let w = &cfg.weights;
    let targets = seg_targets(gt, cfg);
    let n_i = cfg.n_i;
    let mut terms = TermSums::new();
    let mut imp_last_match = None;
    let mut mmp_first_match = None;

    // --- L_seg over first-stage states (learnable rows). ---
    let mut l_seg = zero(tape);
    if let Some(imp) = imp {
        for st in &imp.states {
            let ml = tape.slice_rows(st.mask_logits, 0, n_i);
            let cl = tape.slice_rows(st.class_logits, 0, n_i);
            let masks = tape.value(st.masks).clone();
            let learn_masks = masks.slice_move(ndarray::s![0..n_i, ..]);
            let logits_v = tape.value(cl).clone();
            let cost = seg_cost(&learn_masks.to_owned(), &logits_v, &targets, w);
            let assignment = if gt.is_empty() {
                MatchAssignment { pairs: Vec::new() }
            } else {
                hungarian(&cost)
            };
            for (name, v) in loss_seg_layer(tape, ml, cl, &targets, &assignment, w) {
                terms.add(tape, &format!("seg.{name}"), v);
                l_seg = tape.add(l_seg, v);
            }
            if st.layer_index == cfg.m {
                imp_last_match = Some(assignment);
            }
        }
    }

    // --- L_map over decoder layers (learnable rows). ---
    let mut l_map = zero(tape);
    if let Some(mmp) = mmp {
        for (li, layer) in mmp.layers.iter().enumerate() {
            let pts = tape.slice_rows(layer.points, 0, n_i * cfg.n_p);
            let cl = tape.slice_rows(layer.class_logits, 0, n_i);
            let pts_v = tape.value(pts).clone();
            let cl_v = tape.value(cl).clone();
            let assignment = if gt.is_empty() {
                MatchAssignment { pairs: Vec::new() }
            } else {
                hungarian(&map_cost(&pts_v, cfg.n_p, &cl_v, gt, w))
            };
            for (name, v) in loss_map_layer(tape, pts, cl, cfg.n_p, gt, &assignment, w) {
                terms.add(tape, &format!("map.{name}"), v);
                l_map = tape.add(l_map, v);
            }
            if li == 0 {
                mmp_first_match = Some(assignment);
            }
        }
    }

    // --- L_dn: identity-assigned loss on denoise rows, both stages. ---
    let mut l_dn = zero(tape);
    if let (Some(dnb), true) = (dn, cfg.toggles.use_denoising) {
        if dnb.n_gt > 0 {
            let ident = identity_assignment(dnb.groups, dnb.n_gt);
            let dn_targets = SegTargets {
                masks: dnb.target_masks.clone(),
                classes: dnb.targets.iter().map(|t| t.class_id.index()).collect(),
            };
            if let Some(imp) = imp {
                let n_q = n_i + dnb.n_rows();
                for st in &imp.states {
                    let ml = tape.slice_rows(st.mask_logits, n_i, n_q);
                    let cl = tape.slice_rows(st.class_logits, n_i, n_q);
                    for (name, v) in loss_seg_layer(tape, ml, cl, &dn_targets, &ident, w) {
                        terms.add(tape, &format!("dn.seg.{name}"), v);
                        l_dn = tape.add(l_dn, v);
                    }
                }
            }
            if let Some(mmp) = mmp {
                let n_q = n_i + dnb.n_rows();
                for layer in &mmp.layers {
                    let pts = tape.slice_rows(layer.points, n_i * cfg.n_p, n_q * cfg.n_p);
                    let cl = tape.slice_rows(layer.class_logits, n_i, n_q);
                    for (name, v) in
                        loss_map_layer(tape, pts, cl, cfg.n_p, &dnb.targets, &ident, w)
                    {
                        terms.add(tape, &format!("dn.map.{name}"), v);
                        l_dn = tape.add(l_dn, v);
                    }
                }
            }
        }
    }

    let sm = tape.add(l_seg, l_map);
    let total = tape.add(sm, l_dn);
    SampleLoss {
        total,
        l_seg,
        l_map,
        l_dn,
        terms,
        imp_last_match,
        mmp_first_match,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassId;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn best_ordering_tie_breaks_on_sequence_not_enumeration_order() {
        // A constant prediction block ties every permutation of the same
        // vertex set exactly, so the pick must be the same sequence no
        // matter which rotation the enumeration started from.
        let inst = MapInstance::new(
            ClassId::PedestrianCrossing,
            vec![[0.2, 0.2], [0.5, 0.2], [0.6, 0.4], [0.3, 0.4]],
        );
        let o1 = equivalent_orderings(&inst);
        let rotated = MapInstance::new(ClassId::PedestrianCrossing, o1[5].clone());
        let o2 = equivalent_orderings(&rotated);
        let pred = [[0.4, 0.3]; 4];
        let (v1, i1) = best_ordering_l1(&pred, &o1);
        let (v2, i2) = best_ordering_l1(&pred, &o2);
        assert_eq!(v1, v2);
        assert_eq!(o1[i1], o2[i2], "tied pick must be the same sequence");
    }

    #[test]
    fn hungarian_hand_cases() {
        let a = hungarian(&array![[1.0, 2.0], [2.0, 1.0]]);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let b = hungarian(&array![[5.0, 1.0, 7.0]]);
        assert_eq!(b.pairs, vec![(0, 1)]);
        // Rectangular tall: 3 queries, 1 gt.
        let c = hungarian(&array![[3.0], [1.0], [2.0]]);
        assert_eq!(c.pairs, vec![(1, 0)]);
    }

    #[test]
    fn hungarian_ties_break_lexicographically() {
        // All-equal costs: the lexicographically smallest assignment is the
        // identity on the first min(n, m) queries.
        let a = hungarian(&Array2::zeros((4, 2)));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        // Symmetric tie: both diagonals cost 2.
        let b = hungarian(&array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..100 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            // Coarse values make ties common, exercising the tie-break.
            let cost = Array2::from_shape_fn((n, m), |_| {
                (rng.gen_range(0..5) as f64) * 0.5
            });
            let fast = hungarian(&cost);
            let slow = brute_force_assignment(&cost);
            let tf = assignment_total(&cost, &fast);
            let ts = assignment_total(&cost, &slow);
            assert!(
                (tf - ts).abs() < 1e-9,
                "case {case}: totals differ {tf} vs {ts}\n{cost:?}"
            );
            assert_eq!(fast.pairs, slow.pairs, "case {case}: tie-break mismatch\n{cost:?}");
        }
    }

    fn open_instance(class: ClassId, pts: &[[f64; 2]]) -> MapInstance {
        MapInstance::new(class, pts.to_vec())
    }

    fn micro_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid.height_px = 8;
        cfg.grid.width_px = 4;
        cfg.s = 2;
        cfg.d = 8;
        cfg.heads = 2;
        cfg.m = 1;
        cfg.k = 1;
        cfg.n_i = 3;
        cfg.n_p = 4;
        cfg.n_s = 3;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn seg_cost_perfect_match_hits_analytic_minimum() {
        let cfg = micro_cfg();
        let gt = vec![open_instance(
            ClassId::Divider,
            &[[0.2, 0.1], [0.2, 0.5], [0.2, 0.9], [0.25, 0.95]],
        )];
        let targets = seg_targets(&gt, &cfg);
        let w = cfg.weights;
        // Pred mask = hard GT mask; correct class with near-saturated logits.
        let pred_mask = targets.masks.clone().mapv(|t| t.clamp(1e-9, 1.0 - 1e-9));
        let mut logits = Array2::from_elem((1, NUM_CLASSES + 1), -20.0);
        logits[[0, ClassId::Divider.index()]] = 20.0;
        let cost = seg_cost(&pred_mask, &logits, &targets, &w);
        let want = -w.w_cls; // bce ~ 0, dice = 0 for identical binary masks
        assert!(
            (cost[[0, 0]] - want).abs() < 1e-3,
            "{} vs {want}",
            cost[[0, 0]]
        );
    }

    #[test]
    fn seg_cost_uniform_masks_cannot_distinguish_queries() {
        let cfg = micro_cfg();
        let gt = vec![
            open_instance(ClassId::Divider, &[[0.2, 0.1], [0.2, 0.4], [0.2, 0.7], [0.2, 0.9]]),
            open_instance(
                ClassId::Boundary,
                &[[0.7, 0.1], [0.7, 0.4], [0.7, 0.7], [0.7, 0.9]],
            ),
        ];
        let targets = seg_targets(&gt, &cfg);
        let hw = cfg.grid.height_px * cfg.grid.width_px;
        let pred = Array2::from_elem((3, hw), 0.5);
        let logits = Array2::zeros((3, NUM_CLASSES + 1));
        let cost = seg_cost(&pred, &logits, &targets, &cfg.weights);
        for j in 0..2 {
            for i in 1..3 {
                assert!(
                    (cost[[i, j]] - cost[[0, j]]).abs() < 1e-12,
                    "identical masks must give identical columns"
                );
            }
        }
    }

    #[test]
    fn seg_cost_matches_independent_reimplementation() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = vec![
            open_instance(ClassId::Divider, &[[0.2, 0.1], [0.3, 0.4], [0.2, 0.7], [0.2, 0.9]]),
            open_instance(
                ClassId::PedestrianCrossing,
                &[[0.6, 0.2], [0.7, 0.4], [0.6, 0.7], [0.7, 0.9]],
            ),
        ];
        let targets = seg_targets(&gt, &cfg);
        let hw = cfg.grid.height_px * cfg.grid.width_px;
        let pred = Array2::from_shape_fn((3, hw), |_| rng.gen_range(0.05..0.95));
        let logits = Array2::from_shape_fn((3, NUM_CLASSES + 1), |_| rng.gen_range(-2.0..2.0));
        let w = cfg.weights;
        let cost = seg_cost(&pred, &logits, &targets, &w);
        for i in 0..3 {
            let probs = softmax_slice(&logits.row(i).to_vec());
            for j in 0..2 {
                let mut bce = 0.0;
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut tsum = 0.0;
                for p in 0..hw {
                    let pv: f64 = pred[[i, p]];
                    let tv: f64 = targets.masks[[j, p]];
                    bce += -(tv * pv.ln() + (1.0 - tv) * (1.0 - pv).ln());
                    inter += pv * tv;
                    psum += pv;
                    tsum += tv;
                }
                bce /= hw as f64;
                let dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
                let want =
                    w.w_cls * (-probs[targets.classes[j]]) + w.w_bce * bce + w.w_dice * dice;
                assert!((cost[[i, j]] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn map_cost_is_ordering_invariant_and_zero_for_exact_points() {
        let cfg = micro_cfg();
        let w = cfg.weights;
        let gt = vec![open_instance(
            ClassId::Divider,
            &[[0.2, 0.1], [0.25, 0.4], [0.2, 0.7], [0.2, 0.9]],
        )];
        // Prediction = GT exactly.
        let mut pts = Array2::zeros((cfg.n_i * cfg.n_p, 2));
        for (j, p) in gt[0].points.iter().enumerate() {
            pts[[j, 0]] = p[0];
            pts[[j, 1]] = p[1];
        }
        let logits = Array2::zeros((cfg.n_i, NUM_CLASSES + 1));
        let cost = map_cost(&pts, cfg.n_p, &logits, &gt, &w);
        let class_part = w.w_cls * (-softmax_slice(&vec![0.0; NUM_CLASSES + 1])[1]);
        assert!((cost[[0, 0]] - class_part).abs() < 1e-12, "point term must be 0");

        // Prediction = GT reversed: still zero point term.
        let mut rev = pts.clone();
        for j in 0..cfg.n_p {
            for c in 0..2 {
                rev[[j, c]] = pts[[cfg.n_p - 1 - j, c]];
            }
        }
        let cost_rev = map_cost(&rev, cfg.n_p, &logits, &gt, &w);
        assert!((cost_rev[[0, 0]] - class_part).abs() < 1e-12);

        // Random predictions: replacing GT by any equivalent ordering leaves
        // the cost unchanged within 1e-9.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_pts = Array2::from_shape_fn((cfg.n_i * cfg.n_p, 2), |_| rng.gen());
        let base = map_cost(&rand_pts, cfg.n_p, &logits, &gt, &w);
        for ord in equivalent_orderings(&gt[0]) {
            let alt = vec![MapInstance::new(gt[0].class_id, ord)];
            let c = map_cost(&rand_pts, cfg.n_p, &logits, &alt, &w);
            for i in 0..cfg.n_i {
                assert!((c[[i, 0]] - base[[i, 0]]).abs() <= 1e-9);
            }
        }
    }

    /// Helper: run total_loss on crafted tape inputs.
    struct Crafted {
        tape: Tape,
        loss: SampleLoss,
    }

    fn run_crafted(
        cfg: &RunConfig,
        gt: &[MapInstance],
        mask_logit_fn: impl Fn(usize, usize) -> f64,
        class_logit_fn: impl Fn(usize, usize) -> f64,
        points_fn: impl Fn(usize, usize) -> f64,
    ) -> Crafted {
        let hw = cfg.grid.height_px * cfg.grid.width_px;
        let mut tape = Tape::new();
        let ml = tape.leaf(Array2::from_shape_fn((cfg.n_i, hw), |(i, j)| {
            mask_logit_fn(i, j)
        }));
        let masks = tape.sigmoid(ml);
        let cl = tape.leaf(Array2::from_shape_fn(
            (cfg.n_i, NUM_CLASSES + 1),
            |(i, j)| class_logit_fn(i, j),
        ));
        let q = tape.constant(Array2::zeros((cfg.n_i, cfg.d)));
        let imp = ImpOutput {
            states: vec![crate::impnet::QueryState {
                queries: q,
                masks,
                mask_logits: ml,
                class_logits: cl,
                layer_index: cfg.m,
            }],
            n_learnable: cfg.n_i,
            n_denoise: 0,
        };
        let pts = tape.leaf(Array2::from_shape_fn((cfg.n_i * cfg.n_p, 2), |(r, c)| {
            points_fn(r, c)
        }));
        let mcl = tape.leaf(Array2::from_shape_fn(
            (cfg.n_i, NUM_CLASSES + 1),
            |(i, j)| class_logit_fn(i, j),
        ));
        let mmp = MmpOutput {
            layers: vec![crate::mmpnet::MapLayer {
                class_logits: mcl,
                points: pts,
            }],
            keypoints: None,
            n_instances: cfg.n_i,
        };
        let loss = total_loss(&mut tape, cfg, Some(&imp), Some(&mmp), gt, None);
        Crafted { tape, loss }
    }

    #[test]
    fn saturated_perfect_predictions_vanish() {
        let mut cfg = micro_cfg();
        cfg.n_i = 2;
        let gt = vec![
            open_instance(ClassId::Divider, &[[0.2, 0.1], [0.2, 0.4], [0.2, 0.7], [0.2, 0.9]]),
            open_instance(
                ClassId::Boundary,
                &[[0.7, 0.1], [0.7, 0.4], [0.7, 0.7], [0.7, 0.9]],
            ),
        ];
        let targets = seg_targets(&gt, &cfg);
        // Query i predicts GT i: saturated mask logits, saturated class
        // logits, exact points.
        let crafted = run_crafted(
            &cfg,
            &gt,
            |i, j| if targets.masks[[i, j]] > 0.5 { 40.0 } else { -40.0 },
            |i, j| {
                if j == gt[i].class_id.index() {
                    40.0
                } else {
                    -40.0
                }
            },
            |r, c| gt[r / cfg.n_p].points[r % cfg.n_p][c],
        );
        let total = crafted.tape.value(crafted.loss.total)[[0, 0]];
        assert!(total >= 0.0);
        assert!(total < 1e-3, "saturated optimum should vanish, got {total}");
    }

    #[test]
    fn translation_hand_case_l1_and_direction() {
        let mut cfg = micro_cfg();
        cfg.n_i = 1;
        let gt = vec![open_instance(
            ClassId::Divider,
            &[[0.2, 0.1], [0.2, 0.4], [0.2, 0.7], [0.2, 0.9]],
        )];
        let crafted = run_crafted(
            &cfg,
            &gt,
            |_, _| 0.0,
            |_, _| 0.0,
            |r, c| gt[0].points[r % cfg.n_p][c] + if c == 0 { 0.1 } else { 0.0 },
        );
        let terms = crafted.loss.terms.values(&crafted.tape);
        let l1 = terms["map.l1"] / cfg.weights.w_pt;
        assert!(
            (l1 - 0.05).abs() < 1e-9,
            "x shifted by 0.1, y untouched -> mean L1 0.05, got {l1}"
        );
        let dir = terms.get("map.dir").map_or(0.0, |v| *v);
        assert!(dir.abs() < 1e-12, "translation keeps directions, got {dir}");
    }

    #[test]
    fn loss_map_invariant_under_equivalent_gt_orderings() {
        let mut cfg = micro_cfg();
        cfg.n_i = 2;
        let gt_base = vec![MapInstance::new(
            ClassId::PedestrianCrossing,
            vec![[0.3, 0.3], [0.6, 0.3], [0.6, 0.6], [0.3, 0.6]],
        )];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<f64> = (0..cfg.n_i * cfg.n_p * 2).map(|_| rng.gen()).collect();
        let logits: Vec<f64> = (0..cfg.n_i * (NUM_CLASSES + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let run = |gt: &[MapInstance]| {
            let crafted = run_crafted(
                &cfg,
                gt,
                |_, _| 0.3,
                |i, j| logits[i * (NUM_CLASSES + 1) + j],
                |r, c| pts[r * 2 + c],
            );
            crafted.tape.value(crafted.loss.l_map)[[0, 0]]
        };
        let base = run(&gt_base);
        for ord in equivalent_orderings(&gt_base[0]) {
            let alt = vec![MapInstance::new(gt_base[0].class_id, ord)];
            let v = run(&alt);
            assert!((v - base).abs() <= 1e-9, "{v} vs {base}");
        }
    }

    #[test]
    fn denoise_loss_equals_manual_recomposition_and_total_adds_up() {
        let cfg = {
            let mut c = micro_cfg();
            c.n_i = 2;
            c.dn_groups = 2;
            c
        };
        let gt = vec![
            open_instance(ClassId::Divider, &[[0.2, 0.1], [0.2, 0.4], [0.2, 0.7], [0.2, 0.9]]),
            open_instance(
                ClassId::Boundary,
                &[[0.7, 0.1], [0.7, 0.4], [0.7, 0.7], [0.7, 0.9]],
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dnb = crate::impnet::build_denoise_batch(&gt, &cfg, &mut rng);
        let n_q = cfg.n_i + dnb.n_rows();
        let hw = cfg.grid.height_px * cfg.grid.width_px;

        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let ml_arr = Array2::from_shape_fn((n_q, hw), |_| rng2.gen_range(-1.0..1.0));
        let cl_arr = Array2::from_shape_fn((n_q, NUM_CLASSES + 1), |_| rng2.gen_range(-1.0..1.0));
        let pts_arr = Array2::from_shape_fn((n_q * cfg.n_p, 2), |_| rng2.gen());

        let mut tape = Tape::new();
        let ml = tape.constant(ml_arr.clone());
        let masks = tape.sigmoid(ml);
        let cl = tape.constant(cl_arr.clone());
        let q = tape.constant(Array2::zeros((n_q, cfg.d)));
        let imp = ImpOutput {
            states: vec![crate::impnet::QueryState {
                queries: q,
                masks,
                mask_logits: ml,
                class_logits: cl,
                layer_index: cfg.m,
            }],
            n_learnable: cfg.n_i,
            n_denoise: dnb.n_rows(),
        };
        let pts = tape.constant(pts_arr.clone());
        let mcl = tape.constant(cl_arr.clone());
        let mmp = MmpOutput {
            layers: vec![crate::mmpnet::MapLayer {
                class_logits: mcl,
                points: pts,
            }],
            keypoints: None,
            n_instances: n_q,
        };
        let loss = total_loss(&mut tape, &cfg, Some(&imp), Some(&mmp), &gt, Some(&dnb));
        let l_dn = tape.value(loss.l_dn)[[0, 0]];
        let l_seg = tape.value(loss.l_seg)[[0, 0]];
        let l_map = tape.value(loss.l_map)[[0, 0]];
        let total = tape.value(loss.total)[[0, 0]];
        assert!((total - (l_seg + l_map + l_dn)).abs() < 1e-6);

        // Manual recomposition: run the per-layer losses directly on the
        // denoise slices with the identity assignment.
        let mut t2 = Tape::new();
        let ident = identity_assignment(dnb.groups, dnb.n_gt);
        let dn_targets = SegTargets {
            masks: dnb.target_masks.clone(),
            classes: dnb.targets.iter().map(|t| t.class_id.index()).collect(),
        };
        let ml2 = t2.constant(ml_arr.slice(ndarray::s![cfg.n_i.., ..]).to_owned());
        let cl2 = t2.constant(cl_arr.slice(ndarray::s![cfg.n_i.., ..]).to_owned());
        let mut want = 0.0;
        for (_, v) in loss_seg_layer(&mut t2, ml2, cl2, &dn_targets, &ident, &cfg.weights) {
            want += t2.value(v)[[0, 0]];
        }
        let pts2 = t2.constant(pts_arr.slice(ndarray::s![cfg.n_i * cfg.n_p.., ..]).to_owned());
        let cl3 = t2.constant(cl_arr.slice(ndarray::s![cfg.n_i.., ..]).to_owned());
        for (_, v) in loss_map_layer(
            &mut t2,
            pts2,
            cl3,
            cfg.n_p,
            &dnb.targets,
            &ident,
            &cfg.weights,
        ) {
            want += t2.value(v)[[0, 0]];
        }
        assert!((l_dn - want).abs() < 1e-6, "{l_dn} vs {want}");

        // Sub-term bookkeeping: every term sums into its stage total.
        let terms = loss.terms.values(&tape);
        let seg_sum: f64 = terms
            .iter()
            .filter(|(k, _)| k.starts_with("seg."))
            .map(|(_, v)| v)
            .sum();
        assert!((seg_sum - l_seg).abs() < 1e-6);
        let dn_sum: f64 = terms
            .iter()
            .filter(|(k, _)| k.starts_with("dn."))
            .map(|(_, v)| v)
            .sum();
        assert!((dn_sum - l_dn).abs() < 1e-6);
    }

    #[test]
    fn denoise_with_no_gt_contributes_nothing() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dnb = crate::impnet::build_denoise_batch(&[], &cfg, &mut rng);
        assert_eq!(dnb.n_rows(), 0);
        let crafted = run_crafted(&cfg, &[], |_, _| 0.1, |_, _| 0.2, |_, _| 0.5);
        assert_eq!(crafted.tape.value(crafted.loss.l_dn)[[0, 0]], 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut cfg = micro_cfg();
        cfg.n_i = 2;
        let gt = vec![open_instance(
            ClassId::Divider,
            &[[0.2, 0.1], [0.25, 0.4], [0.2, 0.7], [0.2, 0.9]],
        )];
        let hw = cfg.grid.height_px * cfg.grid.width_px;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ml0 = Array2::from_shape_fn((cfg.n_i, hw), |_| rng.gen_range(-1.0..1.0));
        let cl0 = Array2::from_shape_fn((cfg.n_i, NUM_CLASSES + 1), |_| rng.gen_range(-1.0..1.0));
        let pt_raw = Array2::from_shape_fn((cfg.n_i * cfg.n_p, 2), |_| rng.gen_range(-1.0..1.0f64));
        // Decoder class logits stay fixed across probes so the probed leaves
        // are the only source of loss change.
        let mcl0 = Array2::from_shape_fn((cfg.n_i, NUM_CLASSES + 1), |_| rng.gen_range(-1.0..1.0));

        let eval = |ml_a: &Array2<f64>, cl_a: &Array2<f64>, pt_a: &Array2<f64>, want_grads: bool| {
            let mut tape = Tape::new();
            let ml = tape.leaf(ml_a.clone());
            let masks = tape.sigmoid(ml);
            let cl = tape.leaf(cl_a.clone());
            let q = tape.constant(Array2::zeros((cfg.n_i, cfg.d)));
            let imp = ImpOutput {
                states: vec![crate::impnet::QueryState {
                    queries: q,
                    masks,
                    mask_logits: ml,
                    class_logits: cl,
                    layer_index: cfg.m,
                }],
                n_learnable: cfg.n_i,
                n_denoise: 0,
            };
            let ptl = tape.leaf(pt_a.clone());
            let pts = tape.sigmoid(ptl);
            let mcl = tape.constant(mcl0.clone());
            let mmp = MmpOutput {
                layers: vec![crate::mmpnet::MapLayer {
                    class_logits: mcl,
                    points: pts,
                }],
                keypoints: None,
                n_instances: cfg.n_i,
            };
            let loss = total_loss(&mut tape, &cfg, Some(&imp), Some(&mmp), &gt, None);
            let lv = tape.value(loss.total)[[0, 0]];
            if !want_grads {
                return (lv, None);
            }
            let mut grads = tape.backward(loss.total);
            (
                lv,
                Some((
                    grads.take(ml).unwrap(),
                    grads.take(cl).unwrap(),
                    grads.take(ptl).unwrap(),
                )),
            )
        };

        let (_, g) = eval(&ml0, &cl0, &pt_raw, true);
        let (gml, gcl, gpt) = g.unwrap();
        let h = 1e-6;
        // Probe a few coordinates of each input. The matching is recomputed
        // per evaluation but stays stable for small h away from ties.
        for (r, c) in [(0, 3), (1, hw - 1)] {
            let mut p = ml0.clone();
            p[[r, c]] += h;
            let mut m = ml0.clone();
            m[[r, c]] -= h;
            let fd = (eval(&p, &cl0, &pt_raw, false).0 - eval(&m, &cl0, &pt_raw, false).0)
                / (2.0 * h);
            let a = gml[[r, c]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) <= 1e-3);
        }
        for (r, c) in [(0, 0), (1, NUM_CLASSES)] {
            let mut p = cl0.clone();
            p[[r, c]] += h;
            let mut m = cl0.clone();
            m[[r, c]] -= h;
            let fd = (eval(&ml0, &p, &pt_raw, false).0 - eval(&ml0, &m, &pt_raw, false).0)
                / (2.0 * h);
            let a = gcl[[r, c]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) <= 1e-3);
        }
        for (r, c) in [(0, 0), (cfg.n_p, 1)] {
            let mut p = pt_raw.clone();
            p[[r, c]] += h;
            let mut m = pt_raw.clone();
            m[[r, c]] -= h;
            let fd = (eval(&ml0, &cl0, &p, false).0 - eval(&ml0, &cl0, &m, false).0) / (2.0 * h);
            let a = gpt[[r, c]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4) <= 1e-3);
        }
    }

    #[test]
    fn flip_rate_over_ten_thousand_draws() {
        let cfg = {
            let mut c = micro_cfg();
            c.lambda = 0.2;
            c
        };
        let gt: Vec<MapInstance> = (0..10)
            .map(|i| {
                open_instance(
                    ClassId::ALL[i % 3],
                    &[[0.2, 0.1], [0.2, 0.4], [0.2, 0.7], [0.2, 0.9]],
                )
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut flips = 0usize;
        for _ in 0..1000 {
            let d = crate::impnet::build_denoise_batch(&gt, &cfg, &mut rng);
            flips += d
                .true_classes
                .iter()
                .zip(&d.noisy_classes)
                .filter(|(t, n)| t.index() != **n)
                .count();
        }
        let rate = flips as f64 / 10_000.0;
        assert!((0.18..=0.22).contains(&rate), "flip rate {rate}");
    }
}
