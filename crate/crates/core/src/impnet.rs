//! First stage: mask-aware query generation.
//!
//! `M` refinement layers attend over multi-scale BEV features. Each layer
//! restricts its cross-attention to pixels where the previous layer's
//! predicted segmentation mask is confident (additive 0 / -inf bias), then
//! runs query self-attention (with learnable/denoise group isolation) and a
//! feed-forward block, and re-predicts masks and class logits at the finest
//! scale. During training, extra "denoise" query rows are appended: class
//! embeddings of (possibly flipped) GT classes whose attention bias is pinned
//! to rasterized perturbed GT masks at every layer.

use ndarray::Array2;
use rand::Rng;

use crate::bevenc::{scale_positional_embedding, BevFeatures};
use crate::config::RunConfig;
use crate::geometry::{
    perturb_instance, rasterize_instance, ClassId, MapInstance, NoiseConfig, NUM_CLASSES,
};
use crate::graph::{Tape, Var};
use crate::nn::{self, Binder, ParamInit};

/// Per-layer query bundle. Masks are sigmoid probabilities in `[0, 1]`;
/// `mask_logits` are the pre-sigmoid values used by the mask losses. At
/// state 0 the mask rows of denoise queries are their pinned perturbed GT
/// masks (constants), while `mask_logits` always holds predictions.
pub struct QueryState {
    pub queries: Var,
    pub masks: Var,
    pub mask_logits: Var,
    pub class_logits: Var,
    pub layer_index: usize,
}

/// First-stage output: states `0..=M` plus the fixed group layout.
pub struct ImpOutput {
    pub states: Vec<QueryState>,
    pub n_learnable: usize,
    pub n_denoise: usize,
}

/// Denoising-query construction for one sample: `groups` perturbed copies of
/// the GT instances, with classes flipped to a uniformly chosen *other*
/// class with probability `lambda`.
pub struct DenoiseBatch {
    pub n_gt: usize,
    pub groups: usize,
    /// Original class per row (supervision target), length `groups * n_gt`.
    pub true_classes: Vec<ClassId>,
    /// Embedding index actually fed to the model (flipped with prob lambda).
    pub noisy_classes: Vec<usize>,
    /// Rasterized perturbed GT masks, `(groups * n_gt, H*W)`, values {0, 1}.
    pub pinned_masks: Array2<f64>,
    /// Clean GT supervision masks, `(n_gt, H*W)` (shared across groups).
    pub target_masks: Array2<f64>,
    /// Clean GT instances (index `i` supervises row `g * n_gt + i`).
    pub targets: Vec<MapInstance>,
}

impl DenoiseBatch {
    pub fn n_rows(&self) -> usize {
        self.groups * self.n_gt
    }
}

/// Rasterizes an instance into a flattened `(1, H*W)`-compatible row using
/// the configured supervision stroke width.
pub fn gt_mask_row(inst: &MapInstance, cfg: &RunConfig) -> Vec<f64> {
    let m = rasterize_instance(inst, &cfg.grid, cfg.gt_mask_width_px);
    m.into_raw_vec_and_offset().0
}

/// Builds the denoising rows for one sample. Draw order per row: class-flip
/// decision, then (if flipping) the replacement class, then the geometric
/// perturbation; so a fixed rng seed fixes the whole batch.
pub fn build_denoise_batch<R: Rng>(
    gt: &[MapInstance],
    cfg: &RunConfig,
    rng: &mut R,
) -> DenoiseBatch {
    let n_gt = gt.len();
    let groups = cfg.dn_groups;
    let hw = cfg.grid.height_px * cfg.grid.width_px;
    let noise = if cfg.toggles.use_map_noise {
        cfg.noise.clone()
    } else {
        NoiseConfig::disabled()
    };
    let mut true_classes = Vec::with_capacity(groups * n_gt);
    let mut noisy_classes = Vec::with_capacity(groups * n_gt);
    let mut pinned = Array2::zeros((groups * n_gt, hw));
    let mut targets_mask = Array2::zeros((n_gt, hw));
    for (i, inst) in gt.iter().enumerate() {
        let row = gt_mask_row(inst, cfg);
        for (j, v) in row.iter().enumerate() {
            targets_mask[[i, j]] = *v;
        }
    }
    for g in 0..groups {
        for inst in gt.iter() {
            let true_cls = inst.class_id;
            let flip = rng.gen::<f64>() < cfg.lambda;
            let noisy = if flip {
                // Uniform over the other classes.
                let shift = 1 + rng.gen_range(0..NUM_CLASSES - 1);
                (true_cls.index() + shift) % NUM_CLASSES
            } else {
                true_cls.index()
            };
            let perturbed = perturb_instance(inst, &noise, rng);
            let mask = gt_mask_row(&perturbed, cfg);
            let row_idx = true_classes.len();
            for (j, v) in mask.iter().enumerate() {
                pinned[[row_idx, j]] = *v;
            }
            true_classes.push(true_cls);
            noisy_classes.push(noisy);
            let _ = g;
        }
    }
    DenoiseBatch {
        n_gt,
        groups,
        true_classes,
        noisy_classes,
        pinned_masks: pinned,
        target_masks: targets_mask,
        targets: gt.to_vec(),
    }
}

pub fn init_params(init: &mut ParamInit, cfg: &RunConfig) {
    init.normal("imp.query_embed", cfg.n_i, cfg.d, 1.0);
    init.normal("dn.class_embed", NUM_CLASSES, cfg.d, 1.0);
    nn::init_linear(init, "imp.mask.1", cfg.d, cfg.d);
    nn::init_linear(init, "imp.mask.2", cfg.d, cfg.d);
    nn::init_linear(init, "imp.class_head", cfg.d, NUM_CLASSES + 1);
    for m in 1..=cfg.m {
        nn::init_attention(init, &format!("imp.l{m}.cross"), cfg.d);
        nn::init_layer_norm(init, &format!("imp.l{m}.ln1"), cfg.d);
        nn::init_attention(init, &format!("imp.l{m}.self"), cfg.d);
        nn::init_layer_norm(init, &format!("imp.l{m}.ln2"), cfg.d);
        nn::init_ffn(init, &format!("imp.l{m}.ffn"), cfg.d, 4);
        nn::init_layer_norm(init, &format!("imp.l{m}.ln3"), cfg.d);
    }
}

/// Mask logits for each query against the finest-scale features:
/// `logits[i, p] = <mask_head(queries[i]), f_largest[:, p]>`.
pub fn predict_mask_logits(tape: &mut Tape, b: &mut Binder, queries: Var, f_largest: Var) -> Var {
    let h = nn::linear(tape, b, "imp.mask.1", queries);
    let h = tape.relu(h);
    let emb = nn::linear(tape, b, "imp.mask.2", h);
    tape.matmul(emb, f_largest)
}

/// Additive attention bias from previous-layer masks at full resolution:
/// max-pool down to `(h_l, w_l)`, 0 where the pooled value exceeds `tau_m`,
/// -inf elsewhere; rows that would be fully masked fall back to all zeros.
pub fn attention_bias(
    masks: &Array2<f64>,
    full_hw: (usize, usize),
    scale_hw: (usize, usize),
    tau_m: f64,
) -> Array2<f64> {
    let (h, w) = full_hw;
    let (hl, wl) = scale_hw;
    assert_eq!(masks.ncols(), h * w, "mask row length mismatch");
    assert!(h % hl == 0 && w % wl == 0, "scale must divide grid");
    let (fh, fw) = (h / hl, w / wl);
    let n = masks.nrows();
    let mut bias = Array2::zeros((n, hl * wl));
    for i in 0..n {
        let mut any_open = false;
        for r in 0..hl {
            for c in 0..wl {
                let mut pooled = f64::NEG_INFINITY;
                for dr in 0..fh {
                    for dc in 0..fw {
                        let v = masks[[i, (r * fh + dr) * w + (c * fw + dc)]];
                        if v > pooled {
                            pooled = v;
                        }
                    }
                }
                let open = pooled > tau_m;
                any_open |= open;
                bias[[i, r * wl + c]] = if open { 0.0 } else { f64::NEG_INFINITY };
            }
        }
        if !any_open {
            for j in 0..hl * wl {
                bias[[i, j]] = 0.0;
            }
        }
    }
    bias
}

/// Block-diagonal self-attention bias: queries may only attend within their
/// own group (the learnable block, or one denoise group).
fn group_isolation_bias(n_learnable: usize, groups: usize, group_size: usize) -> Array2<f64> {
    let n = n_learnable + groups * group_size;
    let group_of = |i: usize| {
        if i < n_learnable {
            0
        } else {
            1 + (i - n_learnable) / group_size.max(1)
        }
    };
    Array2::from_shape_fn((n, n), |(i, j)| {
        if group_of(i) == group_of(j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Runs the first stage. Returns `M + 1` states; state 0 holds the initial
/// queries and their mask/class predictions.
pub fn forward(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    feats: &BevFeatures,
    dn: Option<&DenoiseBatch>,
) -> ImpOutput {
    let n_learnable = cfg.n_i;
    let n_denoise = dn.map_or(0, |d| d.n_rows());
    let f_largest = feats.largest();

    // Initial queries: learnable rows, then denoise rows built from the
    // (possibly flipped) class embeddings.
    let learn = b.get(tape, "imp.query_embed");
    let q0 = match dn {
        Some(d) if d.n_rows() > 0 => {
            let embed = b.get(tape, "dn.class_embed");
            let rows = tape.gather_rows(embed, &d.noisy_classes);
            tape.concat_rows(&[learn, rows])
        }
        _ => learn,
    };

    let class_logits0 = nn::linear(tape, b, "imp.class_head", q0);
    let mask_logits0 = predict_mask_logits(tape, b, q0, f_largest);
    let sig0 = tape.sigmoid(mask_logits0);
    // State-0 masks: denoise rows are the pinned perturbed GT masks.
    let masks0 = match dn {
        Some(d) if d.n_rows() > 0 => {
            let learn_rows = tape.slice_rows(sig0, 0, n_learnable);
            let pinned = tape.constant(d.pinned_masks.clone());
            tape.concat_rows(&[learn_rows, pinned])
        }
        _ => sig0,
    };
    let mut states = vec![QueryState {
        queries: q0,
        masks: masks0,
        mask_logits: mask_logits0,
        class_logits: class_logits0,
        layer_index: 0,
    }];

    let group_bias = dn
        .filter(|d| d.n_rows() > 0)
        .map(|d| {
            let gb = group_isolation_bias(n_learnable, d.groups, d.n_gt);
            tape.constant(gb)
        });

    let full_hw = (cfg.grid.height_px, cfg.grid.width_px);
    for m in 1..=cfg.m {
        let l = ((m - 1) % cfg.s) + 1;
        let f_l = feats.scales[l - 1];

        // Bias source: previous predicted masks for learnable rows, pinned
        // perturbed GT masks for denoise rows, at every layer. Values are
        // taken off the tape: the bias is a constant.
        let prev = states.last().unwrap();
        let mut bias_src = tape.value(prev.masks).clone();
        if let Some(d) = dn {
            for (r, row) in d.pinned_masks.outer_iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    bias_src[[n_learnable + r, j]] = *v;
                }
            }
        }
        let bias = attention_bias(&bias_src, full_hw, cfg.scale_hw(l), cfg.tau_m);
        let bias = tape.constant(bias);

        let mut kv = tape.transpose(f_l);
        let pe = scale_positional_embedding(tape, cfg, l);
        kv = tape.add(kv, pe);

        let q_prev = prev.queries;
        let cross = nn::multi_head_attention(
            tape,
            b,
            &format!("imp.l{m}.cross"),
            q_prev,
            kv,
            Some(bias),
            cfg.heads,
        );
        let x = nn::residual_norm(tape, b, &format!("imp.l{m}.ln1"), q_prev, cross);
        let selfa = nn::multi_head_attention(
            tape,
            b,
            &format!("imp.l{m}.self"),
            x,
            x,
            group_bias,
            cfg.heads,
        );
        let x = nn::residual_norm(tape, b, &format!("imp.l{m}.ln2"), x, selfa);
        let f = nn::ffn(tape, b, &format!("imp.l{m}.ffn"), x);
        let x = nn::residual_norm(tape, b, &format!("imp.l{m}.ln3"), x, f);

        let class_logits = nn::linear(tape, b, "imp.class_head", x);
        let mask_logits = predict_mask_logits(tape, b, x, f_largest);
        let masks = tape.sigmoid(mask_logits);
        states.push(QueryState {
            queries: x,
            masks,
            mask_logits,
            class_logits,
            layer_index: m,
        });
    }

    ImpOutput {
        states,
        n_learnable,
        n_denoise,
    }
}
