//! Second stage: map prediction from mask-aware queries.
//!
//! Three preparation steps feed a K-layer decoder:
//! 1. Positional query generation: soft segmentation masks gated at `tau_p`
//!    pool the finest-scale positional embedding into a per-instance
//!    positional feature, fused with the instance query and broadcast over
//!    `N_P` learnable point queries.
//! 2. Keypoint feature extraction: masks thresholded at `tau_g` pass a local
//!    max-survival filter, farthest-point sampling picks `N_S` keypoints,
//!    and BEV features at those pixels are fused with an MLP encoding of
//!    the keypoint coordinates.
//! 3. Hybrid attention: each instance's point tokens cross-attend to its own
//!    keypoint features (residual, no cross-instance mixing).
//!
//! The decoder alternates self-attention over all `N_q * N_P` point tokens
//! (with learnable/denoise group isolation), dense cross-attention to every
//! flattened multi-scale BEV token, and a feed-forward block; shared heads
//! emit per-layer class logits (mean-pooled over points) and sigmoid points.

use ndarray::Array2;

use crate::bevenc::{scale_positional_embedding, BevFeatures};
use crate::config::RunConfig;
use crate::geometry::{farthest_point_sampling, max_survival, Mask, NUM_CLASSES};
use crate::graph::{Tape, Var};
use crate::impnet::DenoiseBatch;
use crate::nn::{self, Binder, ParamInit};

/// One decoder layer's predictions: `class_logits` is `(N_q, C+1)`,
/// `points` is `(N_q * N_P, 2)` with rows grouped by instance.
pub struct MapLayer {
    pub class_logits: Var,
    pub points: Var,
}

pub struct MmpOutput {
    pub layers: Vec<MapLayer>,
    /// Keypoints per instance (pixel `(row, col)`), when GFE ran.
    pub keypoints: Option<Vec<Vec<(usize, usize)>>>,
    pub n_instances: usize,
}

/// Where the decoder's instance identity comes from.
pub enum QuerySource<'a> {
    /// First-stage output: mask-aware queries plus their soft masks.
    MaskQueries {
        queries: Var,
        masks: Var,
        dn: Option<&'a DenoiseBatch>,
    },
    /// Baseline: plain learnable instance embeddings, no masks.
    Learnable,
}

pub fn init_params(init: &mut ParamInit, cfg: &RunConfig) {
    init.normal("mmp.point_embed", cfg.n_p, cfg.d, 1.0);
    init.normal("mmp.query_embed", cfg.n_i, cfg.d, 1.0);
    nn::init_linear(init, "pqg.proj", 2 * cfg.d, cfg.d);
    nn::init_linear(init, "pqg.qonly", cfg.d, cfg.d);
    nn::init_linear(init, "gfe.mlp.1", 2, cfg.d);
    nn::init_linear(init, "gfe.mlp.2", cfg.d, cfg.d);
    nn::init_linear(init, "gfe.proj", 2 * cfg.d, cfg.d);
    nn::init_attention(init, "hyb", cfg.d);
    for k in 1..=cfg.k {
        nn::init_attention(init, &format!("mmp.l{k}.self"), cfg.d);
        nn::init_layer_norm(init, &format!("mmp.l{k}.ln1"), cfg.d);
        nn::init_attention(init, &format!("mmp.l{k}.cross"), cfg.d);
        nn::init_layer_norm(init, &format!("mmp.l{k}.ln2"), cfg.d);
        nn::init_ffn(init, &format!("mmp.l{k}.ffn"), cfg.d, 4);
        nn::init_layer_norm(init, &format!("mmp.l{k}.ln3"), cfg.d);
    }
    nn::init_linear(init, "mmp.class_head", cfg.d, NUM_CLASSES + 1);
    nn::init_linear(init, "mmp.point_head", cfg.d, 2);
}

/// Mask-weighted positional pooling: gates soft mask values strictly above
/// `tau_p`, pools the positional embedding weighted by the surviving soft
/// values, and divides by the survivor count (zero survivors -> zero row).
/// Gradients flow through the soft mask values; the gate and count are
/// constants derived from `mask_values`.
pub fn positional_pool(
    tape: &mut Tape,
    masks: Var,
    mask_values: &Array2<f64>,
    tau_p: f64,
    pe: Var,
) -> Var {
    let (n, hw) = mask_values.dim();
    assert_eq!(tape.shape(masks), (n, hw));
    let mut gate = Array2::zeros((n, hw));
    let mut inv_count = Array2::zeros((n, 1));
    for i in 0..n {
        let mut count = 0usize;
        for j in 0..hw {
            if mask_values[[i, j]] > tau_p {
                gate[[i, j]] = 1.0;
                count += 1;
            }
        }
        if count > 0 {
            inv_count[[i, 0]] = 1.0 / count as f64;
        }
    }
    let gate = tape.constant(gate);
    let inv = tape.constant(inv_count);
    let gated = tape.mul(masks, gate);
    let pooled = tape.matmul(gated, pe);
    tape.mul_col_vec(pooled, inv)
}

/// Keypoints for one instance mask: threshold at `tau_g` (keep soft values),
/// max-survival with window `g`, then farthest-point sampling to `n_s`
/// points (cycling if fewer survive). Zero survivors -> `None`.
pub fn extract_keypoints(
    mask: &Mask,
    tau_g: f64,
    g: usize,
    n_s: usize,
) -> Option<Vec<(usize, usize)>> {
    let thresholded = mask.mapv(|v| if v > tau_g { v } else { 0.0 });
    let survived = max_survival(&thresholded, g);
    let mut candidates = Vec::new();
    for ((r, c), v) in survived.indexed_iter() {
        if *v > 0.0 {
            candidates.push(((r, c), *v));
        }
    }
    if candidates.is_empty() {
        return None;
    }
    Some(farthest_point_sampling(&candidates, n_s))
}

/// Per-instance keypoint features: BEV feature columns at the keypoints
/// fused with an MLP encoding of the normalized keypoint coordinates.
/// Instances without survivors get all-zero features and center keypoints.
pub struct GfeOutput {
    pub features: Vec<Var>,
    pub keypoints: Vec<Vec<(usize, usize)>>,
}

pub fn gfe(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    mask_values: &Array2<f64>,
    f_largest: Var,
) -> GfeOutput {
    let (h, w) = (cfg.grid.height_px, cfg.grid.width_px);
    let n = mask_values.nrows();
    let mut features = Vec::with_capacity(n);
    let mut keypoints = Vec::with_capacity(n);
    for i in 0..n {
        let mask = Array2::from_shape_fn((h, w), |(r, c)| mask_values[[i, r * w + c]]);
        match extract_keypoints(&mask, cfg.tau_g, cfg.g, cfg.n_s) {
            Some(kps) => {
                let idx: Vec<usize> = kps.iter().map(|(r, c)| r * w + c).collect();
                let cols = tape.gather_cols(f_largest, &idx);
                let feat = tape.transpose(cols);
                let coords = Array2::from_shape_fn((cfg.n_s, 2), |(j, d)| {
                    let (r, c) = kps[j];
                    if d == 0 {
                        (c as f64 + 0.5) / w as f64
                    } else {
                        (r as f64 + 0.5) / h as f64
                    }
                });
                let cv = tape.constant(coords);
                let ce = nn::linear(tape, b, "gfe.mlp.1", cv);
                let ce = tape.relu(ce);
                let ce = nn::linear(tape, b, "gfe.mlp.2", ce);
                let cat = tape.concat_cols(&[feat, ce]);
                features.push(nn::linear(tape, b, "gfe.proj", cat));
                keypoints.push(kps);
            }
            None => {
                features.push(tape.constant(Array2::zeros((cfg.n_s, cfg.d))));
                keypoints.push(vec![(h / 2, w / 2); cfg.n_s]);
            }
        }
    }
    GfeOutput {
        features,
        keypoints,
    }
}

/// Per-instance cross-attention from point tokens to that instance's
/// keypoint features, with a plain residual (no norm): zero keypoint
/// features and a zero output projection leave the tokens unchanged.
pub fn hybrid_attention(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    tokens: Var,
    gfe_out: &GfeOutput,
) -> Var {
    let n = gfe_out.features.len();
    assert_eq!(tape.shape(tokens).0, n * cfg.n_p);
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let qi = tape.slice_rows(tokens, i * cfg.n_p, (i + 1) * cfg.n_p);
        let attn =
            nn::multi_head_attention(tape, b, "hyb", qi, gfe_out.features[i], None, cfg.heads);
        parts.push(tape.add(qi, attn));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    }
}

/// Token-level group-isolation bias for the decoder self-attention.
fn token_group_bias(
    n_learnable: usize,
    groups: usize,
    group_size: usize,
    n_p: usize,
) -> Array2<f64> {
    let n_inst = n_learnable + groups * group_size;
    let group_of = |inst: usize| {
        if inst < n_learnable {
            0
        } else {
            1 + (inst - n_learnable) / group_size.max(1)
        }
    };
    Array2::from_shape_fn((n_inst * n_p, n_inst * n_p), |(i, j)| {
        if group_of(i / n_p) == group_of(j / n_p) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// K decoder layers over the hybrid point tokens.
pub fn map_decoder(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    tokens: Var,
    feats: &BevFeatures,
    group_bias: Option<Var>,
) -> Vec<MapLayer> {
    // Cross-attention keys/values: all scales flattened, with positional
    // and resolution-consistent embeddings (built once, shared by layers).
    let mut kv_parts = Vec::with_capacity(cfg.s);
    for l in 1..=cfg.s {
        let mut tok = tape.transpose(feats.scales[l - 1]);
        let pe = scale_positional_embedding(tape, cfg, l);
        tok = tape.add(tok, pe);
        kv_parts.push(tok);
    }
    let kv = if kv_parts.len() == 1 {
        kv_parts[0]
    } else {
        tape.concat_rows(&kv_parts)
    };

    let mut x = tokens;
    let mut layers = Vec::with_capacity(cfg.k);
    for k in 1..=cfg.k {
        let selfa = nn::multi_head_attention(
            tape,
            b,
            &format!("mmp.l{k}.self"),
            x,
            x,
            group_bias,
            cfg.heads,
        );
        x = nn::residual_norm(tape, b, &format!("mmp.l{k}.ln1"), x, selfa);
        let cross = nn::multi_head_attention(
            tape,
            b,
            &format!("mmp.l{k}.cross"),
            x,
            kv,
            None,
            cfg.heads,
        );
        x = nn::residual_norm(tape, b, &format!("mmp.l{k}.ln2"), x, cross);
        let f = nn::ffn(tape, b, &format!("mmp.l{k}.ffn"), x);
        x = nn::residual_norm(tape, b, &format!("mmp.l{k}.ln3"), x, f);

        let inst = tape.mean_pool_rows(x, cfg.n_p);
        let class_logits = nn::linear(tape, b, "mmp.class_head", inst);
        let raw = nn::linear(tape, b, "mmp.point_head", x);
        let points = tape.sigmoid(raw);
        layers.push(MapLayer {
            class_logits,
            points,
        });
    }
    layers
}

/// Builds `(n_inst * n_p)` point tokens: one positional row per instance
/// broadcast over the learnable point queries.
fn broadcast_tokens(tape: &mut Tape, b: &mut Binder, cfg: &RunConfig, inst_rows: Var) -> Var {
    let n = tape.shape(inst_rows).0;
    let point_embed = b.get(tape, "mmp.point_embed");
    let inst_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(cfg.n_p)).collect();
    let point_idx: Vec<usize> = (0..n).flat_map(|_| 0..cfg.n_p).collect();
    let a = tape.gather_rows(inst_rows, &inst_idx);
    let p = tape.gather_rows(point_embed, &point_idx);
    tape.add(a, p)
}

/// Full second stage.
pub fn forward(
    tape: &mut Tape,
    b: &mut Binder,
    cfg: &RunConfig,
    feats: &BevFeatures,
    source: QuerySource,
) -> MmpOutput {
    let t = &cfg.toggles;
    let (tokens, keypoints, n_instances, group_bias) = match source {
        QuerySource::Learnable => {
            let embed = b.get(tape, "mmp.query_embed");
            let tokens = broadcast_tokens(tape, b, cfg, embed);
            (tokens, None, cfg.n_i, None)
        }
        QuerySource::MaskQueries { queries, masks, dn } => {
            let n = tape.shape(queries).0;
            let mask_values = tape.value(masks).clone();
            let inst_rows = if t.use_pqg {
                let pe = scale_positional_embedding(tape, cfg, cfg.s);
                let f_pos = positional_pool(tape, masks, &mask_values, cfg.tau_p, pe);
                let cat = tape.concat_cols(&[f_pos, queries]);
                nn::linear(tape, b, "pqg.proj", cat)
            } else {
                nn::linear(tape, b, "pqg.qonly", queries)
            };
            let mut tokens = broadcast_tokens(tape, b, cfg, inst_rows);
            let mut keypoints = None;
            if t.use_gfe {
                let gfe_out = gfe(tape, b, cfg, &mask_values, feats.largest());
                tokens = hybrid_attention(tape, b, cfg, tokens, &gfe_out);
                keypoints = Some(gfe_out.keypoints);
            }
            let group_bias = dn.filter(|d| d.n_rows() > 0).map(|d| {
                let gb = token_group_bias(cfg.n_i, d.groups, d.n_gt, cfg.n_p);
                tape.constant(gb)
            });
            (tokens, keypoints, n, group_bias)
        }
    };

    let layers = map_decoder(tape, b, cfg, tokens, feats, group_bias);
    MmpOutput {
        layers,
        keypoints,
        n_instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bevenc;
    use crate::impnet;
    use crate::nn::{GradMap, ParamStore};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid.height_px = 8;
        cfg.grid.width_px = 4;
        cfg.s = 2;
        cfg.d = 8;
        cfg.heads = 2;
        cfg.enc_layers = 1;
        cfg.m = 1;
        cfg.k = 2;
        cfg.n_i = 4;
        cfg.n_p = 3;
        cfg.n_s = 5;
        cfg.g = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn full_store(cfg: &RunConfig, seed: u64) -> ParamStore {
        let mut init = ParamInit::new(seed);
        bevenc::init_params(&mut init, cfg);
        impnet::init_params(&mut init, cfg);
        init_params(&mut init, cfg);
        init.finish()
    }

    fn random_feats(cfg: &RunConfig, tape: &mut Tape, seed: u64) -> BevFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scales = Vec::new();
        for l in 1..=cfg.s {
            let (h, w) = cfg.scale_hw(l);
            let a = Array2::from_shape_fn((cfg.d, h * w), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5
            });
            scales.push(tape.constant(a));
        }
        BevFeatures { scales }
    }

    #[test]
    fn positional_pool_single_pixel_returns_that_embedding() {
        let mut tape = Tape::new();
        let hw = 6;
        let d = 4;
        let pe_arr = Array2::from_shape_fn((hw, d), |(r, c)| (r * d + c) as f64 * 0.1);
        let pe = tape.constant(pe_arr.clone());
        let mut mask = Array2::zeros((1, hw));
        mask[[0, 3]] = 1.0;
        let mv = tape.constant(mask.clone());
        let out = positional_pool(&mut tape, mv, &mask, 0.3, pe);
        for c in 0..d {
            assert!((tape.value(out)[[0, c]] - pe_arr[[3, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_pool_hand_case_two_pixels() {
        // Values {1.0, 0.5} at PE rows (1,0) and (0,1): both above 0.3, so
        // f_pos = (1.0*(1,0) + 0.5*(0,1)) / 2 = (0.5, 0.25).
        let mut tape = Tape::new();
        let pe = tape.constant(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let mask = ndarray::array![[1.0, 0.5]];
        let mv = tape.constant(mask.clone());
        let out = positional_pool(&mut tape, mv, &mask, 0.3, pe);
        assert!((tape.value(out)[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((tape.value(out)[[0, 1]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn positional_pool_matches_naive_loops_and_zeroes_empty_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..100 {
            let (n, hw, d) = (3, 24, 6);
            let tau = 0.3;
            let mut mask = Array2::from_shape_fn((n, hw), |_| rng.gen::<f64>());
            // Row 2: everything at/below the threshold -> zero row expected.
            for j in 0..hw {
                mask[[2, j]] = rng.gen::<f64>() * tau;
            }
            let pe_arr = Array2::from_shape_fn((hw, d), |_| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let pe = tape.constant(pe_arr.clone());
            let mv = tape.constant(mask.clone());
            let out = positional_pool(&mut tape, mv, &mask, tau, pe);
            let got = tape.value(out);

            for i in 0..n {
                let mut want = vec![0.0; d];
                let mut count = 0usize;
                for j in 0..hw {
                    if mask[[i, j]] > tau {
                        count += 1;
                        for c in 0..d {
                            want[c] += mask[[i, j]] * pe_arr[[j, c]];
                        }
                    }
                }
                for c in 0..d {
                    let w = if count > 0 { want[c] / count as f64 } else { 0.0 };
                    let rel = (got[[i, c]] - w).abs() / w.abs().max(1.0);
                    assert!(rel < 1e-6, "case {case} row {i} ch {c}: {} vs {w}", got[[i, c]]);
                }
                if i == 2 {
                    assert!(got.row(2).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn keypoints_are_survivors_and_exact_set_when_counts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mask = Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>());
            if let Some(kps) = extract_keypoints(&mask, 0.8, 2, 6) {
                assert_eq!(kps.len(), 6);
                let thresholded = mask.mapv(|v| if v > 0.8 { v } else { 0.0 });
                let surv = max_survival(&thresholded, 2);
                for (r, c) in &kps {
                    assert!(surv[[*r, *c]] > 0.0, "keypoint not a survivor");
                    assert!(mask[[*r, *c]] > 0.8, "keypoint below tau_g");
                }
            }
        }

        // Exactly n_s survivors: FPS must return that set.
        let mut mask = Array2::zeros((8, 8));
        let spots = [(0, 0), (0, 7), (7, 0), (7, 7)];
        for (r, c) in spots {
            mask[[r, c]] = 0.95;
        }
        let kps = extract_keypoints(&mask, 0.8, 2, 4).unwrap();
        let mut got: Vec<_> = kps.clone();
        got.sort_unstable();
        assert_eq!(got, spots.to_vec());

        // Zero survivors.
        let empty = Array2::from_elem((8, 8), 0.5);
        assert!(extract_keypoints(&empty, 0.8, 2, 4).is_none());
    }

    #[test]
    fn gfe_zero_survivors_give_zero_features_and_center_keypoints() {
        let cfg = tiny_cfg();
        let store = full_store(&cfg, 3);
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let feats = random_feats(&cfg, &mut tape, 4);
        let hw = cfg.grid.height_px * cfg.grid.width_px;
        // One instance with survivors, one without.
        let mut masks = Array2::from_elem((2, hw), 0.1);
        masks[[0, 5]] = 0.95;
        let out = gfe(&mut tape, &mut b, &cfg, &masks, feats.largest());
        assert_eq!(out.features.len(), 2);
        assert_eq!(out.keypoints[1], vec![(4, 2); cfg.n_s]);
        let f1 = tape.value(out.features[1]);
        assert!(f1.iter().all(|v| *v == 0.0));
        let f0 = tape.value(out.features[0]);
        assert!(f0.iter().any(|v| *v != 0.0));
        // All keypoints of instance 0 sit on the single survivor (cycling).
        assert_eq!(out.keypoints[0], vec![(1, 1); cfg.n_s]);
    }

    #[test]
    fn hybrid_residual_identity_with_zero_output_projection() {
        let cfg = tiny_cfg();
        let mut store = full_store(&cfg, 5);
        store.map.get_mut("hyb.o.w").unwrap().fill(0.0);
        store.map.get_mut("hyb.o.b").unwrap().fill(0.0);
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let tokens_arr = Array2::from_shape_fn((2 * cfg.n_p, cfg.d), |(r, c)| {
            ((r * 7 + c) as f64).sin()
        });
        let tokens = tape.constant(tokens_arr.clone());
        let gfe_out = GfeOutput {
            features: vec![
                tape.constant(Array2::zeros((cfg.n_s, cfg.d))),
                tape.constant(Array2::zeros((cfg.n_s, cfg.d))),
            ],
            keypoints: vec![vec![(0, 0); cfg.n_s]; 2],
        };
        let out = hybrid_attention(&mut tape, &mut b, &cfg, tokens, &gfe_out);
        assert_eq!(tape.value(out), &tokens_arr);
    }

    #[test]
    fn hybrid_singleton_feature_gets_full_attention_weight() {
        // One keypoint feature (n_s = 1) with identity projections: the
        // attention output equals that feature row for every point token.
        let mut cfg = tiny_cfg();
        cfg.n_s = 1;
        let d = cfg.d;
        let eye = Array2::eye(d);
        let zrow = Array2::zeros((1, d));
        let mut map = std::collections::BTreeMap::new();
        for part in ["q", "k", "v", "o"] {
            map.insert(format!("hyb.{part}.w"), eye.clone());
            map.insert(format!("hyb.{part}.b"), zrow.clone());
        }
        let store = ParamStore { map };
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let tokens_arr = Array2::from_shape_fn((cfg.n_p, d), |(r, c)| (r + c) as f64 * 0.1);
        let tokens = tape.constant(tokens_arr.clone());
        let feat = Array2::from_shape_fn((1, d), |(_, c)| c as f64 * 0.3 - 0.5);
        let fv = tape.constant(feat.clone());
        let gfe_out = GfeOutput {
            features: vec![fv],
            keypoints: vec![vec![(0, 0)]],
        };
        let out = hybrid_attention(&mut tape, &mut b, &cfg, tokens, &gfe_out);
        for r in 0..cfg.n_p {
            for c in 0..d {
                let want = tokens_arr[[r, c]] + feat[[0, c]];
                assert!((tape.value(out)[[r, c]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_emits_unit_interval_points_across_layers() {
        let cfg = tiny_cfg();
        let store = full_store(&cfg, 6);
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let feats = random_feats(&cfg, &mut tape, 7);
        let tokens = {
            let a = Array2::from_shape_fn((cfg.n_i * cfg.n_p, cfg.d), |(r, c)| {
                ((r * 3 + c) as f64).cos()
            });
            tape.constant(a)
        };
        let layers = map_decoder(&mut tape, &mut b, &cfg, tokens, &feats, None);
        assert_eq!(layers.len(), cfg.k);
        for l in &layers {
            assert_eq!(tape.shape(l.class_logits), (cfg.n_i, NUM_CLASSES + 1));
            assert_eq!(tape.shape(l.points), (cfg.n_i * cfg.n_p, 2));
            let p = tape.value(l.points);
            assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn permuting_instances_permutes_decoder_predictions() {
        let cfg = tiny_cfg();
        let store = full_store(&cfg, 8);
        let perm = [2usize, 0, 3, 1];
        let base_tokens = Array2::from_shape_fn((cfg.n_i * cfg.n_p, cfg.d), |(r, c)| {
            ((r * 11 + c * 3) as f64).sin()
        });
        let mut perm_tokens = base_tokens.clone();
        for (dst, src) in perm.iter().enumerate() {
            for j in 0..cfg.n_p {
                for c in 0..cfg.d {
                    perm_tokens[[dst * cfg.n_p + j, c]] = base_tokens[[src * cfg.n_p + j, c]];
                }
            }
        }
        let run = |tok: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&store);
            let feats = random_feats(&cfg, &mut tape, 9);
            let tv = tape.constant(tok.clone());
            let layers = map_decoder(&mut tape, &mut b, &cfg, tv, &feats, None);
            layers
                .iter()
                .map(|l| {
                    (
                        tape.value(l.class_logits).clone(),
                        tape.value(l.points).clone(),
                    )
                })
                .collect::<Vec<_>>()
        };
        let a = run(&base_tokens);
        let bb = run(&perm_tokens);
        for (la, lb) in a.iter().zip(&bb) {
            for (dst, src) in perm.iter().enumerate() {
                for c in 0..=NUM_CLASSES {
                    assert!(
                        (lb.0[[dst, c]] - la.0[[*src, c]]).abs() < 1e-9,
                        "class logits permute"
                    );
                }
                for j in 0..cfg.n_p {
                    for c in 0..2 {
                        assert!(
                            (lb.1[[dst * cfg.n_p + j, c]] - la.1[[*src * cfg.n_p + j, c]]).abs()
                                < 1e-9,
                            "points permute"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn full_forward_shapes_with_and_without_toggles() {
        let mut cfg = tiny_cfg();
        let store = full_store(&cfg, 10);
        let run = |cfg: &RunConfig| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&store);
            let feats = random_feats(cfg, &mut tape, 11);
            let hw = cfg.grid.height_px * cfg.grid.width_px;
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let q = tape.constant(Array2::from_shape_fn((cfg.n_i, cfg.d), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }));
            let masks = tape.constant(Array2::from_shape_fn((cfg.n_i, hw), |_| rng.gen()));
            let source = if cfg.toggles.use_impnet {
                QuerySource::MaskQueries {
                    queries: q,
                    masks,
                    dn: None,
                }
            } else {
                QuerySource::Learnable
            };
            let out = forward(&mut tape, &mut b, cfg, &feats, source);
            assert_eq!(out.layers.len(), cfg.k);
            assert_eq!(out.n_instances, cfg.n_i);
            assert_eq!(out.keypoints.is_some(), cfg.toggles.use_impnet && cfg.toggles.use_gfe);
            let last = out.layers.last().unwrap();
            tape.value(last.points).clone()
        };
        let full = run(&cfg);
        cfg.toggles.use_gfe = false;
        let no_gfe = run(&cfg);
        cfg.toggles.use_pqg = false;
        let neither = run(&cfg);
        cfg.toggles = crate::config::Toggles {
            use_impnet: false,
            use_pqg: false,
            use_gfe: false,
            use_denoising: false,
            ..cfg.toggles
        };
        let baseline = run(&cfg);
        assert_ne!(full, no_gfe);
        assert_ne!(no_gfe, neither);
        assert_ne!(neither, baseline);
    }

    #[test]
    fn decoder_gradients_match_finite_differences_on_micro_config() {
        let mut cfg = RunConfig::default();
        cfg.grid.height_px = 8;
        cfg.grid.width_px = 8;
        cfg.s = 2;
        cfg.d = 8;
        cfg.heads = 2;
        cfg.k = 1;
        cfg.n_i = 3;
        cfg.n_p = 4;
        cfg.n_s = 3;
        cfg.validate().unwrap();
        let store = full_store(&cfg, 13);

        let forward_loss = |st: &ParamStore| -> (f64, GradMap) {
            let mut tape = Tape::new();
            let mut b = Binder::new(st);
            let feats = random_feats(&cfg, &mut tape, 14);
            let hw = cfg.grid.height_px * cfg.grid.width_px;
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let q = tape.leaf(Array2::from_shape_fn((cfg.n_i, cfg.d), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }));
            let masks_arr = Array2::from_shape_fn((cfg.n_i, hw), |_| rng.gen());
            let m_logit = masks_arr.mapv(|p: f64| (p / (1.0 - p)).ln());
            let ml = tape.leaf(m_logit);
            let masks = tape.sigmoid(ml);
            let out = forward(
                &mut tape,
                &mut b,
                &cfg,
                &feats,
                QuerySource::MaskQueries {
                    queries: q,
                    masks,
                    dn: None,
                },
            );
            let last = out.layers.last().unwrap();
            let a = tape.mean_all(last.points);
            let c = tape.mean_all(last.class_logits);
            let loss = tape.add(a, c);
            let lv = tape.value(loss)[[0, 0]];
            let mut grads = tape.backward(loss);
            (lv, b.collect_grads(&mut grads))
        };

        let (_, analytic) = forward_loss(&store);
        let h = 1e-6;
        for name in [
            "pqg.proj.w",
            "gfe.mlp.1.w",
            "gfe.proj.w",
            "hyb.v.w",
            "mmp.point_embed",
            "mmp.l1.self.q.w",
            "mmp.l1.cross.v.w",
            "mmp.class_head.w",
            "mmp.point_head.w",
        ] {
            let arr = store.get(name);
            let probe = [(0, 0), (arr.nrows() - 1, arr.ncols() - 1)];
            for (r, c) in probe {
                let mut plus = store.clone();
                plus.map.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = store.clone();
                minus.map.get_mut(name).unwrap()[[r, c]] -= h;
                let fd = (forward_loss(&plus).0 - forward_loss(&minus).0) / (2.0 * h);
                let a = analytic.get(name).map_or(0.0, |g| g[[r, c]]);
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom <= 1e-3,
                    "{name}[{r},{c}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
