//! BEV encoder: raster input to multi-scale BEV features.
//!
//! A convolutional stem lifts the `C_IN x H x W` input raster to model width,
//! strided convolutions build `S` progressively coarser scales, and joint
//! self-attention layers run over the concatenation of all flattened scales
//! (with sinusoidal positional and learned per-scale embeddings) so every
//! scale attends to every other. Scale `l = 1` is the coarsest, `l = S`
//! matches the input grid.

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::geometry::sinusoidal_embedding;
use crate::graph::{ConvGeom, Tape, Var};
use crate::nn::{self, Binder, ParamInit};
use crate::scenegen::C_IN;

/// Multi-scale BEV features on the tape. `scales[l-1]` has shape
/// `(D, H_l * W_l)` where `(H_l, W_l) = cfg.scale_hw(l)`.
pub struct BevFeatures {
    pub scales: Vec<Var>,
}

impl BevFeatures {
    /// The finest scale, matching the input grid resolution.
    pub fn largest(&self) -> Var {
        *self.scales.last().expect("at least one scale")
    }
}

/// Registers all encoder parameters. Call once during model construction.
pub fn init_params(init: &mut ParamInit, cfg: &RunConfig) {
    nn::init_conv2d(init, "enc.stem", C_IN, cfg.d, 3);
    for i in 1..cfg.s {
        nn::init_conv2d(init, &format!("enc.down{i}"), cfg.d, cfg.d, 3);
    }
    init.normal("enc.scale_embed", cfg.s, cfg.d, 0.02);
    for l in 0..cfg.enc_layers {
        nn::init_attention(init, &format!("enc.l{l}.attn"), cfg.d);
        nn::init_layer_norm(init, &format!("enc.l{l}.ln1"), cfg.d);
        nn::init_ffn(init, &format!("enc.l{l}.ffn"), cfg.d, 4);
        nn::init_layer_norm(init, &format!("enc.l{l}.ln2"), cfg.d);
    }
    nn::init_linear(init, "enc.out", cfg.d, cfg.d);
}

/// Positional embedding for scale `l` as a tape constant, shape `(H_l*W_l, D)`.
pub fn scale_positional_embedding(tape: &mut Tape, cfg: &RunConfig, l: usize) -> Var {
    let factor = 1usize << (cfg.s - l);
    let (hl, wl) = cfg.grid.downsampled(factor);
    let grid = crate::geometry::GridSpec {
        height_px: hl,
        width_px: wl,
        ..cfg.grid
    };
    let pe = sinusoidal_embedding(&grid, cfg.d);
    tape.constant(pe)
}

/// Encodes an input raster bound as a `(C_IN, H*W)` tape node.
pub fn encode(tape: &mut Tape, b: &mut Binder, cfg: &RunConfig, input: Var) -> Result<BevFeatures> {
    let (h, w) = (cfg.grid.height_px, cfg.grid.width_px);
    let got = tape.shape(input);
    if got != (C_IN, h * w) {
        return Err(CoreError::ShapeMismatch(format!(
            "encoder input: expected ({C_IN}, {}), got ({}, {})",
            h * w,
            got.0,
            got.1
        )));
    }

    // Stem at full resolution, then strided downsampling. maps[i] holds the
    // feature map after i halvings, so maps[s-1] is the coarsest.
    let stem_geom = ConvGeom {
        c_in: C_IN,
        h,
        w,
        k: 3,
        stride: 1,
        pad: 1,
    };
    let mut cur = nn::conv2d(tape, b, "enc.stem", input, stem_geom, cfg.d);
    cur = tape.relu(cur);
    let mut maps = vec![cur];
    let (mut ch, mut cw) = (h, w);
    for i in 1..cfg.s {
        let geom = ConvGeom {
            c_in: cfg.d,
            h: ch,
            w: cw,
            k: 3,
            stride: 2,
            pad: 1,
        };
        cur = nn::conv2d(tape, b, &format!("enc.down{i}"), cur, geom, cfg.d);
        cur = tape.relu(cur);
        (ch, cw) = ((ch + 1) / 2, (cw + 1) / 2);
        maps.push(cur);
    }

    // Tokens per scale (coarsest first), tagged with positional and scale
    // embeddings, then concatenated for joint attention.
    let scale_embed = b.get(tape, "enc.scale_embed");
    let mut token_blocks = Vec::with_capacity(cfg.s);
    let mut lengths = Vec::with_capacity(cfg.s);
    for l in 1..=cfg.s {
        let feat = maps[cfg.s - l];
        let mut tok = tape.transpose(feat);
        let pe = scale_positional_embedding(tape, cfg, l);
        tok = tape.add(tok, pe);
        let se = tape.gather_rows(scale_embed, &[l - 1]);
        tok = tape.add_row_vec(tok, se);
        lengths.push(tape.shape(tok).0);
        token_blocks.push(tok);
    }
    let mut x = if token_blocks.len() == 1 {
        token_blocks[0]
    } else {
        tape.concat_rows(&token_blocks)
    };

    for l in 0..cfg.enc_layers {
        let attn = nn::multi_head_attention(
            tape,
            b,
            &format!("enc.l{l}.attn"),
            x,
            x,
            None,
            cfg.heads,
        );
        x = nn::residual_norm(tape, b, &format!("enc.l{l}.ln1"), x, attn);
        let f = nn::ffn(tape, b, &format!("enc.l{l}.ffn"), x);
        x = nn::residual_norm(tape, b, &format!("enc.l{l}.ln2"), x, f);
    }
    let x = nn::linear(tape, b, "enc.out", x);

    // Split back into per-scale (D, H_l*W_l) maps.
    let mut scales = Vec::with_capacity(cfg.s);
    let mut offset = 0;
    for len in lengths {
        let rows = tape.slice_rows(x, offset, offset + len);
        scales.push(tape.transpose(rows));
        offset += len;
    }
    Ok(BevFeatures { scales })
}
