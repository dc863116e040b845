//! Parameter management, transformer building blocks, and the optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A forward pass
//! opens a [`Binder`] over the store; layer helpers fetch named tensors as
//! tape leaves (cached, so shared weights get one node and accumulate
//! gradients). After `Tape::backward`, [`Binder::collect_grads`] maps the
//! gradients back to names. All iteration is over `BTreeMap`, so reductions
//! and optimizer updates run in a fixed name order.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{ConvGeom, Grads, Tape, Var};

pub type GradMap = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub map: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn n_params(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// Deterministic parameter construction: draws follow the creation order of
/// the calls, so a fixed seed and code path give a bit-identical store.
pub struct ParamInit {
    rng: ChaCha8Rng,
    map: BTreeMap<String, Array2<f64>>,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            map: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Uniform Xavier/Glorot init for a `(rows, cols)` weight.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-a..a));
        self.insert(name, w);
    }

    /// Gaussian init, used for embeddings.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let w = Array2::from_shape_fn((rows, cols), |_| {
            std * self.rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        self.insert(name, w);
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::ones((rows, cols)));
    }

    pub fn finish(self) -> ParamStore {
        ParamStore { map: self.map }
    }
}

/// Binds store parameters into one tape as cached leaves.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = tape.leaf(self.store.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Extracts gradients for every bound parameter. Unreached parameters
    /// (e.g. behind a disabled toggle) are absent.
    pub fn collect_grads(&self, grads: &mut Grads) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// `y = x W + b` with `W` named `{prefix}.w`, `b` named `{prefix}.b`.
pub fn linear(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = b.get(tape, &format!("{prefix}.w"));
    let bias = b.get(tape, &format!("{prefix}.b"));
    let y = tape.matmul(x, w);
    tape.add_row_vec(y, bias)
}

pub fn init_linear(init: &mut ParamInit, prefix: &str, d_in: usize, d_out: usize) {
    init.xavier(&format!("{prefix}.w"), d_in, d_out);
    init.zeros(&format!("{prefix}.b"), 1, d_out);
}

/// Row layer norm with learned gain `{prefix}.g` and bias `{prefix}.b`.
pub fn layer_norm(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let g = b.get(tape, &format!("{prefix}.g"));
    let bias = b.get(tape, &format!("{prefix}.b"));
    let n = tape.layer_norm_rows(x, 1e-5);
    let n = tape.mul_row_vec(n, g);
    tape.add_row_vec(n, bias)
}

pub fn init_layer_norm(init: &mut ParamInit, prefix: &str, d: usize) {
    init.ones(&format!("{prefix}.g"), 1, d);
    init.zeros(&format!("{prefix}.b"), 1, d);
}

/// Multi-head attention. `attn_bias`, when given, is an additive
/// `(n_q, n_kv)` matrix (0 / -inf) shared across heads. Returns `(n_q, d)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    attn_bias: Option<Var>,
    heads: usize,
) -> Var {
    let d = tape.shape(q_in).1;
    assert!(heads > 0 && d % heads == 0, "head count must divide d");
    let dh = d / heads;
    let q = linear(tape, b, &format!("{prefix}.q"), q_in);
    let k = linear(tape, b, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, b, &format!("{prefix}.v"), kv_in);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        // Scale the (small) query block rather than the score matrix.
        let qh = tape.mul_scalar(qh, scale);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = match attn_bias {
            Some(bias) => tape.add(scores, bias),
            None => scores,
        };
        let p = tape.softmax_rows(scores);
        outs.push(tape.matmul(p, vh));
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    linear(tape, b, &format!("{prefix}.o"), cat)
}

pub fn init_attention(init: &mut ParamInit, prefix: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        init_linear(init, &format!("{prefix}.{part}"), d, d);
    }
}

/// Two-layer feed-forward with ReLU, hidden width `mult * d`.
pub fn ffn(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let h = linear(tape, b, &format!("{prefix}.1"), x);
    let h = tape.relu(h);
    linear(tape, b, &format!("{prefix}.2"), h)
}

pub fn init_ffn(init: &mut ParamInit, prefix: &str, d: usize, mult: usize) {
    init_linear(init, &format!("{prefix}.1"), d, d * mult);
    init_linear(init, &format!("{prefix}.2"), d * mult, d);
}

/// Post-norm residual transformer block pieces: `LN(x + sublayer)`.
pub fn residual_norm(tape: &mut Tape, b: &mut Binder, prefix: &str, x: Var, sub: Var) -> Var {
    let sum = tape.add(x, sub);
    layer_norm(tape, b, prefix, sum)
}

/// 2D convolution as im2col + matmul: weight `{prefix}.w` is
/// `(c_out, c_in * k * k)`, bias `{prefix}.b` is `(c_out, 1)`.
pub fn conv2d(
    tape: &mut Tape,
    b: &mut Binder,
    prefix: &str,
    x: Var,
    geom: ConvGeom,
    c_out: usize,
) -> Var {
    let col = tape.im2col(x, geom);
    let w = b.get(tape, &format!("{prefix}.w"));
    let bias = b.get(tape, &format!("{prefix}.b"));
    debug_assert_eq!(tape.shape(w), (c_out, geom.c_in * geom.k * geom.k));
    let y = tape.matmul(w, col);
    tape.add_col_vec(y, bias)
}

pub fn init_conv2d(init: &mut ParamInit, prefix: &str, c_in: usize, c_out: usize, k: usize) {
    init.xavier(&format!("{prefix}.w"), c_out, c_in * k * k);
    init.zeros(&format!("{prefix}.b"), c_out, 1);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate at `step` of `total` with linear warmup into the schedule.
pub fn lr_at(base_lr: f64, schedule: Schedule, step: usize, total: usize) -> f64 {
    let warmup = (total / 20).clamp(1, 50);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => {
            let t = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Decoupled weight-decay Adam with global-norm gradient clipping.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptState {
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
    pub t: usize,
}

impl AdamW {
    /// One update over all parameters that received gradients, in name
    /// order. Missing gradients (unused parameters this step) are skipped
    /// entirely: no moment update, no decay.
    pub fn step(&self, params: &mut ParamStore, grads: &GradMap, state: &mut OptState, lr: f64) {
        let norm = global_norm(grads);
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for (name, g) in grads {
            let p = params
                .map
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let g = g * scale;
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(p.dim()));
            *m *= self.beta1;
            *m += &(&g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(&g.mapv(|x| x * x) * (1.0 - self.beta2));
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let update = &m_hat / &(v_hat.mapv(f64::sqrt) + self.eps) + &(&*p * self.weight_decay);
            *p -= &(update * lr);
        }
    }
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}
