//! Reverse-mode autodiff over `Array2<f64>` values.
//!
//! The tape evaluates eagerly: each builder method computes the forward value
//! and records the op, [`Tape::backward`] then walks the nodes once in
//! reverse. Every tensor is a 2D array; convolutions go through [`Tape::im2col`]
//! plus matmul, and higher-rank tensors are kept flattened by the callers.
//!
//! Gradients only flow into nodes reachable from a [`Tape::leaf`]; values
//! created with [`Tape::constant`] are treated as detached.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// `(N, D) + (1, D)`, the row vector broadcast over rows.
    AddRowVec(Var, Var),
    /// `(N, M) + (N, 1)`, the column vector broadcast over columns.
    AddColVec(Var, Var),
    /// `(N, D) * (1, D)` elementwise with row-vector broadcast.
    MulRowVec(Var, Var),
    /// `(N, M) * (N, 1)` elementwise with column-vector broadcast.
    MulColVec(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    PowConst(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        /// Cached per-row (mean, 1/std) from the forward pass.
        stats: Vec<(f64, f64)>,
    },
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    /// Mean over each consecutive group of `group` rows.
    MeanPoolRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    /// Binary cross-entropy with logits against a detached target,
    /// elementwise. Stable for saturated logits.
    BceLogits { logits: Var, target: Var },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
}

/// Convolution geometry for [`Tape::im2col`]. Input is `(c_in, h * w)`;
/// the column matrix is `(c_in * k * k, h_out * w_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient-tracked input (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Detached value; gradients never flow into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), v, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        let ng = self.needs(a);
        self.push(Op::MulScalar(a, c), v, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a);
        self.push(Op::Transpose(a), v, ng)
    }

    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        debug_assert_eq!(self.shape(a).1, self.shape(row).1);
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRowVec(a, row), v, ng)
    }

    pub fn add_col_vec(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        debug_assert_eq!(self.shape(a).0, self.shape(col).0);
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        let ng = self.needs(a) || self.needs(col);
        self.push(Op::AddColVec(a, col), v, ng)
    }

    pub fn mul_row_vec(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::MulRowVec(a, row), v, ng)
    }

    pub fn mul_col_vec(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = &self.nodes[a.0].value * &self.nodes[col.0].value;
        let ng = self.needs(a) || self.needs(col);
        self.push(Op::MulColVec(a, col), v, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), v, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a);
        self.push(Op::Abs(a), v, ng)
    }

    /// Elementwise power with a constant exponent `p >= 1`.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        assert!(p >= 1.0, "pow_const requires exponent >= 1");
        let v = self.nodes[a.0].value.mapv(|x| x.powf(p));
        let ng = self.needs(a);
        self.push(Op::PowConst(a, p), v, ng)
    }

    /// Row-wise softmax. `-inf` entries get exactly zero probability; rows
    /// must keep at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(&self.nodes[a.0].value);
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        let ng = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), v, ng)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let d = x.ncols() as f64;
        let mut stats = Vec::with_capacity(x.nrows());
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            row.mapv_inplace(|x| (x - mean) * inv_std);
        }
        let ng = self.needs(a);
        self.push(Op::LayerNormRows { x: a, stats }, v, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.needs(a);
        self.push(Op::SumAll(a), v, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), v, ng)
    }

    /// `(N, M) -> (N, 1)` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x
            .sum_axis(Axis(1))
            .into_shape_with_order((x.nrows(), 1))
            .unwrap();
        let ng = self.needs(a);
        self.push(Op::RowSum(a), v, ng)
    }

    /// `(G * group, D) -> (G, D)`, averaging each consecutive block of rows.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(group > 0 && x.nrows() % group == 0);
        let g = x.nrows() / group;
        let mut v = Array2::zeros((g, x.ncols()));
        for i in 0..g {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            v.row_mut(i).assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        let ng = self.needs(a);
        self.push(Op::MeanPoolRows(a, group), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        let ng = self.needs(a);
        self.push(Op::SliceRows(a, r0), v, ng)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, c0), v, ng)
    }

    /// Output row `i` = input row `idx[i]`. Duplicate indices accumulate in
    /// the backward pass.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((idx.len(), x.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).assign(&x.row(j));
        }
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, idx.to_vec()), v, ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((x.nrows(), idx.len()));
        for (i, &j) in idx.iter().enumerate() {
            v.column_mut(i).assign(&x.column(j));
        }
        let ng = self.needs(a);
        self.push(Op::GatherCols(a, idx.to_vec()), v, ng)
    }

    /// Elementwise binary cross-entropy with logits; `target` should be a
    /// detached constant in `[0, 1]`.
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Var {
        let x = &self.nodes[logits.0].value;
        let t = &self.nodes[target.0].value;
        debug_assert_eq!(x.dim(), t.dim());
        let mut v = Array2::zeros(x.dim());
        ndarray::Zip::from(&mut v).and(x).and(t).for_each(|o, &x, &t| {
            *o = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        });
        let ng = self.needs(logits);
        self.push(Op::BceLogits { logits, target }, v, ng)
    }

    /// Unfolds `(c_in, h * w)` into the convolution column matrix for `geom`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let inp = &self.nodes[x.0].value;
        assert_eq!(inp.dim(), (geom.c_in, geom.h * geom.w), "im2col input shape");
        let (ho, wo) = geom.out_hw();
        let k = geom.k;
        let mut v = Array2::zeros((geom.c_in * k * k, ho * wo));
        for c in 0..geom.c_in {
            for kr in 0..k {
                for kc in 0..k {
                    let row = (c * k + kr) * k + kc;
                    for ro in 0..ho {
                        for co in 0..wo {
                            let r = (ro * geom.stride + kr) as isize - geom.pad as isize;
                            let cc = (co * geom.stride + kc) as isize - geom.pad as isize;
                            if r >= 0 && (r as usize) < geom.h && cc >= 0 && (cc as usize) < geom.w
                            {
                                v[[row, ro * wo + co]] = inp[[c, r as usize * geom.w + cc as usize]];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::Im2Col { x, geom }, v, ng)
    }

    /// Runs the reverse pass from a scalar `(1, 1)` loss node. Returns a
    /// gradient lookup for leaves; call [`Tape::take_grad`] per variable.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            // Re-borrow per arm; each arm only touches its own inputs.
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc(&mut grads, a, g.clone());
                    self.acc(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc(&mut grads, a, g.clone());
                    self.acc(&mut grads, b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, b, gb);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = &self.nodes[b.0].value;
                    let ga = &g / bv;
                    let gb = -&g * &self.nodes[a.0].value / (bv * bv);
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, b, gb);
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.acc(&mut grads, a, g);
                }
                Op::MulScalar(a, c) => {
                    let (a, c) = (*a, *c);
                    self.acc(&mut grads, a, g * c);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.acc(&mut grads, a, g.t().to_owned());
                }
                Op::AddRowVec(a, row) => {
                    let (a, row) = (*a, *row);
                    let grow = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .unwrap();
                    self.acc(&mut grads, a, g);
                    self.acc(&mut grads, row, grow);
                }
                Op::AddColVec(a, col) => {
                    let (a, col) = (*a, *col);
                    let gcol = g
                        .sum_axis(Axis(1))
                        .into_shape_with_order((g.nrows(), 1))
                        .unwrap();
                    self.acc(&mut grads, a, g);
                    self.acc(&mut grads, col, gcol);
                }
                Op::MulRowVec(a, row) => {
                    let (a, row) = (*a, *row);
                    let ga = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .unwrap();
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, row, grow);
                }
                Op::MulColVec(a, col) => {
                    let (a, col) = (*a, *col);
                    let ga = &g * &self.nodes[col.0].value;
                    let gcol = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .into_shape_with_order((g.nrows(), 1))
                        .unwrap();
                    self.acc(&mut grads, a, ga);
                    self.acc(&mut grads, col, gcol);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let ga = &g * y * &(1.0 - y);
                    self.acc(&mut grads, a, ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.acc(&mut grads, a, &g * &mask);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let ga = &g * &self.nodes[i].value;
                    self.acc(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let ga = &g * &(0.5 / &self.nodes[i].value);
                    self.acc(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.acc(&mut grads, a, &g * &sign);
                }
                Op::PowConst(a, p) => {
                    let (a, p) = (*a, *p);
                    let ga = &g * &self.nodes[a.0].value.mapv(|x| p * x.powf(p - 1.0));
                    self.acc(&mut grads, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let p = &self.nodes[i].value;
                    let mut ga = &g * p;
                    for (mut row, (grow, prow)) in
                        ga.rows_mut().into_iter().zip(g.rows().into_iter().zip(p.rows()))
                    {
                        let dot: f64 = grow
                            .iter()
                            .zip(prow.iter())
                            .map(|(gg, pp)| gg * pp)
                            .sum();
                        ndarray::Zip::from(&mut row).and(&prow).for_each(|r, &pp| {
                            *r -= dot * pp;
                        });
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let p = self.nodes[i].value.mapv(f64::exp);
                    let mut ga = g.clone();
                    for (mut row, (grow, prow)) in
                        ga.rows_mut().into_iter().zip(g.rows().into_iter().zip(p.rows()))
                    {
                        let gsum: f64 = grow.sum();
                        ndarray::Zip::from(&mut row).and(&prow).for_each(|r, &pp| {
                            *r -= gsum * pp;
                        });
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::LayerNormRows { x, stats, .. } => {
                    let x = *x;
                    let stats = stats.clone();
                    let y = &self.nodes[i].value;
                    let d = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for (r, (mut out, (grow, yrow))) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(g.rows().into_iter().zip(y.rows()))
                        .enumerate()
                    {
                        let (_, inv_std) = stats[r];
                        let gmean: f64 = grow.sum() / d;
                        let gydot: f64 =
                            grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for (o, (&gg, &yy)) in
                            out.iter_mut().zip(grow.iter().zip(yrow.iter()))
                        {
                            *o = inv_std * (gg - gmean - yy * gydot);
                        }
                    }
                    self.acc(&mut grads, x, ga);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    self.acc(&mut grads, a, ga);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len() as f64;
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]] / n);
                    self.acc(&mut grads, a, ga);
                }
                Op::RowSum(a) => {
                    let a = *a;
                    let dim = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for (mut row, gr) in ga.rows_mut().into_iter().zip(g.rows()) {
                        row.fill(gr[0]);
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::MeanPoolRows(a, group) => {
                    let (a, group) = (*a, *group);
                    let dim = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for (gi, grow) in g.rows().into_iter().enumerate() {
                        for r in 0..group {
                            let mut row = ga.row_mut(gi * group + r);
                            row.assign(&(&grow / group as f64));
                        }
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut r0 = 0;
                    for p in parts {
                        let nr = self.nodes[p.0].value.nrows();
                        let gp = g.slice(s![r0..r0 + nr, ..]).to_owned();
                        self.acc(&mut grads, p, gp);
                        r0 += nr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut c0 = 0;
                    for p in parts {
                        let nc = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., c0..c0 + nc]).to_owned();
                        self.acc(&mut grads, p, gp);
                        c0 += nc;
                    }
                }
                Op::SliceRows(a, r0) => {
                    let (a, r0) = (*a, *r0);
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    ga.slice_mut(s![r0..r0 + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, a, ga);
                }
                Op::SliceCols(a, c0) => {
                    let (a, c0) = (*a, *c0);
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    ga.slice_mut(s![.., c0..c0 + g.ncols()]).assign(&g);
                    self.acc(&mut grads, a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i2, &j) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(j);
                        row += &g.row(i2);
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (a, idx) = (*a, idx.clone());
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i2, &j) in idx.iter().enumerate() {
                        let mut col = ga.column_mut(j);
                        col += &g.column(i2);
                    }
                    self.acc(&mut grads, a, ga);
                }
                Op::BceLogits { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let x = &self.nodes[logits.0].value;
                    let t = &self.nodes[target.0].value;
                    let mut ga = Array2::zeros(x.dim());
                    ndarray::Zip::from(&mut ga).and(x).and(t).and(&g).for_each(
                        |o, &x, &t, &gg| {
                            *o = gg * (sigmoid(x) - t);
                        },
                    );
                    self.acc(&mut grads, logits, ga);
                }
                Op::Im2Col { x, geom } => {
                    let (x, geom) = (*x, *geom);
                    let (ho, wo) = geom.out_hw();
                    let k = geom.k;
                    let mut ga = Array2::zeros((geom.c_in, geom.h * geom.w));
                    for c in 0..geom.c_in {
                        for kr in 0..k {
                            for kc in 0..k {
                                let row = (c * k + kr) * k + kc;
                                for ro in 0..ho {
                                    for co in 0..wo {
                                        let r =
                                            (ro * geom.stride + kr) as isize - geom.pad as isize;
                                        let cc =
                                            (co * geom.stride + kc) as isize - geom.pad as isize;
                                        if r >= 0
                                            && (r as usize) < geom.h
                                            && cc >= 0
                                            && (cc as usize) < geom.w
                                        {
                                            ga[[c, r as usize * geom.w + cc as usize]] +=
                                                g[[row, ro * wo + co]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, x, ga);
                }
            }
        }

        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        debug_assert!(max.is_finite(), "softmax row with no finite entry");
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    v
}
