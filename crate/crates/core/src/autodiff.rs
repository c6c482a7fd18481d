//! Minimal reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape records dense f64 tensors and the handful of operations the
//! surrogate models and losses need: affine maps, ReLU and scaled-sine
//! activations, elementwise arithmetic, reductions, branch/trunk fusion
//! products, fixed linear stencils, index gathers, and weighted
//! squared-error reductions. Forward values are computed eagerly as ops
//! are recorded; `backward` replays the tape in reverse and accumulates
//! exact gradients into every node it reaches.
//!
//! Graphs are rebuilt per step. A tape is single-threaded; independent
//! tapes (one per sample) may run on separate threads.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse linear map with exactly eight coefficients per output row, the
/// shape of all trilinear element-center stencils. Every row applies the
/// same coefficient pattern to its own set of input indices.
#[derive(Debug, Clone)]
pub struct LinearStencil {
    pub input_len: usize,
    pub coeffs: [f64; 8],
    pub rows: Vec<[u32; 8]>,
}

impl LinearStencil {
    /// Dense application, the non-tape evaluation path.
    pub fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.input_len);
        debug_assert_eq!(out.len(), self.rows.len());
        for (o, cols) in out.iter_mut().zip(&self.rows) {
            let mut acc = 0.0;
            for c in 0..8 {
                acc += self.coeffs[c] * input[cols[c] as usize];
            }
            *o = acc;
        }
    }

    /// Transpose application: accumulates `coeffs^T * seed` into `out`.
    pub fn apply_transpose(&self, seed: &[f64], out: &mut [f64]) {
        debug_assert_eq!(seed.len(), self.rows.len());
        debug_assert_eq!(out.len(), self.input_len);
        for (s, cols) in seed.iter().zip(&self.rows) {
            for c in 0..8 {
                out[cols[c] as usize] += self.coeffs[c] * s;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    /// out = W x + b, applied to each row when x is a matrix.
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sine { x: Var, omega0: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Mean { x: Var },
    /// out[q,m] = vec[m] * mat[q,m]
    RowMul { vec: Var, mat: Var },
    /// out[q,h] = sum_m mat[q, h*p + m]
    HeadSum { mat: Var, heads: usize },
    /// out[q,h] = sum_m vec[h*p+m] * mat[q, h*p+m]
    DotFusion { vec: Var, mat: Var, heads: usize },
    /// out[q] = mat[q, col]
    Column { mat: Var, col: usize },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Stencil { x: Var, stencil: Arc<LinearStencil> },
    /// out = sum_i weights[i] * (pred[i] - target[i])^2
    WeightedSse {
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Work threshold below which affine kernels stay single-threaded.
const PAR_FLOPS: usize = 1 << 18;

/// A dynamically recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf tensors flagged trainable, in creation order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.values.len() != 1 {
            return Err(Error::Usage(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    /// Accumulated gradient, or all zeros if backward never reached this node.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].values.len()],
        }
    }

    /// Whether a node is a trainable leaf.
    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, trainable: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::shape_mismatch(
                "leaf",
                format_args!("shape {:?} vs {} values", shape, values.len()),
            ));
        }
        let v = self.push(Op::Leaf { trainable }, shape.to_vec(), values);
        if trainable {
            self.params.push(v);
        }
        Ok(v)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(Op::Leaf { trainable: false }, vec![1], vec![value])
    }

    /// `W x + b`. `x` may be a vector `[n]` or a matrix `[k, n]` of row
    /// vectors; the map is applied to each row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (k, n, vector_input) = match self.shape(x) {
            [n] => (1usize, *n, true),
            [k, n] => (*k, *n, false),
            s => {
                return Err(Error::shape_mismatch(
                    "affine",
                    format_args!("input must be 1-D or 2-D, got {s:?}"),
                ))
            }
        };
        let (m, wn) = match self.shape(w) {
            [m, wn] => (*m, *wn),
            s => {
                return Err(Error::shape_mismatch(
                    "affine",
                    format_args!("weight must be 2-D, got {s:?}"),
                ))
            }
        };
        if wn != n || self.shape(b) != [m] {
            return Err(Error::shape_mismatch(
                "affine",
                format_args!(
                    "weight {m}x{wn}, bias {:?}, input ..x{n}",
                    self.shape(b)
                ),
            ));
        }
        let mut out = vec![0.0; k * m];
        affine_forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[b.0].values,
            k,
            n,
            m,
            &mut out,
        );
        let shape = if vector_input { vec![m] } else { vec![k, m] };
        Ok(self.push(Op::Affine { x, w, b }, shape, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu { x }, shape, values)
    }

    /// `sin(omega0 * x)` elementwise.
    pub fn sine(&mut self, x: Var, omega0: f64) -> Result<Var> {
        if !(omega0 > 0.0) {
            return Err(Error::Config(format!(
                "sine frequency must be positive, got {omega0}"
            )));
        }
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| (omega0 * v).sin())
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Sine { x, omega0 }, shape, values))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape_mismatch(
                name,
                format_args!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x + y
        });
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, values))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub")?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x - y
        });
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub { a, b }, shape, values))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x * y
        });
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, values))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values = self.nodes[x.0].values.iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x, c }, shape, values)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].values.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![total])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].values.len().max(1);
        let total: f64 = self.nodes[x.0].values.iter().sum();
        self.push(Op::Mean { x }, vec![1], vec![total / n as f64])
    }

    /// Broadcast elementwise product of a vector against each matrix row.
    pub fn row_mul(&mut self, vec: Var, mat: Var) -> Result<Var> {
        let p = match self.shape(vec) {
            [p] => *p,
            s => {
                return Err(Error::shape_mismatch(
                    "row_mul",
                    format_args!("vec must be 1-D, got {s:?}"),
                ))
            }
        };
        let (k, mp) = match self.shape(mat) {
            [k, mp] => (*k, *mp),
            s => {
                return Err(Error::shape_mismatch(
                    "row_mul",
                    format_args!("mat must be 2-D, got {s:?}"),
                ))
            }
        };
        if mp != p {
            return Err(Error::shape_mismatch(
                "row_mul",
                format_args!("vec len {p} vs mat row len {mp}"),
            ));
        }
        let v = &self.nodes[vec.0].values;
        let m = &self.nodes[mat.0].values;
        let mut out = vec![0.0; k * p];
        for q in 0..k {
            for j in 0..p {
                out[q * p + j] = v[j] * m[q * p + j];
            }
        }
        Ok(self.push(Op::RowMul { vec, mat }, vec![k, p], out))
    }

    /// Per-row sums over `heads` contiguous chunks: `[k, heads*p] -> [k, heads]`.
    pub fn head_sum(&mut self, mat: Var, heads: usize) -> Result<Var> {
        let (k, w) = match self.shape(mat) {
            [k, w] => (*k, *w),
            s => {
                return Err(Error::shape_mismatch(
                    "head_sum",
                    format_args!("mat must be 2-D, got {s:?}"),
                ))
            }
        };
        if heads == 0 || w % heads != 0 {
            return Err(Error::shape_mismatch(
                "head_sum",
                format_args!("row length {w} not divisible by {heads} heads"),
            ));
        }
        let p = w / heads;
        let m = &self.nodes[mat.0].values;
        let mut out = vec![0.0; k * heads];
        for q in 0..k {
            for hd in 0..heads {
                out[q * heads + hd] = m[q * w + hd * p..q * w + (hd + 1) * p].iter().sum();
            }
        }
        Ok(self.push(Op::HeadSum { mat, heads }, vec![k, heads], out))
    }

    /// Per-head dot product of a broadcast vector with each matrix row:
    /// `out[q,h] = sum_m vec[h*p+m] * mat[q,h*p+m]`.
    pub fn dot_fusion(&mut self, vec: Var, mat: Var, heads: usize) -> Result<Var> {
        let w = match self.shape(vec) {
            [w] => *w,
            s => {
                return Err(Error::shape_mismatch(
                    "dot_fusion",
                    format_args!("vec must be 1-D, got {s:?}"),
                ))
            }
        };
        let (k, mw) = match self.shape(mat) {
            [k, mw] => (*k, *mw),
            s => {
                return Err(Error::shape_mismatch(
                    "dot_fusion",
                    format_args!("mat must be 2-D, got {s:?}"),
                ))
            }
        };
        if mw != w || heads == 0 || w % heads != 0 {
            return Err(Error::shape_mismatch(
                "dot_fusion",
                format_args!("vec len {w}, mat row len {mw}, heads {heads}"),
            ));
        }
        let p = w / heads;
        let v = &self.nodes[vec.0].values;
        let m = &self.nodes[mat.0].values;
        let mut out = vec![0.0; k * heads];
        for q in 0..k {
            for hd in 0..heads {
                let mut acc = 0.0;
                for j in hd * p..(hd + 1) * p {
                    acc += v[j] * m[q * w + j];
                }
                out[q * heads + hd] = acc;
            }
        }
        Ok(self.push(Op::DotFusion { vec, mat, heads }, vec![k, heads], out))
    }

    /// Extracts one column of a matrix as a vector.
    pub fn column(&mut self, mat: Var, col: usize) -> Result<Var> {
        let (k, m) = match self.shape(mat) {
            [k, m] => (*k, *m),
            s => {
                return Err(Error::shape_mismatch(
                    "column",
                    format_args!("mat must be 2-D, got {s:?}"),
                ))
            }
        };
        if col >= m {
            return Err(Error::shape_mismatch(
                "column",
                format_args!("column {col} out of {m}"),
            ));
        }
        let src = &self.nodes[mat.0].values;
        let out: Vec<f64> = (0..k).map(|q| src[q * m + col]).collect();
        Ok(self.push(Op::Column { mat, col }, vec![k], out))
    }

    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let len = self.nodes[x.0].values.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::shape_mismatch(
                "gather",
                format_args!("index {bad} out of {len}"),
            ));
        }
        let src = &self.nodes[x.0].values;
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let n = idx.len();
        Ok(self.push(Op::Gather { x, idx }, vec![n], out))
    }

    /// Applies a fixed linear stencil to a flat vector.
    pub fn stencil(&mut self, x: Var, stencil: Arc<LinearStencil>) -> Result<Var> {
        if self.nodes[x.0].values.len() != stencil.input_len {
            return Err(Error::shape_mismatch(
                "stencil",
                format_args!(
                    "input len {} vs stencil expects {}",
                    self.nodes[x.0].values.len(),
                    stencil.input_len
                ),
            ));
        }
        let mut out = vec![0.0; stencil.rows.len()];
        stencil.apply(&self.nodes[x.0].values, &mut out);
        let n = out.len();
        Ok(self.push(Op::Stencil { x, stencil }, vec![n], out))
    }

    /// Weighted squared-error reduction `sum_i w[i] (pred[i] - target[i])^2`.
    /// Targets and weights are fixed data, not tape nodes.
    pub fn weighted_sse(
        &mut self,
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
    ) -> Result<Var> {
        let n = self.nodes[pred.0].values.len();
        if target.len() != n || weights.len() != n {
            return Err(Error::shape_mismatch(
                "weighted_sse",
                format_args!(
                    "pred {n}, target {}, weights {}",
                    target.len(),
                    weights.len()
                ),
            ));
        }
        let p = &self.nodes[pred.0].values;
        let mut acc = 0.0;
        for i in 0..n {
            let d = p[i] - target[i];
            acc += weights[i] * d * d;
        }
        Ok(self.push(
            Op::WeightedSse {
                pred,
                target,
                weights,
            },
            vec![1],
            vec![acc],
        ))
    }

    /// Reverse pass from a scalar loss. Each reachable node's gradient
    /// accumulator receives its adjoint; repeated calls without
    /// `reset_grads` keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(go) = adj[id].take() else { continue };
            propagate(&self.nodes, id, &go, &mut adj);
            let node = &mut self.nodes[id];
            let g = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.values.len()]);
            for (gi, &goi) in g.iter_mut().zip(&go) {
                *gi += goi;
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn affine_forward(x: &[f64], w: &[f64], b: &[f64], k: usize, n: usize, m: usize, out: &mut [f64]) {
    let row = |o: &mut [f64], q: usize| {
        let xr = &x[q * n..(q + 1) * n];
        for j in 0..m {
            let wr = &w[j * n..(j + 1) * n];
            let mut acc = b[j];
            for i in 0..n {
                acc += wr[i] * xr[i];
            }
            o[j] = acc;
        }
    };
    if k * m * n >= PAR_FLOPS && k > 1 {
        out.par_chunks_mut(m)
            .enumerate()
            .for_each(|(q, o)| row(o, q));
    } else {
        for (q, o) in out.chunks_mut(m).enumerate() {
            row(o, q);
        }
    }
}

fn add_to(adj: &mut Vec<Option<Vec<f64>>>, v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, go: &[f64], adj: &mut Vec<Option<Vec<f64>>>) {
    let vals = |v: Var| -> &[f64] { &nodes[v.0].values };
    let len = |v: Var| nodes[v.0].values.len();
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Affine { x, w, b } => {
            let n = match nodes[x.0].shape.as_slice() {
                [n] => *n,
                [_, n] => *n,
                _ => unreachable!(),
            };
            let k = len(*x) / n;
            let m = len(*b);
            let xv = vals(*x);
            let wv = vals(*w);
            add_to(adj, *b, m, |db| {
                for q in 0..k {
                    for j in 0..m {
                        db[j] += go[q * m + j];
                    }
                }
            });
            add_to(adj, *w, m * n, |dw| {
                let accumulate = |dwr: &mut [f64], j: usize| {
                    for q in 0..k {
                        let coef = go[q * m + j];
                        if coef != 0.0 {
                            let xr = &xv[q * n..(q + 1) * n];
                            for i in 0..n {
                                dwr[i] += coef * xr[i];
                            }
                        }
                    }
                };
                if k * m * n >= PAR_FLOPS && m > 1 {
                    dw.par_chunks_mut(n)
                        .enumerate()
                        .for_each(|(j, dwr)| accumulate(dwr, j));
                } else {
                    for (j, dwr) in dw.chunks_mut(n).enumerate() {
                        accumulate(dwr, j);
                    }
                }
            });
            add_to(adj, *x, k * n, |dx| {
                let accumulate = |dxr: &mut [f64], q: usize| {
                    for j in 0..m {
                        let coef = go[q * m + j];
                        if coef != 0.0 {
                            let wr = &wv[j * n..(j + 1) * n];
                            for i in 0..n {
                                dxr[i] += coef * wr[i];
                            }
                        }
                    }
                };
                if k * m * n >= PAR_FLOPS && k > 1 {
                    dx.par_chunks_mut(n)
                        .enumerate()
                        .for_each(|(q, dxr)| accumulate(dxr, q));
                } else {
                    for (q, dxr) in dx.chunks_mut(n).enumerate() {
                        accumulate(dxr, q);
                    }
                }
            });
        }
        Op::Relu { x } => {
            let xv = vals(*x);
            add_to(adj, *x, xv.len(), |dx| {
                for i in 0..xv.len() {
                    if xv[i] > 0.0 {
                        dx[i] += go[i];
                    }
                }
            });
        }
        Op::Sine { x, omega0 } => {
            let xv = vals(*x);
            let w0 = *omega0;
            add_to(adj, *x, xv.len(), |dx| {
                for i in 0..xv.len() {
                    dx[i] += go[i] * w0 * (w0 * xv[i]).cos();
                }
            });
        }
        Op::Add { a, b } => {
            add_to(adj, *a, go.len(), |da| {
                for i in 0..go.len() {
                    da[i] += go[i];
                }
            });
            add_to(adj, *b, go.len(), |db| {
                for i in 0..go.len() {
                    db[i] += go[i];
                }
            });
        }
        Op::Sub { a, b } => {
            add_to(adj, *a, go.len(), |da| {
                for i in 0..go.len() {
                    da[i] += go[i];
                }
            });
            add_to(adj, *b, go.len(), |db| {
                for i in 0..go.len() {
                    db[i] -= go[i];
                }
            });
        }
        Op::Mul { a, b } => {
            let av = vals(*a);
            let bv = vals(*b);
            add_to(adj, *a, av.len(), |da| {
                for i in 0..go.len() {
                    da[i] += go[i] * bv[i];
                }
            });
            add_to(adj, *b, bv.len(), |db| {
                for i in 0..go.len() {
                    db[i] += go[i] * av[i];
                }
            });
        }
        Op::Scale { x, c } => {
            let c = *c;
            add_to(adj, *x, go.len(), |dx| {
                for i in 0..go.len() {
                    dx[i] += c * go[i];
                }
            });
        }
        Op::Sum { x } => {
            add_to(adj, *x, len(*x), |dx| {
                for d in dx.iter_mut() {
                    *d += go[0];
                }
            });
        }
        Op::Mean { x } => {
            let n = len(*x).max(1);
            let g = go[0] / n as f64;
            add_to(adj, *x, len(*x), |dx| {
                for d in dx.iter_mut() {
                    *d += g;
                }
            });
        }
        Op::RowMul { vec, mat } => {
            let p = len(*vec);
            let k = len(*mat) / p;
            let vv = vals(*vec);
            let mv = vals(*mat);
            add_to(adj, *vec, p, |dv| {
                for q in 0..k {
                    for j in 0..p {
                        dv[j] += go[q * p + j] * mv[q * p + j];
                    }
                }
            });
            add_to(adj, *mat, k * p, |dm| {
                for q in 0..k {
                    for j in 0..p {
                        dm[q * p + j] += go[q * p + j] * vv[j];
                    }
                }
            });
        }
        Op::HeadSum { mat, heads } => {
            let heads = *heads;
            let w = nodes[mat.0].shape[1];
            let k = nodes[mat.0].shape[0];
            let p = w / heads;
            add_to(adj, *mat, k * w, |dm| {
                for q in 0..k {
                    for hd in 0..heads {
                        let g = go[q * heads + hd];
                        for j in hd * p..(hd + 1) * p {
                            dm[q * w + j] += g;
                        }
                    }
                }
            });
        }
        Op::DotFusion { vec, mat, heads } => {
            let heads = *heads;
            let w = len(*vec);
            let k = len(*mat) / w;
            let p = w / heads;
            let vv = vals(*vec);
            let mv = vals(*mat);
            add_to(adj, *vec, w, |dv| {
                for q in 0..k {
                    for hd in 0..heads {
                        let g = go[q * heads + hd];
                        if g != 0.0 {
                            for j in hd * p..(hd + 1) * p {
                                dv[j] += g * mv[q * w + j];
                            }
                        }
                    }
                }
            });
            add_to(adj, *mat, k * w, |dm| {
                for q in 0..k {
                    for hd in 0..heads {
                        let g = go[q * heads + hd];
                        if g != 0.0 {
                            for j in hd * p..(hd + 1) * p {
                                dm[q * w + j] += g * vv[j];
                            }
                        }
                    }
                }
            });
        }
        Op::Column { mat, col } => {
            let (k, m) = (nodes[mat.0].shape[0], nodes[mat.0].shape[1]);
            let col = *col;
            add_to(adj, *mat, k * m, |dm| {
                for q in 0..k {
                    dm[q * m + col] += go[q];
                }
            });
        }
        Op::Gather { x, idx } => {
            add_to(adj, *x, len(*x), |dx| {
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += go[o];
                }
            });
        }
        Op::Stencil { x, stencil } => {
            add_to(adj, *x, stencil.input_len, |dx| {
                stencil.apply_transpose(go, dx);
            });
        }
        Op::WeightedSse {
            pred,
            target,
            weights,
        } => {
            let pv = vals(*pred);
            add_to(adj, *pred, pv.len(), |dp| {
                for i in 0..pv.len() {
                    dp[i] += 2.0 * weights[i] * (pv[i] - target[i]) * go[0];
                }
            });
        }
    }
}

/// Central finite-difference gradient verification.
///
/// `build` reconstructs the scalar function on a fresh tape from the given
/// parameter leaves. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(build: F, params: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Usage(format!(
            "finite-difference step must lie in [1e-8, 1e-4], got {eps}"
        )));
    }
    let eval = |values: &[Vec<f64>]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .zip(values)
            .map(|((shape, _), vals)| tape.leaf(shape, vals.clone(), true))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss, vars))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let (mut tape, loss, vars) = eval(&base)?;
    let loss_value = tape.scalar(loss)?;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at base point".into(),
        });
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst: f64 = 0.0;
    for (pi, (_, base_vals)) in params.iter().enumerate() {
        for j in 0..base_vals.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut shifted = base.clone();
                shifted[pi][j] += delta;
                let (t, l, _) = eval(&shifted)?;
                let v = t.scalar(l)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss perturbing param[{pi}][{j}]"),
                    });
                }
                Ok(v)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn affine_identity() {
        let mut t = Tape::new();
        let w = t
            .leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], true)
            .unwrap();
        let b = t.leaf(&[2], vec![0.0, 0.0], true).unwrap();
        let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.values(y), &[3.0, 4.0]);
    }

    #[test]
    fn affine_bias_passthrough() {
        let mut t = Tape::new();
        let w = t.leaf(&[2, 3], vec![0.0; 6], true).unwrap();
        let b = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let x = t.constant(&[3], vec![9.0, -4.0, 0.5]).unwrap();
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.values(y), &[1.0, 2.0]);
    }

    #[test]
    fn affine_shape_mismatch_reports_dims() {
        let mut t = Tape::new();
        let w = t.leaf(&[2, 3], vec![0.0; 6], true).unwrap();
        let b = t.leaf(&[2], vec![0.0; 2], true).unwrap();
        let x = t.constant(&[4], vec![0.0; 4]).unwrap();
        let err = t.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn affine_gradcheck_random_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = randvec(&mut rng, 12);
        let b = randvec(&mut rng, 4);
        let x = randvec(&mut rng, 3);
        let err = grad_check(
            |t, vars| {
                let out = t.affine(vars[2], vars[0], vars[1])?;
                Ok(t.sum(out))
            },
            &[
                (vec![4, 3], w),
                (vec![4], b),
                (vec![3], x),
            ],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn relu_and_sine_basics() {
        let mut t = Tape::new();
        let x = t.leaf(&[3], vec![-1.5, 0.0, 2.0], true).unwrap();
        let r = t.relu(x);
        assert_eq!(t.values(r), &[0.0, 0.0, 2.0]);
        let s = t.sine(x, 1.0).unwrap();
        assert!((t.values(s)[1] - 0.0).abs() < 1e-15);
        let total = t.sum(s);
        t.backward(total).unwrap();
        // d sin(x)/dx at 0 is 1.
        assert!((t.grad(x)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sine_gradcheck_high_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randvec(&mut rng, 16);
        let err = grad_check(
            |t, vars| {
                let s = t.sine(vars[0], 30.0)?;
                Ok(t.sum(s))
            },
            &[(vec![16], x)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_identity() {
        let mut t = Tape::new();
        let p = t.leaf(&[4], vec![0.5, -1.0, 2.0, 3.0], true).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(p), vec![1.0; 4]);

        let mut t = Tape::new();
        let p = t.leaf(&[3], vec![0.5, -1.0, 2.0], true).unwrap();
        let sq = t.mul(p, p).unwrap();
        let half = t.sum(sq);
        let loss = t.scale(half, 0.5);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let p = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(t.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let p = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(p), vec![2.0, 2.0]);
    }

    #[test]
    fn two_layer_relu_mlp_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = randvec(&mut rng, 5 * 3);
        let b1 = randvec(&mut rng, 5);
        let w2 = randvec(&mut rng, 2 * 5);
        let b2 = randvec(&mut rng, 2);
        let x = randvec(&mut rng, 3);
        let err = grad_check(
            |t, v| {
                let x = t.constant(&[3], x.clone())?;
                let h = t.affine(x, v[0], v[1])?;
                let h = t.relu(h);
                let o = t.affine(h, v[2], v[3])?;
                let sq = t.mul(o, o)?;
                Ok(t.sum(sq))
            },
            &[
                (vec![5, 3], w1),
                (vec![5], b1),
                (vec![2, 5], w2),
                (vec![2], b2),
            ],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn batched_affine_matches_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = randvec(&mut rng, 4 * 3);
        let b = randvec(&mut rng, 4);
        let xs = randvec(&mut rng, 6 * 3);
        let mut t = Tape::new();
        let wv = t.leaf(&[4, 3], w.clone(), true).unwrap();
        let bv = t.leaf(&[4], b.clone(), true).unwrap();
        let xv = t.constant(&[6, 3], xs.clone()).unwrap();
        let batched = t.affine(xv, wv, bv).unwrap();
        for q in 0..6 {
            let xq = t.constant(&[3], xs[q * 3..(q + 1) * 3].to_vec()).unwrap();
            let row = t.affine(xq, wv, bv).unwrap();
            for j in 0..4 {
                assert_eq!(t.values(batched)[q * 4 + j], t.values(row)[j]);
            }
        }
    }

    #[test]
    fn fusion_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vec_v = randvec(&mut rng, 6);
        let mat_v = randvec(&mut rng, 4 * 6);
        for heads in [1usize, 2, 3] {
            let err = grad_check(
                |t, v| {
                    let f = t.dot_fusion(v[0], v[1], heads)?;
                    let sq = t.mul(f, f)?;
                    Ok(t.sum(sq))
                },
                &[(vec![6], vec_v.clone()), (vec![4, 6], mat_v.clone())],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "heads={heads}: {err}");
        }
        let err = grad_check(
            |t, v| {
                let rm = t.row_mul(v[0], v[1])?;
                let hs = t.head_sum(rm, 2)?;
                let sq = t.mul(hs, hs)?;
                Ok(t.sum(sq))
            },
            &[(vec![6], vec_v), (vec![4, 6], mat_v)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dot_fusion_equals_rowmul_headsum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = randvec(&mut rng, 6);
        let m = randvec(&mut rng, 5 * 6);
        let mut t = Tape::new();
        let vv = t.constant(&[6], v.clone()).unwrap();
        let mv = t.constant(&[5, 6], m.clone()).unwrap();
        let a = t.dot_fusion(vv, mv, 3).unwrap();
        let rm = t.row_mul(vv, mv).unwrap();
        let b = t.head_sum(rm, 3).unwrap();
        for (x, y) in t.values(a).iter().zip(t.values(b)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gradient_for_unused_parameter() {
        let mut t = Tape::new();
        let used = t.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let unused = t.leaf(&[3], vec![5.0, 6.0, 7.0], true).unwrap();
        let s = t.sum(used);
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused), vec![0.0; 3]);
        assert_eq!(t.params().len(), 2);
        assert!(t.is_trainable(unused));
        assert!(!t.is_trainable(s));
    }

    #[test]
    fn backward_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p0 = randvec(&mut rng, 5);
        let (a, b) = (2.5, -1.25);

        let grads = |combine: bool| -> (Vec<f64>, Vec<f64>) {
            let mut t = Tape::new();
            let p = t.leaf(&[5], p0.clone(), true).unwrap();
            let sq = t.mul(p, p).unwrap();
            let f = t.sum(sq);
            let g = t.sum(p);
            if combine {
                let fa = t.scale(f, a);
                let gb = t.scale(g, b);
                let l = t.add(fa, gb).unwrap();
                t.backward(l).unwrap();
                (t.grad(p), vec![])
            } else {
                t.backward(f).unwrap();
                let gf = t.grad(p);
                t.reset_grads();
                t.backward(g).unwrap();
                (gf, t.grad(p))
            }
        };
        let (combined, _) = grads(true);
        let (gf, gg) = grads(false);
        for i in 0..5 {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[(vec![1], vec![3.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic: {err}");

        let err = grad_check(
            |t, v| {
                let zero = t.scale(v[0], 0.0);
                Ok(t.sum(zero))
            },
            &[(vec![4], vec![1.0, 2.0, 3.0, 4.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_rejects_bad_eps() {
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[(vec![1], vec![1.0])], 1e-2);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn primitives_gradcheck_many_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = randvec(&mut rng, 6);
            let b = randvec(&mut rng, 2);
            let x = randvec(&mut rng, 3);
            let y = randvec(&mut rng, 2);
            let target = Arc::new(randvec(&mut rng, 2));
            let weights = Arc::new(vec![0.7, 1.3]);
            let err = grad_check(
                |t, v| {
                    let h = t.affine(v[2], v[0], v[1])?;
                    let r = t.relu(h);
                    let s = t.sine(h, 30.0)?;
                    let m = t.mul(r, v[3])?;
                    let q = t.add(m, s)?;
                    let d = t.sub(q, v[3])?;
                    let sse = t.weighted_sse(d, target.clone(), weights.clone())?;
                    let mn = t.mean(d);
                    let sc = t.scale(mn, 0.5);
                    t.add(sse, sc)
                },
                &[
                    (vec![2, 3], w),
                    (vec![2], b),
                    (vec![3], x),
                    (vec![2], y),
                ],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn gather_and_column_backward() {
        let err = grad_check(
            |t, v| {
                let g = t.gather(v[0], Arc::new(vec![3, 1, 1]))?;
                let sq = t.mul(g, g)?;
                Ok(t.sum(sq))
            },
            &[(vec![4], vec![1.0, 2.0, 3.0, 4.0])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);

        let err = grad_check(
            |t, v| {
                let c = t.column(v[0], 1)?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            },
            &[(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn stencil_forward_and_gradient() {
        // 4-input, 2-row stencil with a fixed coefficient pattern.
        let st = Arc::new(LinearStencil {
            input_len: 4,
            coeffs: [0.5, -0.25, 0.125, 1.0, 0.0, 0.0, 0.0, 0.0],
            rows: vec![[0, 1, 2, 3, 0, 0, 0, 0], [3, 2, 1, 0, 0, 0, 0, 0]],
        });
        let st2 = st.clone();
        let err = grad_check(
            move |t, v| {
                let s = t.stencil(v[0], st2.clone())?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &[(vec![4], vec![1.0, -2.0, 3.0, 0.5])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);

        // Transpose consistency: assemble dense matrices both ways.
        let n_in = 4;
        let n_out = 2;
        let mut forward_mat = vec![vec![0.0; n_in]; n_out];
        for i in 0..n_in {
            let mut basis = vec![0.0; n_in];
            basis[i] = 1.0;
            let mut out = vec![0.0; n_out];
            st.apply(&basis, &mut out);
            for r in 0..n_out {
                forward_mat[r][i] = out[r];
            }
        }
        for r in 0..n_out {
            let mut seed = vec![0.0; n_out];
            seed[r] = 1.0;
            let mut back = vec![0.0; n_in];
            st.apply_transpose(&seed, &mut back);
            assert_eq!(back, forward_mat[r], "row {r} transpose mismatch");
        }
    }
}
