use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Neg,
    LogSigmoid,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis(Var, usize),
    SumAll(Var),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    NormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    NormCols {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2Rows {
        x: Var,
        norms: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        valid: Vec<bool>,
        den: Vec<f64>,
    },
    MaskedMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        cols: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// An eagerly evaluated computation tape.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for the backward pass and every node is visited
/// exactly once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    param_cache: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity and batch norm uses running statistics.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_cache: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            buffer_updates: Vec::new(),
        }
    }

    /// Training-mode graph; `seed` drives every dropout mask drawn on it.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary_op(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let t = self.tracked(x);
        self.push(value, op, t)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Tracked leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let tracked = store.is_trainable(id);
        let v = self.push(value, Op::Param, tracked);
        self.param_cache.insert(id, v);
        if tracked {
            self.params.push((v, id));
        }
        v
    }

    pub(crate) fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Running-statistic updates produced by training-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(data, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(data, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(data, Op::Mul(a, b), t)
    }

    /// Adds a vector along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(x).row_len();
        assert_eq!(self.value(bias).len(), n, "add_bias: width mismatch");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(&b).for_each(|(o, bi)| *o += bi);
        }
        let t = self.tracked(x) || self.tracked(bias);
        self.push(out, Op::AddBias(x, bias), t)
    }

    /// Multiplies the trailing axis of `x` elementwise by a vector.
    pub fn mul_bias(&mut self, x: Var, scale: Var) -> Var {
        let n = self.value(x).row_len();
        assert_eq!(self.value(scale).len(), n, "mul_bias: width mismatch");
        let s = self.value(scale).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(&s).for_each(|(o, si)| *o *= si);
        }
        let t = self.tracked(x) || self.tracked(scale);
        self.push(out, Op::MulBias(x, scale), t)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.unary_op(x, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.unary_op(x, out, Op::AddScalar(x))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-D operands");
        let a3 = self.reshape(a, &[1, sa[0], sa[1]]);
        let b3 = self.reshape(b, &[1, sb[0], sb[1]]);
        let c = self.bmm(a3, b3, false, false);
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched product over a shared leading axis, optionally transposing either operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm expects 3-D operands");
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        let g = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner dimension mismatch {sa:?} x {sb:?}");
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let ast = if trans_a { (1, m) } else { (k, 1) };
        let bst = if trans_b { (1, k) } else { (n, 1) };
        for gi in 0..g {
            gemm(
                m,
                k,
                n,
                1.0,
                &ad[gi * m * k..(gi + 1) * m * k],
                ast,
                &bd[gi * k * n..(gi + 1) * k * n],
                bst,
                0.0,
                &mut out[gi * m * n..(gi + 1) * m * n],
                (n, 1),
            );
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            },
            t,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.unary_op(x, value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let src = self.value(x);
        assert_eq!(axes.len(), src.ndim(), "permute: rank mismatch");
        let (shape, data) = kernels::permute(src.data(), src.shape(), axes);
        self.unary_op(x, Tensor::from_parts(shape, data), Op::Permute(x, axes.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: shape mismatch off-axis");
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = xs.iter().any(|&x| self.tracked(x));
        self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), t)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.unary_op(
            x,
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x, axis, start },
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.unary_op(x, Tensor::from_parts(out_shape, data), Op::SumAxis(x, axis))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.unary_op(x, Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Gelu => kernels::gelu,
            Unary::Relu => |v| v.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Neg => |v| -v,
            Unary::LogSigmoid => kernels::log_sigmoid,
        };
        let out = self.value(x).map(f);
        self.unary_op(x, out, Op::Unary(x, kind))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let out = self.value(x).map(|v| v.max(lo));
        self.unary_op(x, out, Op::ClampMin(x, lo))
    }

    /// Zero-mean, unit-variance normalization of each trailing-axis row.
    pub fn norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let n = src.row_len();
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.num_rows());
        for row in out.data_mut().chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.unary_op(x, out, Op::NormRows { x, inv_std })
    }

    /// Column-wise normalization of a `[rows, cols]` matrix with batch (biased) statistics.
    pub fn norm_cols(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let src = self.value(x);
        assert_eq!(src.ndim(), 2, "norm_cols expects a matrix");
        let (r, c) = (src.dim(0), src.dim(1));
        let d = src.data();
        let mut mean = vec![0.0; c];
        for row in d.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in d.chunks_exact(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = src.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let v = self.unary_op(x, out, Op::NormCols { x, inv_std });
        (v, mean, var)
    }

    /// Softmax over the trailing axis. Entries with `mask[i] == true` get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let src = self.value(x);
        let n = src.row_len();
        if let Some(m) = mask {
            assert_eq!(m.len(), src.len(), "softmax: mask size mismatch");
        }
        let mut out = src.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let masked = |j: usize| mask.is_some_and(|m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if !masked(j) {
                    max = max.max(*v);
                }
            }
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if masked(j) || !max.is_finite() {
                    *v = 0.0;
                } else {
                    *v = (*v - max).exp();
                    sum += *v;
                }
            }
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        self.unary_op(x, out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let n = out.row_len();
        for row in out.data_mut().chunks_exact_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary_op(x, out, Op::LogSoftmax(x))
    }

    /// Scales each trailing-axis row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.row_len();
        let mut norms = Vec::with_capacity(out.num_rows());
        for (i, row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has norm {norm}; cosine similarity is undefined"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.unary_op(x, out, Op::L2Rows { x, norms }))
    }

    /// Masked mean over the time axis of `[B, T, D]`:
    /// `sum_t m[b,t] x[b,t] / max(sum_t m[b,t], 1e-6)` with `m = 1[t < len_b]`.
    pub fn masked_mean_time(&mut self, x: Var, lengths: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "masked_mean_time expects [B, T, D]");
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(lengths.len(), b, "masked_mean_time: lengths size");
        let src = self.value(x).data();
        let mut valid = vec![false; b * t];
        let mut den = vec![0.0; b];
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let count = lengths[bi].min(t);
            for ti in 0..count {
                valid[bi * t + ti] = true;
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * d..(bi + 1) * d]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, v)| *o += v);
            }
            den[bi] = (count as f64).max(1e-6);
            out[bi * d..(bi + 1) * d]
                .iter_mut()
                .for_each(|o| *o /= den[bi]);
        }
        self.unary_op(
            x,
            Tensor::from_parts(vec![b, d], out),
            Op::MaskedMean { x, valid, den },
        )
    }

    /// Masked max over the time axis of `[B, T, D]`; every example needs a valid step.
    pub fn masked_max_time(&mut self, x: Var, lengths: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "masked_max_time expects [B, T, D]");
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            let count = lengths[bi].min(t);
            assert!(count > 0, "masked_max_time: example {bi} is all padding");
            for ti in 0..count {
                for di in 0..d {
                    let idx = (bi * t + ti) * d + di;
                    if src[idx] > out[bi * d + di] {
                        out[bi * d + di] = src[idx];
                        argmax[bi * d + di] = idx;
                    }
                }
            }
        }
        self.unary_op(
            x,
            Tensor::from_parts(vec![b, d], out),
            Op::MaskedMax { x, argmax },
        )
    }

    /// 1-D convolution of `[B, Cin, T]` with `[Cout, Cin, K]` and symmetric zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 3 && ws.len() == 3, "conv1d expects 3-D input and weight");
        let (b, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, cin2, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, cin2, "conv1d: channel mismatch");
        assert!(t + 2 * pad >= k, "conv1d: kernel longer than padded input");
        let tout = t + 2 * pad - k + 1;
        let ck = cin * k;
        let src = self.value(x).data();
        let mut cols = vec![0.0; b * tout * ck];
        for bi in 0..b {
            for to in 0..tout {
                let row = &mut cols[(bi * tout + to) * ck..(bi * tout + to + 1) * ck];
                for ci in 0..cin {
                    for ki in 0..k {
                        let ti = to + ki;
                        if ti >= pad && ti - pad < t {
                            row[ci * k + ki] = src[(bi * cin + ci) * t + ti - pad];
                        }
                    }
                }
            }
        }
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * cout * tout];
        for bi in 0..b {
            gemm(
                cout,
                ck,
                tout,
                1.0,
                wd,
                (ck, 1),
                &cols[bi * tout * ck..(bi + 1) * tout * ck],
                (1, ck),
                0.0,
                &mut out[bi * cout * tout..(bi + 1) * cout * tout],
                (tout, 1),
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            assert_eq!(bd.len(), cout, "conv1d: bias size");
            for bi in 0..b {
                for o in 0..cout {
                    let base = (bi * cout + o) * tout;
                    out[base..base + tout].iter_mut().for_each(|v| *v += bd[o]);
                }
            }
        }
        let tr = self.tracked(x) || self.tracked(w) || bias.is_some_and(|bv| self.tracked(bv));
        self.push(
            Tensor::from_parts(vec![b, cout, tout], out),
            Op::Conv1d {
                x,
                w,
                b: bias,
                pad,
                cols,
            },
            tr,
        )
    }

    /// Inverted dropout; the identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.input(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            per_node: grads,
            params: self.params.clone(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if let Some(s) = self.slot(grads, v) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        s[j] += g[j] * bv[j];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for j in 0..g.len() {
                        s[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g);
                let n = self.value(*b).len();
                if let Some(s) = self.slot(grads, *b) {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
            Op::MulBias(x, sc) => {
                let n = self.value(*sc).len();
                let scv = self.value(*sc).data();
                if let Some(s) = self.slot(grads, *x) {
                    for (srow, grow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            srow[j] += grow[j] * scv[j];
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *sc) {
                    for (xrow, grow) in xv.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g),
            Op::Bmm {
                a,
                b,
                trans_a,
                trans_b,
            } => self.bmm_backward(*a, *b, *trans_a, *trans_b, node.value.shape(), g, grads),
            Op::Permute(x, axes) => {
                let (_, back) = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                self.acc(grads, *x, &back);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if let Some(s) = self.slot(grads, x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            s[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        s[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = kernels::split_axis(self.shape(*x), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            s[(o * n + j) * inner..(o * n + j + 1) * inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        let d = match kind {
                            Unary::Gelu => kernels::gelu_grad(xv[j]),
                            Unary::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Exp => out[j],
                            Unary::Log => 1.0 / xv[j],
                            Unary::Abs => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else if xv[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Neg => -1.0,
                            Unary::LogSigmoid => kernels::sigmoid(-xv[j]),
                        };
                        s[j] += g[j] * d;
                    }
                }
            }
            Op::ClampMin(x, lo) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        if xv[j] >= *lo {
                            s[j] += g[j];
                        }
                    }
                }
            }
            Op::NormRows { x, inv_std } => {
                let n = node.value.row_len();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[r * n + j] += inv * (gr[j] - mg - y[j] * mgy);
                        }
                    }
                }
            }
            Op::NormCols { x, inv_std } => {
                let c = inv_std.len();
                let r = node.value.len() / c;
                if let Some(s) = self.slot(grads, *x) {
                    let mut mg = vec![0.0; c];
                    let mut mgy = vec![0.0; c];
                    for ri in 0..r {
                        for j in 0..c {
                            mg[j] += g[ri * c + j];
                            mgy[j] += g[ri * c + j] * out[ri * c + j];
                        }
                    }
                    for j in 0..c {
                        mg[j] /= r as f64;
                        mgy[j] /= r as f64;
                    }
                    for ri in 0..r {
                        for j in 0..c {
                            let idx = ri * c + j;
                            s[idx] += inv_std[j] * (g[idx] - mg[j] - out[idx] * mgy[j]);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.row_len();
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..node.value.num_rows() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = node.value.row_len();
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..node.value.num_rows() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            s[r * n + j] += gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::L2Rows { x, norms } => {
                let n = node.value.row_len();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
            Op::MaskedMean { x, valid, den } => {
                let shape = self.shape(*x);
                let (t, d) = (shape[1], shape[2]);
                if let Some(s) = self.slot(grads, *x) {
                    for (bt, &ok) in valid.iter().enumerate() {
                        if ok {
                            let bi = bt / t;
                            for di in 0..d {
                                s[bt * d + di] += g[bi * d + di] / den[bi];
                            }
                        }
                    }
                }
            }
            Op::MaskedMax { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (j, &src) in argmax.iter().enumerate() {
                        s[src] += g[j];
                    }
                }
            }
            Op::Conv1d { x, w, b, pad, cols } => {
                self.conv1d_backward(*x, *w, *b, *pad, cols, node.value.shape(), g, grads)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_backward(
        &self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (groups, m, n) = (out_shape[0], out_shape[1], out_shape[2]);
        let sa = self.shape(a);
        let k = if trans_a { sa[1] } else { sa[2] };
        // Logical strides of A [m, k] and B [k, n] inside their storage.
        let ast = if trans_a { (1, m) } else { (k, 1) };
        let bst = if trans_b { (1, k) } else { (n, 1) };
        let bv = self.value(b).data().to_vec();
        if let Some(s) = self.slot(grads, a) {
            // dA = dC . B^T
            for gi in 0..groups {
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    &g[gi * m * n..(gi + 1) * m * n],
                    (n, 1),
                    &bv[gi * k * n..(gi + 1) * k * n],
                    (bst.1, bst.0),
                    1.0,
                    &mut s[gi * m * k..(gi + 1) * m * k],
                    ast,
                );
            }
        }
        let av = self.value(a).data().to_vec();
        if let Some(s) = self.slot(grads, b) {
            // dB = A^T . dC
            for gi in 0..groups {
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    &av[gi * m * k..(gi + 1) * m * k],
                    (ast.1, ast.0),
                    &g[gi * m * n..(gi + 1) * m * n],
                    (n, 1),
                    1.0,
                    &mut s[gi * k * n..(gi + 1) * k * n],
                    bst,
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
        cols: &[f64],
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (b, cout, tout) = (out_shape[0], out_shape[1], out_shape[2]);
        let ws = self.shape(w).to_vec();
        let (cin, k) = (ws[1], ws[2]);
        let t = self.shape(x)[2];
        let ck = cin * k;
        if let Some(bv) = bias {
            if let Some(s) = self.slot(grads, bv) {
                for bi in 0..b {
                    for o in 0..cout {
                        let base = (bi * cout + o) * tout;
                        s[o] += g[base..base + tout].iter().sum::<f64>();
                    }
                }
            }
        }
        if let Some(s) = self.slot(grads, w) {
            for bi in 0..b {
                // dW [cout, ck] += dC_b [cout, tout] . cols_b [tout, ck]
                gemm(
                    cout,
                    tout,
                    ck,
                    1.0,
                    &g[bi * cout * tout..(bi + 1) * cout * tout],
                    (tout, 1),
                    &cols[bi * tout * ck..(bi + 1) * tout * ck],
                    (ck, 1),
                    1.0,
                    s,
                    (ck, 1),
                );
            }
        }
        let wd = self.value(w).data().to_vec();
        if let Some(s) = self.slot(grads, x) {
            let mut dcol = vec![0.0; tout * ck];
            for bi in 0..b {
                // dcols_b [tout, ck] = dC_b^T . W
                gemm(
                    tout,
                    cout,
                    ck,
                    1.0,
                    &g[bi * cout * tout..(bi + 1) * cout * tout],
                    (1, tout),
                    &wd,
                    (ck, 1),
                    0.0,
                    &mut dcol,
                    (ck, 1),
                );
                for to in 0..tout {
                    for ci in 0..cin {
                        for ki in 0..k {
                            let ti = to + ki;
                            if ti >= pad && ti - pad < t {
                                s[(bi * cin + ci) * t + ti - pad] += dcol[to * ck + ci * k + ki];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a tracked node (`None` when unreachable from the loss).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store`; unreachable parameters receive zero.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_on_scalars() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.leaf(Tensor::scalar(-2.5));
        let z = g.mul(x, y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[-2.5]);
        assert_eq!(grads.wrt(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[5.0]);
    }

    #[test]
    fn repeated_backward_doubles_parameter_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let unused = store.add("unused", Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        grads.accumulate_into(&mut store);
        let once = store.grad(w).to_vec();
        grads.accumulate_into(&mut store);
        assert_eq!(store.grad(w), &[once[0] * 2.0, once[1] * 2.0]);
        assert_eq!(store.grad(unused), &[0.0; 3]);
    }

    #[test]
    fn masked_softmax_gives_zero_weight() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 50.0, 2.0]).unwrap());
        let y = g.softmax(x, Some(&[false, true, false]));
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_seeded() {
        let run = |seed| {
            let mut g = Graph::training(seed);
            let x = g.input(Tensor::full(&[64], 1.0));
            let y = g.dropout(x, 0.5);
            g.value(y).clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[8], 1.0));
        assert_eq!(g.dropout(x, 0.5), x);
    }
}
