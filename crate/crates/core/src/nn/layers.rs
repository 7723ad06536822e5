//! Parameterized building blocks shared by every model family.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the PyTorch default for linear and conv layers.
pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(rng, &[in_dim, out_dim], in_dim),
        );
        let bias = store.add(
            format!("{name}.bias"),
            kaiming_uniform(rng, &[out_dim], in_dim),
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Applies `x W + b` along the trailing axis of an arbitrary-rank input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear input width");
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let x2 = g.reshape(x, &[rows, self.in_dim]);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x2, w);
        let y = g.add_bias(y, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = g.norm_rows(x, NORM_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_bias(y, gamma);
        g.add_bias(y, beta)
    }
}

/// Batch normalization over the rows of a `[N, C]` matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[dim], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let rows = g.shape(x)[0];
        let y = if g.is_training() && rows > 1 {
            let (y, mean, var) = g.norm_cols(x, NORM_EPS);
            let unbias = rows as f64 / (rows as f64 - 1.0);
            let rm = blend(store.value(self.running_mean), &mean, 1.0);
            let rv = blend(store.value(self.running_var), &var, unbias);
            g.record_buffer_update(self.running_mean, rm);
            g.record_buffer_update(self.running_var, rv);
            y
        } else {
            let mean = store.value(self.running_mean).data();
            let var = store.value(self.running_var).data();
            let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let n = scale.len();
            let s = g.input(Tensor::from_parts(vec![n], scale));
            let t = g.input(Tensor::from_parts(vec![n], shift));
            let y = g.mul_bias(x, s);
            g.add_bias(y, t)
        };
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_bias(y, gamma);
        g.add_bias(y, beta)
    }
}

fn blend(running: &Tensor, batch: &[f64], factor: f64) -> Tensor {
    running.map_indexed(|i, r| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * batch[i] * factor)
}

/// 1-D convolution with "same" padding `k / 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = cin * kernel;
        Conv1d {
            weight: store.add(
                format!("{name}.weight"),
                kaiming_uniform(rng, &[cout, cin, kernel], fan_in),
            ),
            bias: store.add(format!("{name}.bias"), kaiming_uniform(rng, &[cout], fan_in)),
            kernel,
        }
    }

    /// `[B, Cin, T] -> [B, Cout, T]` for odd kernels.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.kernel / 2)
    }
}

/// One direction of an LSTM layer with PyTorch gate order (input, forget, cell, output).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        LstmCell {
            w_ih: store.add(
                format!("{name}.w_ih"),
                kaiming_uniform(rng, &[input, 4 * hidden], hidden),
            ),
            w_hh: store.add(
                format!("{name}.w_hh"),
                kaiming_uniform(rng, &[hidden, 4 * hidden], hidden),
            ),
            bias: store.add(
                format!("{name}.bias"),
                kaiming_uniform(rng, &[4 * hidden], hidden),
            ),
            hidden,
        }
    }

    /// One recurrent step from precomputed input projections `xw: [B, 4H]`.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xw: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let hs = self.hidden;
        let w_hh = g.param(store, self.w_hh);
        let hw = g.matmul(h, w_hh);
        let gates = g.add(xw, hw);
        let i = g.narrow(gates, 1, 0, hs);
        let f = g.narrow(gates, 1, hs, hs);
        let gg = g.narrow(gates, 1, 2 * hs, hs);
        let o = g.narrow(gates, 1, 3 * hs, hs);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }

    /// Runs the cell over `x: [B, T, in]`, freezing the state on padded steps.
    /// Returns the per-step hidden states `[B, T, H]` and the final hidden state `[B, H]`.
    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> (Var, Var) {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let hs = self.hidden;
        let x2 = g.reshape(x, &[b * t, d]);
        let w_ih = g.param(store, self.w_ih);
        let bias = g.param(store, self.bias);
        let xw = g.matmul(x2, w_ih);
        let xw = g.add_bias(xw, bias);
        let xw = g.reshape(xw, &[b, t, 4 * hs]);
        let mut h = g.input(Tensor::zeros(&[b, hs]));
        let mut c = g.input(Tensor::zeros(&[b, hs]));
        let mut outs = vec![h; t];
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for ti in order {
            let step_in = g.narrow(xw, 1, ti, 1);
            let step_in = g.reshape(step_in, &[b, 4 * hs]);
            let (h_new, c_new) = self.step(g, store, step_in, h, c);
            if lengths.iter().all(|&l| ti < l) {
                h = h_new;
                c = c_new;
            } else {
                // h <- h + m (h_new - h), with m = 1 on valid steps only.
                let mask: Vec<f64> = lengths
                    .iter()
                    .flat_map(|&l| std::iter::repeat_n(if ti < l { 1.0 } else { 0.0 }, hs))
                    .collect();
                let m = g.input(Tensor::from_parts(vec![b, hs], mask));
                let dh = g.sub(h_new, h);
                let dh = g.mul(dh, m);
                h = g.add(h, dh);
                let dc = g.sub(c_new, c);
                let dc = g.mul(dc, m);
                c = g.add(c, dc);
            }
            outs[ti] = g.reshape(h, &[b, 1, hs]);
        }
        let seq = g.concat(&outs, 1);
        (seq, h)
    }
}

/// Multi-head self-attention with a key-padding mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        MultiHeadAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// Returns the output `[B, T, D]` and the attention probabilities `[B*H, T, T]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        lengths: &[usize],
    ) -> (Var, Var) {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, store, x);
        let qkv = g.reshape(qkv, &[b, t, 3, h, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = g.reshape(qkv, &[3, b * h * t * dh]);
        let split = |g: &mut Graph, i| {
            let part = g.narrow(qkv, 0, i, 1);
            g.reshape(part, &[b * h, t, dh])
        };
        let q = split(g, 0);
        let k = split(g, 1);
        let v = split(g, 2);
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut mask = vec![false; b * h * t * t];
        for bi in 0..b {
            for hi in 0..h {
                for qi in 0..t {
                    let base = ((bi * h + hi) * t + qi) * t;
                    for ki in lengths[bi].min(t)..t {
                        mask[base + ki] = true;
                    }
                }
            }
        }
        let attn = g.softmax(scores, Some(&mask));
        let ctx = g.bmm(attn, v, false, false);
        let ctx = g.reshape(ctx, &[b, h, t, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, t, d]);
        (self.out.forward(g, store, ctx), attn)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, lengths: &[usize]) -> Var {
        self.forward_with_weights(g, store, x, lengths).0
    }
}

/// Pre-norm encoder layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), dim, 4 * dim),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 4 * dim, dim),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, lengths: &[usize]) -> Var {
        let a = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, a, lengths);
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a);
        let f = self.norm2.forward(g, store, x);
        let f = self.ff1.forward(g, store, f);
        let f = g.gelu(f);
        let f = g.dropout(f, self.dropout);
        let f = self.ff2.forward(g, store, f);
        let f = g.dropout(f, self.dropout);
        g.add(x, f)
    }
}

/// Sinusoidal positional encodings `[T, D]`.
pub fn sinusoidal_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let freq = (-(i as f64) * (10000f64).ln() / d as f64).exp();
            let angle = pos as f64 * freq;
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}
