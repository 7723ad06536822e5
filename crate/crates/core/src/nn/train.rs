//! Mini-batch training loop and batched inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BatchMask, Model};
use super::optim::{Adam, AdamConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::objectives::{self, ContrastiveConfig, MixtureLossConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

/// Supervision attached to each training window.
#[derive(Debug, Clone)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `[N, K]` rows on the simplex.
    Mixtures(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Mixtures(t) => t.num_rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum Objective {
    Classify,
    /// Cross-entropy plus λ times the sensor↔GC-MS contrastive term.
    /// `gcms` holds one descriptor row per class index.
    Contrastive {
        config: ContrastiveConfig,
        gcms: Tensor,
    },
    Mixture(MixtureLossConfig),
}

impl Objective {
    pub fn term_names(&self) -> &'static [&'static str] {
        match self {
            Objective::Classify => &["ce"],
            Objective::Contrastive { .. } => &["ce", "contrastive"],
            Objective::Mixture(_) => &["kl", "hinge", "focal"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub terms: Vec<f64>,
}

/// Per-step loss values plus the per-epoch mean of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub term_names: Vec<String>,
    pub steps: Vec<TraceRow>,
    pub epoch_means: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,total");
        for n in &self.term_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for r in &self.steps {
            out.push_str(&format!("{},{},{}", r.epoch, r.step, r.total));
            for t in &r.terms {
                out.push_str(&format!(",{t}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Copies the selected `[w, d]` windows into a `[B, w, d]` batch.
pub fn gather(windows: &Tensor, idx: &[usize]) -> Tensor {
    let per = windows.len() / windows.dim(0).max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&windows.data()[i * per..(i + 1) * per]);
    }
    let mut shape = windows.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_parts(shape, data)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    gather(t, idx)
}

struct StepLoss {
    total: Var,
    terms: Vec<Var>,
}

fn batch_loss(
    g: &mut Graph,
    model: &Model,
    x: &Tensor,
    idx: &[usize],
    targets: &Targets,
    objective: &Objective,
) -> Result<StepLoss> {
    let mask = BatchMask::full(x.dim(0), x.dim(1));
    let h = model.forward_embed(g, x, &mask)?;
    match (objective, targets) {
        (Objective::Classify, Targets::Classes(labels)) => {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = model.class_logits(g, h);
            let ce = objectives::cross_entropy(g, logits, &y)?;
            Ok(StepLoss {
                total: ce,
                terms: vec![ce],
            })
        }
        (Objective::Contrastive { config, gcms }, Targets::Classes(labels)) => {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let logits = model.class_logits(g, h);
            let ce = objectives::cross_entropy(g, logits, &y)?;
            let gx = g.input(gather_rows(gcms, &y));
            let zg = model.encode_gcms(g, gx)?;
            let con = objectives::symmetric_contrastive(g, h, zg, config.temperature)?;
            let weighted = g.scale(con, config.lambda);
            let total = g.add(ce, weighted);
            Ok(StepLoss {
                total,
                terms: vec![ce, con],
            })
        }
        (Objective::Mixture(cfg), Targets::Mixtures(t)) => {
            let tb = gather_rows(t, idx);
            let (u, z) = model.mixture_logits(g, h)?;
            let terms = objectives::mixture_loss(g, z, u, &tb, cfg)?;
            Ok(StepLoss {
                total: terms.total,
                terms: vec![terms.kl, terms.hinge, terms.focal],
            })
        }
        _ => Err(Error::config(
            "task",
            "objective does not match the kind of training targets",
        )),
    }
}

/// Trains `model` in place and returns the loss trace; the final parameters are kept.
pub fn train(
    model: &mut Model,
    windows: &Tensor,
    targets: &Targets,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<LossTrace> {
    let n = windows.dim(0);
    if n == 0 {
        return Err(Error::Dataset("no training windows".into()));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} windows but {} targets", targets.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let mut opt = Adam::new(&model.store, cfg.lr, cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = LossTrace {
        term_names: objective.term_names().iter().map(|s| s.to_string()).collect(),
        steps: Vec::new(),
        epoch_means: Vec::new(),
    };
    let mut global = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather(windows, idx);
            let mut g = Graph::training(cfg.seed.wrapping_mul(0x5851_f42d_4c95_7f2d).wrapping_add(global));
            global += 1;
            let loss = batch_loss(&mut g, model, &x, idx, targets, objective)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    step,
                    message: format!("loss became {total}"),
                });
            }
            let grads = g.backward(loss.total)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            opt.step(&mut model.store);
            for (id, value) in g.take_buffer_updates() {
                *model.store.value_mut(id) = value;
            }
            trace.steps.push(TraceRow {
                epoch,
                step,
                total,
                terms: loss.terms.iter().map(|&v| g.value(v).item()).collect(),
            });
            sum += total * idx.len() as f64;
            count += idx.len();
        }
        trace.epoch_means.push(sum / count as f64);
        log::debug!("epoch {epoch}: mean loss {:.6}", sum / count as f64);
    }
    Ok(trace)
}

const EVAL_CHUNK: usize = 256;

fn eval_chunks(
    windows: &Tensor,
    mut f: impl FnMut(&mut Graph, &Tensor, &BatchMask) -> Result<Var>,
) -> Result<Tensor> {
    let n = windows.dim(0);
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = gather(windows, &idx);
        let mask = BatchMask::full(idx.len(), x.dim(1));
        let mut g = Graph::new();
        let out = f(&mut g, &x, &mask)?;
        width = g.value(out).row_len();
        data.extend_from_slice(g.value(out).data());
    }
    Tensor::new(vec![n, width], data)
}

/// Evaluation-mode class logits `[N, C]`.
pub fn predict_logits(model: &Model, windows: &Tensor) -> Result<Tensor> {
    eval_chunks(windows, |g, x, m| model.classify(g, x, m))
}

/// Evaluation-mode pooled embeddings `[N, D]`.
pub fn predict_embeddings(model: &Model, windows: &Tensor) -> Result<Tensor> {
    eval_chunks(windows, |g, x, m| model.forward_embed(g, x, m))
}

/// Evaluation-mode mixture proportions `[N, K]` (rows on the simplex).
pub fn predict_mixture(model: &Model, windows: &Tensor) -> Result<Tensor> {
    eval_chunks(windows, |g, x, m| Ok(model.mixture_heads(g, x, m)?.1))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let n = out.row_len();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - m).exp();
            s += *v;
        });
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}
