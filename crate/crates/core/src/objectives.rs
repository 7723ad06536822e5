//! Training objectives built on the autodiff graph.
//!
//! Every function returns a scalar [`Var`] so the result can be composed
//! with other losses and differentiated.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to predicted probabilities inside logarithms.
pub const KL_CLAMP: f64 = 1e-12;

fn default_tau() -> f64 {
    0.07
}
fn default_lambda() -> f64 {
    1.0
}
fn default_weight() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    0.02
}
fn default_focal_alpha() -> f64 {
    0.75
}
fn default_focal_gamma() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    #[serde(default = "default_tau")]
    pub temperature: f64,
    /// Weight of the contrastive term relative to cross-entropy.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: default_tau(),
            lambda: default_lambda(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "objective.contrastive.temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("objective.contrastive.lambda", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureLossConfig {
    #[serde(default = "default_weight")]
    pub alpha: f64,
    #[serde(default = "default_weight")]
    pub beta: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_focal_alpha")]
    pub focal_alpha: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
}

impl Default for MixtureLossConfig {
    fn default() -> Self {
        MixtureLossConfig {
            alpha: default_weight(),
            beta: default_weight(),
            epsilon: default_eps(),
            focal_alpha: default_focal_alpha(),
            focal_gamma: default_focal_gamma(),
        }
    }
}

impl MixtureLossConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("objective.mixture.{f}");
        if !(self.alpha >= 0.0) {
            return Err(Error::config(field("alpha"), "must be >= 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(field("beta"), "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config(field("epsilon"), "must lie in [0, 1)"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::config(field("focal_alpha"), "must lie in (0, 1)"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config(field("focal_gamma"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let ls = g.log_softmax(logits);
    let mut pick = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        pick[i * c + l] = -1.0 / b as f64;
    }
    let w = g.input(Tensor::from_parts(vec![b, c], pick));
    let picked = g.mul(ls, w);
    Ok(g.sum_all(picked))
}

/// Sum of the diagonal of a square `[N, N]` matrix.
fn trace(g: &mut Graph, m: Var) -> Var {
    let n = g.shape(m)[0];
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let e = g.input(Tensor::from_parts(vec![n, n], eye));
    let d = g.mul(m, e);
    g.sum_all(d)
}

/// Row-wise cosine similarity matrix `S[i, j] = cos(a_i, b_j)`.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Shape(format!("cosine of {sa:?} and {sb:?}")));
    }
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let an = g.reshape(an, &[1, sa[0], sa[1]]);
    let bn = g.reshape(bn, &[1, sb[0], sb[1]]);
    let s = g.bmm(an, bn, false, true);
    Ok(g.reshape(s, &[sa[0], sb[0]]))
}

/// Two-direction InfoNCE over the cosine similarity of paired rows:
/// `-(1/N) Σ_i [log softmax_j(S_ij/τ)|_{j=i} + log softmax_j(S_ji/τ)|_{j=i}]`.
pub fn symmetric_contrastive(g: &mut Graph, zs: Var, zg: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = g.shape(zs)[0];
    if n == 0 || g.shape(zg)[0] != n {
        return Err(Error::Shape("contrastive needs N >= 1 matched pairs".into()));
    }
    let s = cosine_matrix(g, zs, zg)?;
    let s = g.scale(s, 1.0 / tau);
    let rows = g.log_softmax(s);
    let st = g.permute(s, &[1, 0]);
    let cols = g.log_softmax(st);
    let tr = trace(g, rows);
    let tc = trace(g, cols);
    let total = g.add(tr, tc);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Mean focal binary cross-entropy over every entry of `logits`.
pub fn focal_bce(g: &mut Graph, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::Shape(format!(
            "presence logits {:?} vs targets {:?}",
            g.shape(logits),
            targets.shape()
        )));
    }
    let n = targets.len() as f64;
    let ls_pos = g.unary(logits, Unary::LogSigmoid);
    let neg = g.unary(logits, Unary::Neg);
    let ls_neg = g.unary(neg, Unary::LogSigmoid);
    // (1 - q)^γ = exp(γ log σ(-s)), q^γ = exp(γ log σ(s))
    let wp = g.scale(ls_neg, gamma);
    let wp = g.unary(wp, Unary::Exp);
    let wn = g.scale(ls_pos, gamma);
    let wn = g.unary(wn, Unary::Exp);
    let pos_mask = targets.map(|r| -alpha * r / n);
    let neg_mask = targets.map(|r| -(1.0 - alpha) * (1.0 - r) / n);
    let pm = g.input(pos_mask);
    let nm = g.input(neg_mask);
    let a = g.mul(wp, ls_pos);
    let a = g.mul(a, pm);
    let b = g.mul(wn, ls_neg);
    let b = g.mul(b, nm);
    let s = g.add(a, b);
    Ok(g.sum_all(s))
}

/// Batch-mean `KL(p || softmax(logits))` with target-side `0 log 0 = 0`.
pub fn kl_to_logits(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::Shape("KL: logits and targets differ in shape".into()));
    }
    let b = targets.num_rows() as f64;
    let entropy: f64 = targets
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let q = g.softmax(logits, None);
    let q = g.clamp_min(q, KL_CLAMP);
    let lq = g.unary(q, Unary::Log);
    let w = g.input(targets.map(|p| -p / b));
    let cross = g.mul(lq, w);
    let cross = g.sum_all(cross);
    Ok(g.add_scalar(cross, entropy / b))
}

/// Scalar graph terms of the composite mixture loss.
#[derive(Debug, Clone, Copy)]
pub struct MixtureTerms {
    pub total: Var,
    pub kl: Var,
    pub hinge: Var,
    pub focal: Var,
}

/// `KL(p‖p̂) + α·mean_{i∈S} max(|p̂_i − p_i| − ε, 0) + β·FocalBCE(s, r)`, batch-averaged.
pub fn mixture_loss(
    g: &mut Graph,
    proportion_logits: Var,
    presence_logits: Var,
    targets: &Tensor,
    cfg: &MixtureLossConfig,
) -> Result<MixtureTerms> {
    let rows = targets.num_rows();
    let k = targets.row_len();
    let mut hinge_w = vec![0.0; rows * k];
    let mut presence = vec![0.0; rows * k];
    for (i, row) in targets.rows().enumerate() {
        let present = row.iter().filter(|&&p| p > 0.0).count();
        if present == 0 {
            return Err(Error::InvalidTarget(format!("row {i} has no present component")));
        }
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                hinge_w[i * k + j] = 1.0 / (present as f64 * rows as f64);
                presence[i * k + j] = 1.0;
            }
        }
    }
    let kl = kl_to_logits(g, proportion_logits, targets)?;
    let q = g.softmax(proportion_logits, None);
    let p = g.input(targets.clone());
    let diff = g.sub(q, p);
    let diff = g.unary(diff, Unary::Abs);
    let diff = g.add_scalar(diff, -cfg.epsilon);
    let diff = g.relu(diff);
    let hw = g.input(Tensor::from_parts(vec![rows, k], hinge_w));
    let hinge = g.mul(diff, hw);
    let hinge = g.sum_all(hinge);
    let r = Tensor::from_parts(vec![rows, k], presence);
    let focal = focal_bce(g, presence_logits, &r, cfg.focal_alpha, cfg.focal_gamma)?;
    let ah = g.scale(hinge, cfg.alpha);
    let bf = g.scale(focal, cfg.beta);
    let total = g.add(kl, ah);
    let total = g.add(total, bf);
    Ok(MixtureTerms {
        total,
        kl,
        hinge,
        focal,
    })
}

/// `Σ_i p_i log(p_i / q_i)` with `q` clamped to at least [`KL_CLAMP`] and `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_CLAMP).ln()))
        .sum()
}
