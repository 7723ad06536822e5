//! Classification and mixture-regression metrics.
//!
//! Rankings always break score ties by ascending class index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Category;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class indices sorted by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Position of `label` in [`rank_desc`] order, without sorting.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v.total_cmp(&s).is_gt() || (v.total_cmp(&s).is_eq() && j < label))
        .count()
}

pub fn argmax(scores: &[f64]) -> usize {
    rank_desc(scores)[0]
}

fn check_batch(scores: &Tensor, n: usize) -> Result<()> {
    if scores.ndim() != 2 {
        return Err(Error::Shape(format!("scores must be [B, C], got {:?}", scores.shape())));
    }
    if scores.dim(0) != n {
        return Err(Error::Shape(format!("{} score rows but {n} targets", scores.dim(0))));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    Ok(())
}

pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_batch(scores, labels.len())?;
    let c = scores.dim(1);
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={c}")));
    }
    let mut hits = 0usize;
    for (row, &y) in scores.rows().zip(labels) {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} outside {c} classes")));
        }
        if rank_of(row, y) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// `conf[true][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let mut conf = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidArgument(format!("class index outside {num_classes}")));
        }
        conf[y][p] += 1;
    }
    Ok(conf)
}

/// Per-class F1; a class with a 0/0 precision or recall gets 0.
pub fn per_class_f1(conf: &[Vec<u64>]) -> Vec<f64> {
    let c = conf.len();
    (0..c)
        .map(|k| {
            let tp = conf[k][k] as f64;
            let support: u64 = conf[k].iter().sum();
            let predicted: u64 = conf.iter().map(|r| r[k]).sum();
            let denom = support as f64 + predicted as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect()
}

pub fn macro_f1(conf: &[Vec<u64>]) -> Result<f64> {
    if conf.is_empty() || conf.iter().any(|r| r.len() != conf.len()) {
        return Err(Error::InvalidArgument("confusion matrix must be square and non-empty".into()));
    }
    let f = per_class_f1(conf);
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: Category,
    pub correct: usize,
    pub total: usize,
    /// `None` when no evaluated window belongs to the category.
    pub accuracy: Option<f64>,
}

/// Window-level accuracy grouped by the category of the true class.
pub fn per_category_accuracy(predicted: &[usize], labels: &[usize], categories: &[Category]) -> Vec<CategoryAccuracy> {
    Category::ALL
        .iter()
        .map(|&cat| {
            let (mut correct, mut total) = (0, 0);
            for (&p, &y) in predicted.iter().zip(labels) {
                if categories.get(y) == Some(&cat) {
                    total += 1;
                    correct += usize::from(p == y);
                }
            }
            CategoryAccuracy {
                category: cat,
                correct,
                total,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub num_examples: usize,
    pub acc1: f64,
    pub acc5: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_category_acc: Vec<CategoryAccuracy>,
    pub confusion: Vec<Vec<u64>>,
}

/// `categories[c]` is the category of class `c`.
pub fn classification_report(scores: &Tensor, labels: &[usize], categories: &[Category]) -> Result<ClassificationReport> {
    check_batch(scores, labels.len())?;
    let c = scores.dim(1);
    if categories.len() != c {
        return Err(Error::Shape(format!("{} categories for {c} classes", categories.len())));
    }
    let predicted: Vec<usize> = scores.rows().map(argmax).collect();
    let confusion = confusion_matrix(&predicted, labels, c)?;
    Ok(ClassificationReport {
        num_examples: labels.len(),
        acc1: topk_accuracy(scores, labels, 1)?,
        acc5: topk_accuracy(scores, labels, 5.min(c))?,
        macro_f1: macro_f1(&confusion)?,
        per_class_f1: per_class_f1(&confusion),
        per_category_acc: per_category_accuracy(&predicted, labels, categories),
        confusion,
    })
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() || pred.ndim() != 2 {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.dim(0) == 0 {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    Ok(())
}

pub fn mixture_mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Fraction of rows whose every non-zero target component is predicted within `thr`.
pub fn top1_at_threshold(pred: &Tensor, target: &Tensor, thr: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let hits = pred
        .rows()
        .zip(target.rows())
        .filter(|(p, t)| p.iter().zip(*t).all(|(p, t)| *t <= 0.0 || (p - t).abs() <= thr))
        .count();
    Ok(hits as f64 / pred.dim(0) as f64)
}

/// Recall of present components within the top-`P_n` predictions, pooled over the batch.
pub fn dynamic_topk(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, t) in pred.rows().zip(target.rows()) {
        let present: Vec<usize> = (0..t.len()).filter(|&i| t[i] > 0.0).collect();
        if present.is_empty() {
            return Err(Error::InvalidTarget("target row with no present component".into()));
        }
        hit += present.iter().filter(|&&i| rank_of(p, i) < present.len()).count();
        total += present.len();
    }
    Ok(hit as f64 / total as f64)
}

/// Mean over rows of `KL(target || pred)`, clamping `pred` like the loss does.
pub fn mixture_kl(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred
        .rows()
        .zip(target.rows())
        .map(|(p, t)| crate::objectives::kl_divergence(t, p))
        .sum();
    Ok(s / pred.dim(0) as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn mean_cosine(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair(pred, target)?;
    let s: f64 = pred.rows().zip(target.rows()).map(|(p, t)| cosine(p, t)).sum();
    Ok(s / pred.dim(0) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureReport {
    pub num_examples: usize,
    pub mae: f64,
    #[serde(rename = "top1_at_0.1")]
    pub top1_at_01: f64,
    pub dyn_topk: f64,
    /// Direction is target ‖ prediction.
    pub kl_target_pred: f64,
    pub cosine: f64,
}

pub fn mixture_report(pred: &Tensor, target: &Tensor) -> Result<MixtureReport> {
    Ok(MixtureReport {
        num_examples: pred.dim(0),
        mae: mixture_mae(pred, target)?,
        top1_at_01: top1_at_threshold(pred, target, 0.1)?,
        dyn_topk: dynamic_topk(pred, target)?,
        kl_target_pred: mixture_kl(pred, target)?,
        cosine: mean_cosine(pred, target)?,
    })
}

/// Either kind of report, as written to a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Report {
    Classification(ClassificationReport),
    Mixture(MixtureReport),
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    /// Headline metrics as `metric \t value` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        match self {
            Report::Classification(r) => {
                for (k, v) in [("acc1", r.acc1), ("acc5", r.acc5), ("macro_f1", r.macro_f1)] {
                    writeln!(out, "{k}\t{v}").unwrap();
                }
                for c in &r.per_category_acc {
                    let v = c.accuracy.map_or("NA".to_string(), |a| a.to_string());
                    writeln!(out, "acc_{}\t{v}", c.category).unwrap();
                }
            }
            Report::Mixture(r) => {
                for (k, v) in [
                    ("mae", r.mae),
                    ("top1_at_0.1", r.top1_at_01),
                    ("dyn_topk", r.dyn_topk),
                    ("kl_target_pred", r.kl_target_pred),
                    ("cosine", r.cosine),
                ] {
                    writeln!(out, "{k}\t{v}").unwrap();
                }
            }
        }
        out
    }

    pub fn headline(&self) -> f64 {
        match self {
            Report::Classification(r) => r.acc1,
            Report::Mixture(r) => r.top1_at_01,
        }
    }
}

/// Confusion matrix as CSV with a header of predicted class names.
pub fn confusion_to_csv(conf: &[Vec<u64>], names: &[String]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        write!(out, ",{n}").unwrap();
    }
    out.push('\n');
    for (row, name) in conf.iter().zip(names) {
        out.push_str(name);
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// One row per window: `window_id \t score_1 ... score_C`.
pub fn predictions_to_tsv(ids: &[String], scores: &Tensor, header: &[String]) -> String {
    let mut out = String::from("window_id");
    for h in header {
        write!(out, "\t{h}").unwrap();
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(scores.rows()) {
        out.push_str(id);
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
