//! Offline analysis: PCA, channel correlation and channel-mask ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{predict_logits, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// `[k][d]` orthonormal loadings, largest-magnitude entry positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// `[N, k]` scores.
    pub projected: Tensor,
}

fn center(rows: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (rows.dim(0), rows.dim(1));
    let mut mean = vec![0.0; d];
    for r in rows.rows() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = rows
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    (mean, centered)
}

/// Sample covariance (divides by N − 1).
pub fn covariance(rows: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (rows.dim(0), rows.dim(1));
    let (_, c) = center(rows);
    let mut cov = vec![vec![0.0; d]; d];
    for r in &c {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    cov
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as rows), sorted by descending eigenvalue.
pub fn symmetric_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..d).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Top-`k` eigenpairs by power iteration with deflation (cross-check for [`symmetric_eigen`]).
pub fn power_iteration_eigen(m: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = m.len();
    let mut a = m.to_vec();
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i + c) % d) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..200_000 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if diff < 1e-15 {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Principal components of the `[N, d]` rows.
pub fn pca(rows: &Tensor, k: usize) -> Result<PcaResult> {
    if rows.ndim() != 2 {
        return Err(Error::Shape("pca expects [N, d] rows".into()));
    }
    let (n, d) = (rows.dim(0), rows.dim(1));
    if !(n > d && d >= k && k >= 1) {
        return Err(Error::InvalidArgument(format!("pca needs N > d >= k >= 1 (N={n}, d={d}, k={k})")));
    }
    let cov = covariance(rows);
    let (values, mut vectors) = symmetric_eigen(&cov);
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    if trace <= 0.0 || values[k - 1] <= 1e-12 * trace {
        return Err(Error::InvalidArgument(format!("data has rank below {k} components")));
    }
    vectors.truncate(k);
    vectors.iter_mut().for_each(|v| fix_sign(v));
    let (mean, centered) = center(rows);
    let mut projected = Vec::with_capacity(n * k);
    for r in &centered {
        for v in &vectors {
            projected.push(r.iter().zip(v).map(|(a, b)| a * b).sum());
        }
    }
    let eigenvalues: Vec<f64> = values[..k].to_vec();
    Ok(PcaResult {
        mean,
        explained_variance_ratio: eigenvalues.iter().map(|l| l / trace).collect(),
        eigenvalues,
        components: vectors,
        projected: Tensor::new(vec![n, k], projected)?,
    })
}

/// Loadings table: one row per component.
pub fn pca_to_tsv(result: &PcaResult, channels: &[String]) -> String {
    let mut out = String::from("component\texplained_ratio");
    for c in channels {
        write!(out, "\t{c}").unwrap();
    }
    out.push('\n');
    for (i, (v, r)) in result.components.iter().zip(&result.explained_variance_ratio).enumerate() {
        write!(out, "PC{}\t{r}", i + 1).unwrap();
        for x in v {
            write!(out, "\t{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn pearson_correlation(rows: &Tensor) -> Result<Vec<Vec<f64>>> {
    let d = rows.dim(1);
    if rows.dim(0) < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two rows".into()));
    }
    let cov = covariance(rows);
    for (j, row) in cov.iter().enumerate() {
        if !(row[j] > 0.0) {
            return Err(Error::DegenerateChannel {
                channel: j.to_string(),
                reason: "constant channel has no correlation".into(),
            });
        }
    }
    Ok((0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if i == j {
                        1.0
                    } else {
                        (cov[i][j] / (cov[i][i] * cov[j][j]).sqrt()).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect())
}

pub fn matrix_to_tsv(m: &[Vec<f64>], names: &[String]) -> String {
    let mut out = String::from("channel");
    for n in names {
        write!(out, "\t{n}").unwrap();
    }
    out.push('\n');
    for (row, n) in m.iter().zip(names) {
        out.push_str(n);
        for v in row {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Sets the listed channels of standardized `[N, w, d]` windows to zero
/// (the training mean in standardized space).
pub fn mask_channels(windows: &Tensor, channels: &[usize]) -> Result<Tensor> {
    let d = windows.dim(windows.ndim() - 1);
    if let Some(&c) = channels.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidArgument(format!("channel {c} outside {d} channels")));
    }
    Ok(windows.map_indexed(|i, x| if channels.contains(&(i % d)) { 0.0 } else { x }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAblation {
    pub channel: String,
    pub acc1: f64,
    pub delta_acc1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline_acc1: f64,
    /// Every channel masked at once.
    pub all_masked_acc1: f64,
    /// Sorted by |delta| descending, then channel order.
    pub rows: Vec<ChannelAblation>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("channel\tacc1\tdelta_acc1\nnone\t{}\t0\n", self.baseline_acc1);
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{}", r.channel, r.acc1, r.delta_acc1).unwrap();
        }
        writeln!(
            out,
            "all\t{}\t{}",
            self.all_masked_acc1,
            self.all_masked_acc1 - self.baseline_acc1
        )
        .unwrap();
        out
    }
}

/// Masks one channel at a time and reports the Acc@1 change. The model is only read.
pub fn channel_mask_ablation(
    model: &Model,
    windows: &Tensor,
    labels: &[usize],
    channels: &[String],
) -> Result<AblationTable> {
    let d = windows.dim(windows.ndim() - 1);
    if channels.len() != d {
        return Err(Error::Shape(format!("{} channel names for {d} channels", channels.len())));
    }
    let baseline = metrics::topk_accuracy(&predict_logits(model, windows)?, labels, 1)?;
    let mut rows = Vec::with_capacity(d);
    for (j, name) in channels.iter().enumerate() {
        let masked = mask_channels(windows, &[j])?;
        let acc1 = metrics::topk_accuracy(&predict_logits(model, &masked)?, labels, 1)?;
        rows.push(ChannelAblation {
            channel: name.clone(),
            acc1,
            delta_acc1: acc1 - baseline,
        });
    }
    rows.sort_by(|a, b| b.delta_acc1.abs().total_cmp(&a.delta_acc1.abs()));
    let all: Vec<usize> = (0..d).collect();
    let all_masked = mask_channels(windows, &all)?;
    Ok(AblationTable {
        baseline_acc1: baseline,
        all_masked_acc1: metrics::topk_accuracy(&predict_logits(model, &all_masked)?, labels, 1)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_has_single_component() {
        let data: Vec<f64> = (0..20).flat_map(|i| [i as f64, i as f64]).collect();
        let r = pca(&Tensor::new(vec![20, 2], data).unwrap(), 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((r.components[0][0] - s).abs() < 1e-12);
        assert!((r.components[0][1] - s).abs() < 1e-12);
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        // Second direction has zero variance.
        assert!(pca(&Tensor::new(vec![20, 2], (0..40).map(|i| (i / 2) as f64).collect()).unwrap(), 2).is_err());
    }

    #[test]
    fn correlation_signs() {
        let data: Vec<f64> = (0..10).flat_map(|i| [i as f64, -(i as f64), ((i * 7) % 5) as f64]).collect();
        let c = pearson_correlation(&Tensor::new(vec![10, 3], data).unwrap()).unwrap();
        assert_eq!(c[0][0], 1.0);
        assert!((c[0][1] + 1.0).abs() < 1e-12);
        assert_eq!(c[1][2], c[2][1]);
        let flat = Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
        assert!(matches!(pearson_correlation(&flat), Err(Error::DegenerateChannel { .. })));
    }

    #[test]
    fn mask_zeroes_channel() {
        let w = Tensor::full(&[2, 3, 2], 1.5);
        let m = mask_channels(&w, &[1]).unwrap();
        assert!(m.data().chunks(2).all(|c| c == [1.5, 0.0]));
        assert!(mask_channels(&w, &[2]).is_err());
    }
}
