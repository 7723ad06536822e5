//! Temporal differencing, sliding windows and train-set standardization.
//!
//! The order is fixed: difference the whole session, optionally truncate,
//! slice into windows, then z-score with statistics fitted on training windows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Provenance, SensorSession, StandardizationStats, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub diff_lag: usize,
    pub window: usize,
    /// Defaults to `window / 2`.
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default)]
    pub pad_final: bool,
    /// Keep only the first `n` steps of each differenced session.
    #[serde(default)]
    pub truncate: Option<usize>,
}

impl PreprocessConfig {
    pub fn new(diff_lag: usize, window: usize) -> Self {
        PreprocessConfig {
            diff_lag,
            window,
            stride: None,
            pad_final: false,
            truncate: None,
        }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("preprocess.window", "must be positive"));
        }
        match self.stride {
            None if !self.window.is_multiple_of(2) => Err(Error::config(
                "preprocess.window",
                "must be even when the stride defaults to window/2",
            )),
            None if self.window < 2 => Err(Error::config("preprocess.window", "must be at least 2")),
            Some(0) => Err(Error::config("preprocess.stride", "must be positive")),
            Some(s) if s > self.window => Err(Error::config("preprocess.stride", "must not exceed the window")),
            _ => Ok(()),
        }
    }

    fn provenance(&self, stats_id: Option<String>) -> Provenance {
        Provenance {
            diff_lag: self.diff_lag,
            window: self.window,
            stride: self.stride(),
            stats_id,
        }
    }
}

/// `out[t] = x[t + p] - x[t]` for a `[T, d]` stream; `p = 0` returns a copy.
pub fn temporal_difference(readings: &Tensor, p: usize) -> Result<Tensor> {
    let (t, d) = (readings.dim(0), readings.dim(1));
    if p == 0 {
        return Ok(readings.clone());
    }
    if p >= t {
        return Err(Error::InsufficientLength(format!(
            "difference lag {p} needs more than {p} steps, session has {t}"
        )));
    }
    let x = readings.data();
    let data: Vec<f64> = (0..(t - p) * d).map(|i| x[i + p * d] - x[i]).collect();
    Ok(Tensor::from_parts(vec![t - p, d], data))
}

/// Number of windows of length `w` at stride `s` over `t` steps.
pub fn count_windows(t: usize, w: usize, s: usize, pad_final: bool) -> usize {
    assert!(w >= 1 && s >= 1, "window and stride must be positive");
    if t < w {
        return 0;
    }
    let span = t - w;
    if pad_final {
        span.div_ceil(s) + 1
    } else {
        span / s + 1
    }
}

/// Window start offsets, in increasing order.
pub fn window_offsets(t: usize, w: usize, s: usize, pad_final: bool) -> Vec<usize> {
    (0..count_windows(t, w, s, pad_final)).map(|k| k * s).collect()
}

/// Cuts a `[T, d]` stream into `[w, d]` windows. With `pad_final`, a trailing
/// partial window is padded by repeating the last row.
pub fn slice_windows(
    sequence: &Tensor,
    cfg: &PreprocessConfig,
    label: &crate::data::Label,
    source_session: &str,
) -> Vec<Window> {
    let (t, d) = (sequence.dim(0), sequence.dim(1));
    let (w, s) = (cfg.window, cfg.stride());
    let x = sequence.data();
    window_offsets(t, w, s, cfg.pad_final)
        .into_iter()
        .map(|off| {
            let mut data = Vec::with_capacity(w * d);
            for r in off..off + w {
                let r = r.min(t - 1);
                data.extend_from_slice(&x[r * d..(r + 1) * d]);
            }
            Window {
                values: Tensor::from_parts(vec![w, d], data),
                label: label.clone(),
                source_session: source_session.to_string(),
                offset: off,
                provenance: cfg.provenance(None),
            }
        })
        .collect()
}

/// Differences, truncates and slices one session.
pub fn session_windows(session: &SensorSession, cfg: &PreprocessConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let mut seq = temporal_difference(&session.readings, cfg.diff_lag)?;
    if let Some(n) = cfg.truncate {
        if n < seq.dim(0) {
            let d = seq.dim(1);
            seq = Tensor::from_parts(vec![n, d], seq.data()[..n * d].to_vec());
        }
    }
    Ok(slice_windows(&seq, cfg, &session.label, &session.session_id))
}

/// Windows of many sessions, ordered by session id then offset.
pub fn windows_for_sessions<'a>(
    sessions: impl IntoIterator<Item = &'a SensorSession>,
    cfg: &PreprocessConfig,
) -> Result<Vec<Window>> {
    let mut sorted: Vec<&SensorSession> = sessions.into_iter().collect();
    sorted.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    let mut out = Vec::new();
    for s in sorted {
        out.extend(session_windows(s, cfg)?);
    }
    Ok(out)
}

fn stats_id(mean: &[f64], std: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in mean.iter().chain(std) {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Per-channel mean and population std over every row of every window.
pub fn fit_standardizer(windows: &[Window], fitted_on: &str) -> Result<StandardizationStats> {
    let d = windows
        .first()
        .map(|w| w.values.dim(1))
        .ok_or_else(|| Error::Dataset("no windows to fit standardization on".into()))?;
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for w in windows {
        if w.values.dim(1) != d {
            return Err(Error::Shape("windows have differing channel counts".into()));
        }
        for row in w.values.rows() {
            row.iter().zip(sum.iter_mut()).for_each(|(x, s)| *s += x);
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::Dataset("standardization needs at least two rows".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0; d];
    for w in windows {
        for row in w.values.rows() {
            for j in 0..d {
                sq[j] += (row[j] - mean[j]).powi(2);
            }
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    for (j, &s) in std.iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::DegenerateChannel {
                channel: j.to_string(),
                reason: "zero variance on the training set".into(),
            });
        }
    }
    let id = stats_id(&mean, &std);
    Ok(StandardizationStats {
        mean,
        std,
        fitted_on: fitted_on.to_string(),
        id,
    })
}

fn check_channels(w: &Window, stats: &StandardizationStats) -> Result<()> {
    if w.values.dim(1) != stats.mean.len() {
        return Err(Error::Shape(format!(
            "window has {} channels, statistics have {}",
            w.values.dim(1),
            stats.mean.len()
        )));
    }
    Ok(())
}

/// `(x - mean) / std` per channel; records the statistics id in provenance.
pub fn standardize(windows: &[Window], stats: &StandardizationStats) -> Result<Vec<Window>> {
    windows
        .iter()
        .map(|w| {
            check_channels(w, stats)?;
            let d = stats.mean.len();
            let mut out = w.clone();
            out.values = w.values.map_indexed(|i, x| (x - stats.mean[i % d]) / stats.std[i % d]);
            out.provenance.stats_id = Some(stats.id.clone());
            Ok(out)
        })
        .collect()
}

pub fn destandardize(windows: &[Window], stats: &StandardizationStats) -> Result<Vec<Window>> {
    windows
        .iter()
        .map(|w| {
            check_channels(w, stats)?;
            let d = stats.mean.len();
            let mut out = w.clone();
            out.values = w.values.map_indexed(|i, x| x * stats.std[i % d] + stats.mean[i % d]);
            out.provenance.stats_id = None;
            Ok(out)
        })
        .collect()
}

/// Stacks windows into a `[N, w, d]` batch tensor.
pub fn stack_windows(windows: &[Window]) -> Result<Tensor> {
    if windows.is_empty() {
        return Err(Error::Dataset("no windows".into()));
    }
    let values: Vec<&Tensor> = windows.iter().map(|w| &w.values).collect();
    Tensor::stack(&values)
}
