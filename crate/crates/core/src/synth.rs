//! Synthetic sensor datasets for desk-scale verification.
//!
//! A base session of class `c` on day `k` is, per channel `j`,
//!
//! ```text
//! x_t = g_k * (s_c + o_k + d_t + a_c * sin(2π t / P + φ) * 1[t ≥ onset] + e_t) + b_k
//! ```
//!
//! with signature level `s_c`, per-day offset `o_k`, AR(1) drift
//! `d_t = ρ d_{t-1} + η_t`, class-specific oscillation amplitude `a_c`, a random
//! per-session phase `φ`, white noise `e_t`, and an optional injected shift
//! `(g_k, b_k)` on one day. Differencing at lag `P/2` removes the level terms and
//! doubles the oscillation, so the class signal survives while drift does not.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelSchema, Registry, MIXTURE_ODORANTS};
use crate::error::{Error, Result};
use crate::ingest::{self, DatasetKind, DatasetManifest, DAYS_FILE, RECIPES_FILE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DayShift {
    pub day: u8,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub sessions_per_class: usize,
    pub steps: usize,
    pub channels: usize,
    /// Explicit `[num_classes][channels]` levels; drawn from the range below when absent.
    pub signatures: Option<Vec<Vec<f64>>>,
    pub signature_low: f64,
    pub signature_high: f64,
    pub drift_coef: f64,
    pub drift_std: f64,
    pub noise_std: f64,
    pub day_offset_std: f64,
    pub oscillation_low: f64,
    pub oscillation_high: f64,
    pub oscillation_period: f64,
    /// First step at which the class oscillation is switched on.
    pub onset_step: usize,
    pub day_shift: Option<DayShift>,
    /// Also write `spectra.tsv` and `formulas.tsv` for the generated ingredients.
    pub gcms: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 5,
            sessions_per_class: 6,
            steps: 600,
            channels: 6,
            signatures: None,
            signature_low: 200.0,
            signature_high: 800.0,
            drift_coef: 0.99,
            drift_std: 3.0,
            noise_std: 2.0,
            day_offset_std: 20.0,
            oscillation_low: 0.0,
            oscillation_high: 15.0,
            oscillation_period: 50.0,
            onset_step: 0,
            day_shift: None,
            gcms: false,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("synth.{field}"), msg));
        if self.num_classes == 0 || self.num_classes > Registry::builtin().len() {
            return bad("num_classes", "must be between 1 and the registry size");
        }
        if self.sessions_per_class == 0 || self.steps == 0 {
            return bad("steps", "sessions and steps must be positive");
        }
        if self.channels != ChannelSchema::base().len() {
            return bad("channels", "base data uses the six-channel schema");
        }
        for (name, v) in [
            ("drift_std", self.drift_std),
            ("noise_std", self.noise_std),
            ("day_offset_std", self.day_offset_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "variances must be finite and non-negative");
            }
        }
        if !(self.drift_coef.abs() < 1.0) {
            return bad("drift_coef", "|rho| must be < 1 for a stationary drift");
        }
        if self.signature_low > self.signature_high || self.oscillation_low > self.oscillation_high {
            return bad("signature_low", "range bounds are reversed");
        }
        if !(self.oscillation_period > 0.0) {
            return bad("oscillation_period", "must be positive");
        }
        if let Some(sig) = &self.signatures {
            if sig.len() != self.num_classes || sig.iter().any(|s| s.len() != self.channels) {
                return bad("signatures", "need one level per class and channel");
            }
        }
        if let Some(shift) = &self.day_shift {
            if !(1..=6).contains(&shift.day) {
                return bad("day_shift.day", "must be in 1..=6");
            }
        }
        Ok(())
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

/// Stationary AR(1) path of length `n`.
fn ar1(rng: &mut ChaCha8Rng, n: usize, rho: f64, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if std == 0.0 {
        out.resize(n, 0.0);
        return out;
    }
    let eta = normal(std);
    let mut d = normal(std / (1.0 - rho * rho).sqrt()).sample(rng);
    for _ in 0..n {
        out.push(d);
        d = rho * d + eta.sample(rng);
    }
    out
}

/// One generated base session.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub ingredient: String,
    pub stem: String,
    pub day: u8,
    pub readings: Tensor,
}

/// Per-class parameters drawn by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClasses {
    pub names: Vec<String>,
    pub signatures: Vec<Vec<f64>>,
    pub amplitudes: Vec<Vec<f64>>,
}

/// Generates every session in memory, in (class, session) order.
pub fn synth_base(cfg: &SyntheticConfig) -> Result<(SynthClasses, Vec<SynthSession>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reg = Registry::builtin();
    let names: Vec<String> = reg.labels()[..cfg.num_classes].iter().map(|l| l.name.clone()).collect();
    let d = cfg.channels;
    let signatures: Vec<Vec<f64>> = match &cfg.signatures {
        Some(s) => s.clone(),
        None => (0..cfg.num_classes)
            .map(|_| {
                (0..d)
                    .map(|_| uniform(&mut rng, cfg.signature_low, cfg.signature_high))
                    .collect()
            })
            .collect(),
    };
    let amplitudes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            (0..d)
                .map(|_| uniform(&mut rng, cfg.oscillation_low, cfg.oscillation_high))
                .collect()
        })
        .collect();
    let day_offsets: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..d).map(|_| sample(&mut rng, cfg.day_offset_std)).collect())
        .collect();
    let mut sessions = Vec::new();
    for (c, name) in names.iter().enumerate() {
        for s in 0..cfg.sessions_per_class {
            let day = (s % 6) as u8 + 1;
            let phase = rng.random_range(0.0..TAU);
            let drift: Vec<Vec<f64>> = (0..d)
                .map(|_| ar1(&mut rng, cfg.steps, cfg.drift_coef, cfg.drift_std))
                .collect();
            let (gain, shift) = match &cfg.day_shift {
                Some(ds) if ds.day == day => (ds.gain, ds.offset),
                _ => (1.0, 0.0),
            };
            let mut data = Vec::with_capacity(cfg.steps * d);
            for t in 0..cfg.steps {
                let wave = if t >= cfg.onset_step {
                    (TAU * t as f64 / cfg.oscillation_period + phase).sin()
                } else {
                    0.0
                };
                for j in 0..d {
                    let clean = signatures[c][j]
                        + day_offsets[day as usize - 1][j]
                        + drift[j][t]
                        + amplitudes[c][j] * wave
                        + sample(&mut rng, cfg.noise_std);
                    data.push(gain * clean + shift);
                }
            }
            sessions.push(SynthSession {
                ingredient: name.clone(),
                stem: format!("s{:02}_day{day}", s + 1),
                day,
                readings: Tensor::from_parts(vec![cfg.steps, d], data),
            });
        }
    }
    Ok((
        SynthClasses {
            names,
            signatures,
            amplitudes,
        },
        sessions,
    ))
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        normal(std).sample(rng)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes a base dataset under `root` (day-6 sessions in `test/`, the rest in
/// `train/`) together with `days.tsv`, and returns its manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<DatasetManifest> {
    let (classes, sessions) = synth_base(cfg)?;
    let schema = ChannelSchema::base();
    let mut days = String::from("session_id\tday\n");
    for s in &sessions {
        let split = if s.day == 6 { "test" } else { "train" };
        let path = root.join(split).join(&s.ingredient).join(format!("{}.csv", s.stem));
        ingest::write_readings_csv(&path, &s.readings, &schema)?;
        writeln!(days, "{}/{}\t{}", s.ingredient, s.stem, s.day).unwrap();
    }
    write_file(&root.join(DAYS_FILE), &days)?;
    if cfg.gcms {
        let (spectra, formulas) = synth_gcms(&classes.names, cfg.seed ^ 0x6c63_6d73);
        write_file(&root.join("spectra.tsv"), &spectra)?;
        write_file(&root.join("formulas.tsv"), &formulas)?;
    }
    ingest::scan_dataset(root, DatasetKind::Base)
}

/// Random per-ingredient compounds: returns (spectra TSV, formulas TSV).
pub fn synth_gcms(ingredients: &[String], seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectra = String::from("compound_id\tingredient\tpeaks\n");
    let mut formulas = String::from("compound_id\tingredient\tformula\n");
    for ing in ingredients {
        let compounds = rng.random_range(2..=4);
        for k in 0..compounds {
            let id = format!("{}-c{k}", ing.replace(' ', "_"));
            let npeaks = rng.random_range(4..=12);
            let base: Vec<(f64, f64)> = (0..npeaks)
                .map(|_| {
                    let mz = rng.random_range(40..300) as f64 + rng.random_range(0.0..0.9);
                    (mz, rng.random_range(1.0..100.0))
                })
                .collect();
            for _ in 0..rng.random_range(1..=2) {
                let peaks: Vec<String> = base
                    .iter()
                    .map(|(mz, i)| format!("{mz:.3}:{:.3}", i * rng.random_range(0.8..1.2)))
                    .collect();
                writeln!(spectra, "{id}\t{ing}\t{}", peaks.join(" ")).unwrap();
            }
            let c = rng.random_range(1..=20);
            let h = rng.random_range(2..=2 * c + 2);
            let o = rng.random_range(0..=5);
            let mut f = format!("C{c}H{h}");
            if o > 0 {
                write!(f, "O{o}").unwrap();
            }
            // Heteroatom counts vary per compound so no descriptor column is constant.
            for (sym, max) in [("N", 2), ("S", 2), ("Cl", 3)] {
                match rng.random_range(0..=max) {
                    0 => {}
                    1 => f.push_str(sym),
                    n => write!(f, "{sym}{n}").unwrap(),
                }
            }
            writeln!(formulas, "{id}\t{ing}\t{f}").unwrap();
        }
    }
    (spectra, formulas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSynthConfig {
    /// Uses the first `odorants` base odorants.
    pub odorants: usize,
    pub max_components: usize,
    /// Ratio grid in tenths; 1 means a 0.1 grid.
    pub grid_tenths: usize,
    pub steps: usize,
    pub train_sessions_per_recipe: usize,
    pub test_sessions_per_recipe: usize,
    /// Every n-th multi-component recipe is held out as unseen (0 disables).
    pub unseen_every: usize,
    pub signature_low: f64,
    pub signature_high: f64,
    pub drift_coef: f64,
    pub drift_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MixtureSynthConfig {
    fn default() -> Self {
        MixtureSynthConfig {
            odorants: 4,
            max_components: 2,
            grid_tenths: 1,
            steps: 200,
            train_sessions_per_recipe: 2,
            test_sessions_per_recipe: 1,
            unseen_every: 5,
            signature_low: 100.0,
            signature_high: 900.0,
            drift_coef: 0.95,
            drift_std: 0.5,
            noise_std: 1.0,
            seed: 42,
        }
    }
}

/// All mixtures of at most `max_components` of the first `odorants` components
/// with proportions on a grid of `grid_tenths / 10`, as integer tenths.
pub fn enumerate_recipes(odorants: usize, max_components: usize, grid_tenths: usize) -> Vec<Vec<usize>> {
    fn compositions(total: usize, parts: usize, step: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        let mut first = step;
        while first + step * (parts - 1) <= total {
            prefix.push(first);
            compositions(total - first, parts - 1, step, prefix, out);
            prefix.pop();
            first += step;
        }
    }
    let mut out = Vec::new();
    for k in 1..=max_components.min(odorants) {
        // Subsets of size k in lexicographic order.
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let mut comps = Vec::new();
            compositions(10, k, grid_tenths.max(1), &mut Vec::new(), &mut comps);
            for c in comps {
                let mut r = vec![0; MIXTURE_ODORANTS.len()];
                for (slot, &amount) in idx.iter().zip(&c) {
                    r[*slot] = amount;
                }
                out.push(r);
            }
            let mut i = k;
            while i > 0 && idx[i - 1] == odorants - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

fn recipe_name(r: &[usize]) -> String {
    r.iter()
        .enumerate()
        .filter(|(_, &a)| a > 0)
        .map(|(i, &a)| format!("{}{}", MIXTURE_ODORANTS[i], a * 10))
        .collect::<Vec<_>>()
        .join("-")
}

/// Writes a mixture dataset (train / test-seen / test-unseen) with `recipes.tsv`.
pub fn generate_mixture_synthetic(cfg: &MixtureSynthConfig, root: &Path) -> Result<DatasetManifest> {
    if cfg.odorants == 0 || cfg.odorants > MIXTURE_ODORANTS.len() || cfg.max_components == 0 {
        return Err(Error::config("synth.odorants", "must be in 1..=12 with max_components >= 1"));
    }
    if cfg.steps == 0 || cfg.train_sessions_per_recipe == 0 {
        return Err(Error::config("synth.steps", "steps and train sessions must be positive"));
    }
    let schema = ChannelSchema::mixture();
    let d = schema.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let levels: Vec<Vec<f64>> = (0..cfg.odorants)
        .map(|_| (0..d).map(|_| uniform(&mut rng, cfg.signature_low, cfg.signature_high)).collect())
        .collect();
    let recipes = enumerate_recipes(cfg.odorants, cfg.max_components, cfg.grid_tenths);
    let mut table = String::from("session_id");
    for o in MIXTURE_ODORANTS {
        write!(table, "\t{o}").unwrap();
    }
    table.push('\n');
    let mut multi = 0usize;
    for (ri, recipe) in recipes.iter().enumerate() {
        let components = recipe.iter().filter(|&&a| a > 0).count();
        let unseen = if components > 1 {
            multi += 1;
            cfg.unseen_every > 0 && multi.is_multiple_of(cfg.unseen_every)
        } else {
            false
        };
        let plan: Vec<(&str, usize)> = if unseen {
            vec![("test-unseen", cfg.test_sessions_per_recipe)]
        } else {
            vec![
                ("train", cfg.train_sessions_per_recipe),
                ("test-seen", cfg.test_sessions_per_recipe),
            ]
        };
        let name = recipe_name(recipe);
        for (split, count) in plan {
            for s in 0..count {
                let stem = format!("r{ri:03}_{split}_s{s}");
                let drift: Vec<Vec<f64>> = (0..d)
                    .map(|_| ar1(&mut rng, cfg.steps, cfg.drift_coef, cfg.drift_std))
                    .collect();
                let mut data = Vec::with_capacity(cfg.steps * d);
                for t in 0..cfg.steps {
                    for j in 0..d {
                        let level: f64 = recipe
                            .iter()
                            .take(cfg.odorants)
                            .enumerate()
                            .map(|(i, &a)| a as f64 / 10.0 * levels[i][j])
                            .sum();
                        data.push(level + drift[j][t] + sample(&mut rng, cfg.noise_std));
                    }
                }
                let readings = Tensor::from_parts(vec![cfg.steps, d], data);
                let path = root.join(split).join(&name).join(format!("{stem}.csv"));
                ingest::write_readings_csv(&path, &readings, &schema)?;
                write!(table, "{name}/{stem}").unwrap();
                for a in recipe {
                    write!(table, "\t{a}").unwrap();
                }
                table.push('\n');
            }
        }
    }
    write_file(&root.join(RECIPES_FILE), &table)?;
    ingest::scan_dataset(root, DatasetKind::Mixture)
}
