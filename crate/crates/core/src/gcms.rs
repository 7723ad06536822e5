//! Ingredient-level GC-MS descriptors: binned EI spectra and standardized
//! elemental composition.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MZ_LO: f64 = 40.0;
pub const MZ_HI: f64 = 500.0;
pub const BIN_WIDTH: f64 = 1.0;
/// `[40, 41), [41, 42), ..., [499, 500)`.
pub const NUM_BINS: usize = 460;

pub const DEFAULT_ELEMENTS: [&str; 6] = ["C", "H", "O", "N", "S", "Cl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiSpectrum {
    pub compound_id: String,
    /// `(m/z, intensity)` pairs.
    pub peaks: Vec<(f64, f64)>,
}

impl EiSpectrum {
    pub fn new(compound_id: impl Into<String>, peaks: Vec<(f64, f64)>) -> Result<Self> {
        let compound_id = compound_id.into();
        if peaks.is_empty() {
            return Err(Error::EmptySpectrum(format!("{compound_id}: no peaks")));
        }
        for &(mz, i) in &peaks {
            if !(mz.is_finite() && mz > 0.0 && i.is_finite() && i >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{compound_id}: invalid peak ({mz}, {i})"
                )));
            }
        }
        Ok(EiSpectrum { compound_id, peaks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Spec,
    Atom,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Spec => "spec",
            EmbeddingKind::Atom => "atom",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec" => Ok(EmbeddingKind::Spec),
            "atom" => Ok(EmbeddingKind::Atom),
            other => Err(Error::InvalidArgument(format!("unknown embedding kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcmsEmbedding {
    pub ingredient: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinConfig {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig {
            lo: MZ_LO,
            hi: MZ_HI,
            width: BIN_WIDTH,
        }
    }
}

impl BinConfig {
    pub fn num_bins(&self) -> usize {
        ((self.hi - self.lo) / self.width).ceil() as usize
    }
}

/// Sums intensities into half-open bins over `[lo, hi)` and max-normalizes.
pub fn bin_spectrum(spectrum: &EiSpectrum, cfg: &BinConfig) -> Result<Vec<f64>> {
    if !(cfg.lo < cfg.hi && cfg.width > 0.0) {
        return Err(Error::InvalidArgument("bin range needs lo < hi and width > 0".into()));
    }
    let n = cfg.num_bins();
    let mut bins = vec![0.0; n];
    let mut hit = false;
    for &(mz, intensity) in &spectrum.peaks {
        if mz < cfg.lo || mz >= cfg.hi {
            continue;
        }
        let b = (((mz - cfg.lo) / cfg.width).floor() as usize).min(n - 1);
        bins[b] += intensity;
        hit = true;
    }
    let max = bins.iter().copied().fold(0.0, f64::max);
    if !hit || max <= 0.0 {
        return Err(Error::EmptySpectrum(format!(
            "{}: no intensity inside [{}, {})",
            spectrum.compound_id, cfg.lo, cfg.hi
        )));
    }
    bins.iter_mut().for_each(|b| *b /= max);
    Ok(bins)
}

fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= vs.len() as f64);
    out
}

/// Averages the binned spectra of each compound, then averages across compounds.
/// Spectra with no in-range intensity are skipped.
pub fn ingredient_spec_embedding(compounds: &[Vec<EiSpectrum>], cfg: &BinConfig) -> Result<Vec<f64>> {
    let mut per_compound = Vec::new();
    for spectra in compounds {
        let binned: Vec<Vec<f64>> = spectra
            .iter()
            .filter_map(|s| match bin_spectrum(s, cfg) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("skipping spectrum: {e}");
                    None
                }
            })
            .collect();
        if !binned.is_empty() {
            per_compound.push(mean_vectors(&binned));
        }
    }
    if per_compound.is_empty() {
        return Err(Error::Coverage("no usable in-range spectra".into()));
    }
    Ok(mean_vectors(&per_compound))
}

/// Mean over spectra of the cumulative intensity fraction at m/z `<= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCdf {
    /// Per spectrum: sorted `(m/z, cumulative fraction)`.
    curves: Vec<Vec<(f64, f64)>>,
}

impl CoverageCdf {
    pub fn eval(&self, upper: f64) -> f64 {
        let total: f64 = self
            .curves
            .iter()
            .map(|c| {
                let k = c.partition_point(|&(mz, _)| mz <= upper);
                if k == 0 {
                    0.0
                } else {
                    c[k - 1].1
                }
            })
            .sum();
        total / self.curves.len() as f64
    }

    pub fn max_mz(&self) -> f64 {
        self.curves
            .iter()
            .filter_map(|c| c.last().map(|p| p.0))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn mz_coverage_cdf(spectra: &[EiSpectrum], lo: f64) -> Result<CoverageCdf> {
    let mut curves = Vec::new();
    for s in spectra {
        let mut peaks: Vec<(f64, f64)> = s.peaks.iter().copied().filter(|&(mz, _)| mz >= lo).collect();
        peaks.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = peaks.iter().map(|p| p.1).sum();
        if total <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(peaks.len());
        for (mz, i) in peaks {
            acc += i;
            match curve.last_mut() {
                Some(last) if last.0 == mz => last.1 = acc / total,
                _ => curve.push((mz, acc / total)),
            }
        }
        // Guard against rounding: the last point is the full intensity.
        if let Some(last) = curve.last_mut() {
            last.1 = 1.0;
        }
        curves.push(curve);
    }
    if curves.is_empty() {
        return Err(Error::EmptySpectrum("no spectra with intensity above the lower bound".into()));
    }
    Ok(CoverageCdf { curves })
}

/// Parses a molecular formula such as `C2H6O` or `Ca(OH)2` into element counts.
pub fn parse_formula(formula: &str) -> Result<BTreeMap<String, f64>> {
    fn number(chars: &[char], i: &mut usize) -> f64 {
        let start = *i;
        while *i < chars.len() && (chars[*i].is_ascii_digit() || chars[*i] == '.') {
            *i += 1;
        }
        if start == *i {
            1.0
        } else {
            chars[start..*i].iter().collect::<String>().parse().unwrap_or(1.0)
        }
    }
    let bad = |msg: &str| Error::InvalidArgument(format!("formula {formula:?}: {msg}"));
    let chars: Vec<char> = formula.trim().chars().collect();
    let mut stack: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new()];
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_uppercase() {
            let mut sym = c.to_string();
            i += 1;
            while i < chars.len() && chars[i].is_ascii_lowercase() {
                sym.push(chars[i]);
                i += 1;
            }
            let n = number(&chars, &mut i);
            *stack.last_mut().unwrap().entry(sym).or_insert(0.0) += n;
        } else if c == '(' || c == '[' {
            stack.push(BTreeMap::new());
            i += 1;
        } else if c == ')' || c == ']' {
            i += 1;
            let n = number(&chars, &mut i);
            let group = stack.pop().filter(|_| !stack.is_empty()).ok_or_else(|| bad("unbalanced parenthesis"))?;
            let top = stack.last_mut().unwrap();
            for (k, v) in group {
                *top.entry(k).or_insert(0.0) += v * n;
            }
        } else if c.is_whitespace() || c == '·' || c == '.' {
            i += 1;
        } else {
            return Err(bad(&format!("unexpected character {c:?}")));
        }
    }
    if stack.len() != 1 {
        return Err(bad("unbalanced parenthesis"));
    }
    let counts = stack.pop().unwrap();
    if counts.is_empty() {
        return Err(bad("no elements"));
    }
    Ok(counts)
}

/// Summed element counts over `formulas`, restricted to `elements`;
/// other elements are dropped with a warning.
pub fn atom_raw(formulas: &[&str], elements: &[String]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; elements.len()];
    for f in formulas {
        for (sym, n) in parse_formula(f)? {
            match elements.iter().position(|e| *e == sym) {
                Some(j) => out[j] += n,
                None => log::warn!("formula {f}: dropping element {sym} outside the descriptor set"),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomStats {
    pub elements: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean/std per element over the training ingredients' raw descriptors.
pub fn fit_atom_stats(raw: &[Vec<f64>], elements: &[String]) -> Result<AtomStats> {
    if raw.is_empty() {
        return Err(Error::Dataset("no descriptors to fit".into()));
    }
    let n = raw.len() as f64;
    let mean = mean_vectors(raw);
    let std: Vec<f64> = (0..elements.len())
        .map(|j| (raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    for (j, &s) in std.iter().enumerate() {
        if !(s > 0.0) {
            return Err(Error::DegenerateChannel {
                channel: elements[j].clone(),
                reason: "element count is constant across training ingredients".into(),
            });
        }
    }
    Ok(AtomStats {
        elements: elements.to_vec(),
        mean,
        std,
    })
}

pub fn atom_descriptor(raw: &[f64], stats: &AtomStats) -> Result<Vec<f64>> {
    if raw.len() != stats.mean.len() {
        return Err(Error::Shape(format!(
            "descriptor has {} elements, statistics have {}",
            raw.len(),
            stats.mean.len()
        )));
    }
    Ok(raw
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(g, (m, s))| (g - m) / s)
        .collect())
}

/// One row of a spectra file.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRecord {
    pub ingredient: String,
    pub spectrum: EiSpectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormulaRecord {
    pub compound_id: String,
    pub ingredient: String,
    pub formula: String,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `compound_id \t ingredient \t mz:intensity mz:intensity ...` rows
/// (a header row starting with `compound_id` is skipped).
pub fn read_spectra_tsv(path: &Path) -> Result<Vec<SpectrumRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (ln, line) in data_lines(&text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == "compound_id" {
            continue;
        }
        if cols.len() != 3 {
            return Err(parse_err(path, ln, format!("expected 3 columns, found {}", cols.len())));
        }
        let mut peaks = Vec::new();
        for tok in cols[2].split_whitespace() {
            let (mz, i) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, ln, format!("peak {tok:?} is not mz:intensity")))?;
            let mz: f64 = mz.parse().map_err(|_| parse_err(path, ln, format!("bad m/z {mz:?}")))?;
            let i: f64 = i.parse().map_err(|_| parse_err(path, ln, format!("bad intensity {i:?}")))?;
            peaks.push((mz, i));
        }
        let spectrum = EiSpectrum::new(cols[0], peaks).map_err(|e| parse_err(path, ln, e.to_string()))?;
        out.push(SpectrumRecord {
            ingredient: cols[1].trim().to_lowercase(),
            spectrum,
        });
    }
    Ok(out)
}

pub fn read_formulas_tsv(path: &Path) -> Result<Vec<FormulaRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (ln, line) in data_lines(&text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == "compound_id" {
            continue;
        }
        if cols.len() != 3 {
            return Err(parse_err(path, ln, format!("expected 3 columns, found {}", cols.len())));
        }
        out.push(FormulaRecord {
            compound_id: cols[0].to_string(),
            ingredient: cols[1].trim().to_lowercase(),
            formula: cols[2].trim().to_string(),
        });
    }
    Ok(out)
}

/// Spectrum embeddings for every ingredient in the records, sorted by ingredient.
pub fn spec_embeddings(records: &[SpectrumRecord], cfg: &BinConfig) -> Result<Vec<GcmsEmbedding>> {
    let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<EiSpectrum>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry(&r.ingredient)
            .or_default()
            .entry(&r.spectrum.compound_id)
            .or_default()
            .push(r.spectrum.clone());
    }
    grouped
        .into_iter()
        .map(|(ing, compounds)| {
            let groups: Vec<Vec<EiSpectrum>> = compounds.into_values().collect();
            let vector = ingredient_spec_embedding(&groups, cfg)
                .map_err(|e| Error::Coverage(format!("{ing}: {e}")))?;
            Ok(GcmsEmbedding {
                ingredient: ing.to_string(),
                kind: EmbeddingKind::Spec,
                vector,
            })
        })
        .collect()
}

/// Standardized atom embeddings; statistics are fitted on `train_ingredients`
/// (all ingredients when `None`).
pub fn atom_embeddings(
    records: &[FormulaRecord],
    elements: &[String],
    train_ingredients: Option<&[String]>,
) -> Result<(Vec<GcmsEmbedding>, AtomStats)> {
    let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.ingredient).or_default().push(&r.formula);
    }
    let raw: Vec<(String, Vec<f64>)> = grouped
        .into_iter()
        .map(|(ing, f)| Ok((ing.to_string(), atom_raw(&f, elements)?)))
        .collect::<Result<_>>()?;
    let fit_rows: Vec<Vec<f64>> = raw
        .iter()
        .filter(|(ing, _)| train_ingredients.is_none_or(|t| t.contains(ing)))
        .map(|(_, v)| v.clone())
        .collect();
    let stats = fit_atom_stats(&fit_rows, elements)?;
    let out = raw
        .into_iter()
        .map(|(ingredient, v)| {
            Ok(GcmsEmbedding {
                ingredient,
                kind: EmbeddingKind::Atom,
                vector: atom_descriptor(&v, &stats)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((out, stats))
}

/// `ingredient \t kind \t v1,v2,...`
pub fn embeddings_to_tsv(embeddings: &[GcmsEmbedding]) -> String {
    let mut out = String::from("ingredient\tkind\tvector\n");
    for e in embeddings {
        let v: Vec<String> = e.vector.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}\t{}\t{}", e.ingredient, e.kind, v.join(",")).unwrap();
    }
    out
}

pub fn write_embeddings_tsv(path: &Path, embeddings: &[GcmsEmbedding]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, embeddings_to_tsv(embeddings)).map_err(Error::io(path))
}

pub fn read_embeddings_tsv(path: &Path) -> Result<Vec<GcmsEmbedding>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (ln, line) in data_lines(&text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols[0] == "ingredient" {
            continue;
        }
        if cols.len() != 3 {
            return Err(parse_err(path, ln, format!("expected 3 columns, found {}", cols.len())));
        }
        let kind = cols[1].parse().map_err(|e: Error| parse_err(path, ln, e.to_string()))?;
        let vector = cols[2]
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
        out.push(GcmsEmbedding {
            ingredient: cols[0].to_string(),
            kind,
            vector,
        });
    }
    Ok(out)
}

/// Rows ordered as `class_names`, for one embedding kind.
pub fn embedding_matrix(embeddings: &[GcmsEmbedding], kind: EmbeddingKind, class_names: &[String]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = class_names
        .iter()
        .map(|name| {
            embeddings
                .iter()
                .find(|e| e.kind == kind && e.ingredient == *name)
                .map(|e| e.vector.clone())
                .ok_or_else(|| Error::Coverage(format!("no {kind} embedding for {name}")))
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}
