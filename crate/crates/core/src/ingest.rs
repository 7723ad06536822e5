//! Reading sensor CSV trees, assigning splits and summarizing datasets.
//!
//! Layout: `<root>/<split>/<ingredient>/<session>.csv`, with optional
//! `<root>/days.tsv` (session id, day) and, for mixtures, `<root>/recipes.tsv`
//! (session id followed by one raw amount per base odorant).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    make_mixture_target, ChannelSchema, Label, Registry, SensorSession, SplitTag, MIXTURE_ODORANTS,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DAYS_FILE: &str = "days.tsv";
pub const RECIPES_FILE: &str = "recipes.tsv";

/// Parses a CSV whose header names the schema channels (in any order),
/// optionally preceded by one ignored leading column such as a timestamp.
/// Returns the `[T, d]` readings in schema order.
pub fn parse_readings_csv(path: &Path, schema: &ChannelSchema) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_readings_str(&text, path, schema)
}

pub(crate) fn parse_readings_str(text: &str, path: &Path, schema: &ChannelSchema) -> Result<Tensor> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    let mut positions = Vec::with_capacity(schema.len());
    for ch in schema.channels() {
        match cols.iter().position(|c| c == ch) {
            Some(p) => positions.push(p),
            None => {
                return Err(Error::MissingColumn {
                    path: path.to_path_buf(),
                    column: ch.clone(),
                })
            }
        }
    }
    let extra: Vec<usize> = (0..cols.len()).filter(|i| !positions.contains(i)).collect();
    if extra.len() > 1 || extra.first().is_some_and(|&i| i != 0) {
        return Err(parse_err(
            1,
            format!("unexpected columns {:?}; only one leading timestamp column is allowed", extra.iter().map(|&i| cols[i]).collect::<Vec<_>>()),
        ));
    }
    let d = schema.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(parse_err(
                lineno,
                format!("ragged row: {} fields, header has {}", cells.len(), cols.len()),
            ));
        }
        for &p in &positions {
            let cell = cells[p].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric cell {cell:?} in column {}", cols[p])))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value {cell:?} in column {}", cols[p])));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    Tensor::new(vec![rows, d], data)
}

/// Serializes readings with a header row; values use the shortest exact decimal form.
pub fn readings_to_csv(readings: &Tensor, schema: &ChannelSchema) -> String {
    let mut out = schema.channels().join(",");
    out.push('\n');
    for row in readings.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_readings_csv(path: &Path, readings: &Tensor, schema: &ChannelSchema) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, readings_to_csv(readings, schema)).map_err(Error::io(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Base,
    Mixture,
}

impl DatasetKind {
    pub fn schema(self) -> ChannelSchema {
        match self {
            DatasetKind::Base => ChannelSchema::base(),
            DatasetKind::Mixture => ChannelSchema::mixture(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionEntry {
    /// `<ingredient>/<file stem>`.
    pub session_id: String,
    pub path: PathBuf,
    pub ingredient: String,
    pub day_index: Option<u8>,
    /// Split implied by the directory the file sits in.
    pub directory_split: SplitTag,
    /// Split assigned by [`build_splits`].
    pub split: Option<SplitTag>,
    pub recipe: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub schema: ChannelSchema,
    /// Sorted by session id.
    pub entries: Vec<SessionEntry>,
}

impl DatasetManifest {
    /// Ingredient name → session ids, in order.
    pub fn ingredients(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(&e.ingredient).or_default().push(&e.session_id);
        }
        map
    }

    pub fn split_counts(&self) -> BTreeMap<SplitTag, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            if let Some(s) = e.split {
                *m.entry(s).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn entries_in(&self, split: SplitTag) -> impl Iterator<Item = &SessionEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }
}

/// Finds a `day<digit>` token in a file stem, case-insensitively.
fn day_from_name(stem: &str) -> Option<u8> {
    let lower = stem.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut i = 0;
    while let Some(pos) = lower[i..].find("day") {
        let at = i + pos + 3;
        if let Some(c) = bytes.get(at) {
            if c.is_ascii_digit() && !bytes.get(at + 1).is_some_and(u8::is_ascii_digit) {
                return Some(c - b'0');
            }
        }
        i = at;
    }
    None
}

fn read_tsv(path: &Path) -> Result<Option<Vec<(usize, Vec<String>)>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(Some(
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| (i + 1, l.split('\t').map(|s| s.trim().to_string()).collect()))
            .collect(),
    ))
}

fn read_days(root: &Path) -> Result<HashMap<String, u8>> {
    let path = root.join(DAYS_FILE);
    let mut map = HashMap::new();
    if let Some(rows) = read_tsv(&path)? {
        for (line, cols) in rows {
            if cols.first().is_some_and(|c| c == "session_id") {
                continue;
            }
            let [id, day] = cols.as_slice() else {
                return Err(Error::Parse {
                    path: path.clone(),
                    line,
                    message: "expected session_id<TAB>day".into(),
                });
            };
            let d: u8 = day.parse().map_err(|_| Error::Parse {
                path: path.clone(),
                line,
                message: format!("bad day {day:?}"),
            })?;
            map.insert(id.clone(), d);
        }
    }
    Ok(map)
}

fn read_recipes(root: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let path = root.join(RECIPES_FILE);
    let rows = read_tsv(&path)?.ok_or_else(|| {
        Error::Dataset(format!("mixture dataset needs {}", path.display()))
    })?;
    let mut map = HashMap::new();
    for (line, cols) in rows {
        if cols.first().is_some_and(|c| c == "session_id") {
            continue;
        }
        if cols.len() != 1 + MIXTURE_ODORANTS.len() {
            return Err(Error::Parse {
                path: path.clone(),
                line,
                message: format!("expected session_id and {} amounts", MIXTURE_ODORANTS.len()),
            });
        }
        let raw = cols[1..]
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.clone(),
                line,
                message: format!("bad amount: {e}"),
            })?;
        map.insert(cols[0].clone(), raw);
    }
    Ok(map)
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(Error::io(path))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(path)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Walks a dataset root and records every session file.
pub fn scan_dataset(root: &Path, kind: DatasetKind) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let days = read_days(root)?;
    let recipes = match kind {
        DatasetKind::Mixture => Some(read_recipes(root)?),
        DatasetKind::Base => None,
    };
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for split_dir in sorted_dir(root)? {
        if !split_dir.is_dir() {
            continue;
        }
        let name = split_dir.file_name().unwrap().to_string_lossy().to_string();
        let Ok(directory_split) = name.parse::<SplitTag>() else {
            log::warn!("skipping unrecognized directory {}", split_dir.display());
            continue;
        };
        for ing_dir in sorted_dir(&split_dir)? {
            if !ing_dir.is_dir() {
                continue;
            }
            let ingredient = ing_dir.file_name().unwrap().to_string_lossy().to_string();
            for file in sorted_dir(&ing_dir)? {
                if file.extension().is_none_or(|e| e != "csv") {
                    continue;
                }
                let stem = file.file_stem().unwrap().to_string_lossy().to_string();
                let session_id = format!("{ingredient}/{stem}");
                if !seen.insert(session_id.clone()) {
                    return Err(Error::Dataset(format!("duplicate session id {session_id}")));
                }
                let day_index = days.get(&session_id).copied().or_else(|| day_from_name(&stem));
                let recipe = match &recipes {
                    Some(r) => Some(r.get(&session_id).cloned().ok_or_else(|| {
                        Error::Dataset(format!("no recipe for mixture session {session_id}"))
                    })?),
                    None => None,
                };
                entries.push(SessionEntry {
                    session_id,
                    path: file,
                    ingredient: ingredient.clone(),
                    day_index,
                    directory_split,
                    split: None,
                    recipe,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no session files under {}", root.display())));
    }
    entries.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        kind,
        schema: kind.schema(),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Day 6 is held out; days 1–5 train.
    LastDay,
    /// Day `k` is held out.
    LeaveOneDayOut(u8),
    /// Splits follow the directory each session file lives in.
    Mixture,
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last-day" => Ok(SplitPolicy::LastDay),
            "mixture" | "directory" => Ok(SplitPolicy::Mixture),
            other => {
                let k = other
                    .strip_prefix("leave-one-day-out:")
                    .or_else(|| other.strip_prefix("lodo:"))
                    .ok_or_else(|| Error::Split(format!("unknown split policy {other:?}")))?;
                let k: u8 = k
                    .parse()
                    .map_err(|_| Error::Split(format!("bad held-out day in {other:?}")))?;
                Ok(SplitPolicy::LeaveOneDayOut(k))
            }
        }
    }
}

impl std::fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitPolicy::LastDay => f.write_str("last-day"),
            SplitPolicy::LeaveOneDayOut(k) => write!(f, "leave-one-day-out:{k}"),
            SplitPolicy::Mixture => f.write_str("mixture"),
        }
    }
}

/// Assigns a split to every session.
pub fn build_splits(manifest: &DatasetManifest, policy: SplitPolicy) -> Result<DatasetManifest> {
    let held_out = match policy {
        SplitPolicy::LastDay => Some(6),
        SplitPolicy::LeaveOneDayOut(k) => {
            if !(1..=6).contains(&k) {
                return Err(Error::Split(format!("held-out day {k} is outside 1..=6")));
            }
            Some(k)
        }
        SplitPolicy::Mixture => None,
    };
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = Some(match held_out {
            Some(k) => {
                let day = e.day_index.ok_or_else(|| {
                    Error::Split(format!("session {} has no day metadata", e.session_id))
                })?;
                if day == k {
                    SplitTag::Test
                } else {
                    SplitTag::Train
                }
            }
            None => e.directory_split,
        });
    }
    Ok(out)
}

/// Layout problems that do not prevent loading (for `ingest-check`).
pub fn layout_warnings(manifest: &DatasetManifest) -> Vec<String> {
    let mut warnings = Vec::new();
    if manifest.kind == DatasetKind::Base {
        for (ing, sessions) in manifest.ingredients() {
            if sessions.len() != 6 {
                warnings.push(format!("{ing}: {} sessions (expected 6)", sessions.len()));
            }
        }
        let missing = manifest.entries.iter().filter(|e| e.day_index.is_none()).count();
        if missing > 0 {
            warnings.push(format!("{missing} sessions lack day metadata"));
        }
    }
    warnings
}

fn label_for(entry: &SessionEntry, registry: &Registry) -> Result<Label> {
    match &entry.recipe {
        Some(raw) => Ok(Label::Mixture(make_mixture_target(raw)?)),
        None => Ok(Label::Substance(registry.lookup(&entry.ingredient)?)),
    }
}

/// Parses every referenced session file in manifest order.
pub fn load_sessions(manifest: &DatasetManifest, registry: &Registry) -> Result<Vec<SensorSession>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let readings = parse_readings_csv(&e.path, &manifest.schema)?;
            SensorSession::new(
                e.session_id.clone(),
                readings,
                manifest.schema.clone(),
                label_for(e, registry)?,
                e.day_index,
                e.split,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Descriptive statistics over every row of the given sessions.
pub fn summarize_sessions(sessions: &[&SensorSession]) -> Result<Vec<ChannelSummary>> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::Dataset("cannot summarize an empty split".into()))?;
    let schema = &first.schema;
    let mut out = Vec::new();
    for (j, name) in schema.channels().iter().enumerate() {
        let mut vals: Vec<f64> = sessions
            .iter()
            .flat_map(|s| s.readings.rows().map(move |r| r[j]))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        vals.sort_by(f64::total_cmp);
        out.push(ChannelSummary {
            channel: name.clone(),
            count: vals.len(),
            mean,
            std,
            min: vals[0],
            q1: quantile_sorted(&vals, 0.25),
            median: quantile_sorted(&vals, 0.5),
            q3: quantile_sorted(&vals, 0.75),
            max: *vals.last().unwrap(),
        });
    }
    Ok(out)
}

/// Per-split channel statistics.
pub fn summarize(sessions: &[SensorSession]) -> Result<BTreeMap<SplitTag, Vec<ChannelSummary>>> {
    let mut by_split: BTreeMap<SplitTag, Vec<&SensorSession>> = BTreeMap::new();
    for s in sessions {
        let tag = s
            .split_tag
            .ok_or_else(|| Error::Split(format!("session {} has no split", s.session_id)))?;
        by_split.entry(tag).or_default().push(s);
    }
    by_split
        .into_iter()
        .map(|(k, v)| Ok((k, summarize_sessions(&v)?)))
        .collect()
}

pub fn summary_to_tsv(summary: &BTreeMap<SplitTag, Vec<ChannelSummary>>) -> String {
    let mut out = String::from("split\tchannel\tcount\tmean\tstd\tmin\tq1\tmedian\tq3\tmax\n");
    for (split, rows) in summary {
        for r in rows {
            writeln!(
                out,
                "{split}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                r.channel, r.count, r.mean, r.std, r.min, r.q1, r.median, r.q3, r.max
            )
            .unwrap();
        }
    }
    out
}
