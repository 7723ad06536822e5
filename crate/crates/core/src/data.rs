//! Domain types shared by ingestion, preprocessing, modeling and evaluation,
//! plus the substance registry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered sensor channel names with the acquisition rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    channels: Vec<String>,
    sample_rate_hz: f64,
}

impl ChannelSchema {
    pub fn new(channels: Vec<String>, sample_rate_hz: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidArgument("schema needs at least one channel".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate channel {c:?}")));
            }
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample rate {sample_rate_hz} must be positive"
            )));
        }
        Ok(ChannelSchema {
            channels,
            sample_rate_hz,
        })
    }

    /// Six-channel single-substance schema sampled at 1 Hz.
    pub fn base() -> Self {
        Self::from_static(&["NO2", "C2H5OH", "VOC", "CO", "Alcohol", "LPG"], 1.0)
    }

    /// Four-channel mixture schema sampled at 10 Hz.
    pub fn mixture() -> Self {
        Self::from_static(&["NO2", "C2H5OH", "VOC", "CO"], 10.0)
    }

    fn from_static(names: &[&str], rate: f64) -> Self {
        ChannelSchema {
            channels: names.iter().map(|s| s.to_string()).collect(),
            sample_rate_hz: rate,
        }
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Nuts,
    Spices,
    Herbs,
    Fruits,
    Vegetables,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Nuts,
        Category::Spices,
        Category::Herbs,
        Category::Fruits,
        Category::Vegetables,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Nuts => "nuts",
            Category::Spices => "spices",
            Category::Herbs => "herbs",
            Category::Fruits => "fruits",
            Category::Vegetables => "vegetables",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubstanceLabel {
    pub class_index: usize,
    pub name: String,
    pub category: Category,
}

const BUILTIN_MANIFEST: &str = include_str!("../data/substances.txt");

/// The versioned list of substances. Class indices follow lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    version: u32,
    labels: Vec<SubstanceLabel>,
}

impl Registry {
    /// The 50-substance registry shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_MANIFEST).expect("bundled registry manifest is valid")
    }

    /// Parses a manifest with one `name<TAB>category` line per substance.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut entries: Vec<(String, Category)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = Some(v.trim().parse::<u32>().map_err(|e| {
                        Error::InvalidArgument(format!("registry line {}: bad version: {e}", i + 1))
                    })?);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (name, cat) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidArgument(format!("registry line {}: expected name<TAB>category", i + 1))
            })?;
            entries.push((name.trim().to_string(), cat.parse()?));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(format!("duplicate substance {:?}", w[0].0)));
        }
        let labels = entries
            .into_iter()
            .enumerate()
            .map(|(class_index, (name, category))| SubstanceLabel {
                class_index,
                name,
                category,
            })
            .collect();
        Ok(Registry {
            version: version.unwrap_or(0),
            labels,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[SubstanceLabel] {
        &self.labels
    }

    pub fn get(&self, class_index: usize) -> Option<&SubstanceLabel> {
        self.labels.get(class_index)
    }

    pub fn lookup(&self, name: &str) -> Result<SubstanceLabel> {
        let key = name.trim().to_lowercase();
        if let Ok(i) = self.labels.binary_search_by(|l| l.name.as_str().cmp(key.as_str())) {
            return Ok(self.labels[i].clone());
        }
        let mut scored: Vec<(f64, &str)> = self
            .labels
            .iter()
            .map(|l| (strsim::jaro_winkler(&key, &l.name), l.name.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        Err(Error::UnknownSubstance {
            name: name.to_string(),
            suggestions: scored.iter().take(3).map(|s| s.1.to_string()).collect(),
        })
    }
}

/// Base odorants of the mixture experiments, in index order.
pub const MIXTURE_ODORANTS: [&str; 12] = [
    "almond",
    "apple",
    "banana",
    "clove",
    "coriander",
    "cumin",
    "garlic",
    "mango",
    "orange",
    "peach",
    "pear",
    "strawberry",
];

/// Default cap on the number of components in one mixture.
pub const MAX_MIXTURE_COMPONENTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTarget {
    proportions: Vec<f64>,
    presence: Vec<u8>,
    num_present: usize,
}

impl MixtureTarget {
    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn presence(&self) -> &[u8] {
        &self.presence
    }

    pub fn num_present(&self) -> usize {
        self.num_present
    }
}

/// Normalizes raw non-negative amounts onto the simplex with the default component cap.
pub fn make_mixture_target(raw: &[f64]) -> Result<MixtureTarget> {
    make_mixture_target_with_cap(raw, MAX_MIXTURE_COMPONENTS)
}

pub fn make_mixture_target_with_cap(raw: &[f64], max_present: usize) -> Result<MixtureTarget> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidTarget(format!(
            "entries must be finite and non-negative, got {v}"
        )));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidTarget("all entries are zero".into()));
    }
    let proportions: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let presence: Vec<u8> = proportions.iter().map(|&p| u8::from(p > 0.0)).collect();
    let num_present = presence.iter().map(|&r| r as usize).sum();
    if num_present > max_present {
        return Err(Error::InvalidTarget(format!(
            "{num_present} components present, at most {max_present} allowed"
        )));
    }
    Ok(MixtureTarget {
        proportions,
        presence,
        num_present,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Substance(SubstanceLabel),
    Mixture(MixtureTarget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    /// Held-out split of single-substance data.
    Test,
    TestSeen,
    TestUnseen,
    /// Sessions held back from training for model selection.
    Validation,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::TestSeen => "test-seen",
            SplitTag::TestUnseen => "test-unseen",
            SplitTag::Validation => "validation",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" | "offline_training" => Ok(SplitTag::Train),
            "test" | "testing" | "offline_testing" => Ok(SplitTag::Test),
            "test-seen" | "test_seen" => Ok(SplitTag::TestSeen),
            "test-unseen" | "test_unseen" => Ok(SplitTag::TestUnseen),
            "validation" | "val" => Ok(SplitTag::Validation),
            other => Err(Error::Split(format!("unknown split directory {other:?}"))),
        }
    }
}

/// One recorded multichannel stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSession {
    pub session_id: String,
    /// `[T, d]` raw readings.
    pub readings: Tensor,
    pub schema: ChannelSchema,
    pub label: Label,
    /// Acquisition day in `1..=6`, when known.
    pub day_index: Option<u8>,
    pub split_tag: Option<SplitTag>,
}

impl SensorSession {
    pub fn new(
        session_id: impl Into<String>,
        readings: Tensor,
        schema: ChannelSchema,
        label: Label,
        day_index: Option<u8>,
        split_tag: Option<SplitTag>,
    ) -> Result<Self> {
        let session_id = session_id.into();
        if readings.ndim() != 2 || readings.dim(1) != schema.len() {
            return Err(Error::Shape(format!(
                "session {session_id}: readings {:?} do not match {} channels",
                readings.shape(),
                schema.len()
            )));
        }
        if readings.dim(0) == 0 {
            return Err(Error::Dataset(format!("session {session_id} has no rows")));
        }
        if !readings.all_finite() {
            return Err(Error::Dataset(format!("session {session_id} has non-finite readings")));
        }
        if let Some(d) = day_index {
            if !(1..=6).contains(&d) {
                return Err(Error::Dataset(format!("session {session_id}: day {d} outside 1..=6")));
            }
        }
        Ok(SensorSession {
            session_id,
            readings,
            schema,
            label,
            day_index,
            split_tag,
        })
    }

    pub fn steps(&self) -> usize {
        self.readings.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.readings.dim(1)
    }
}

/// Records how a window was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub diff_lag: usize,
    pub window: usize,
    pub stride: usize,
    pub stats_id: Option<String>,
}

/// A fixed-length `[w, d]` segment cut from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Tensor,
    pub label: Label,
    pub source_session: String,
    pub offset: usize,
    pub provenance: Provenance,
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted_on: String,
    /// Content hash of the statistics, recorded in window provenance.
    pub id: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_has_fifty_sorted_substances() {
        let reg = Registry::builtin();
        assert_eq!(reg.len(), 50);
        assert_eq!(reg.version(), 1);
        for w in reg.labels().windows(2) {
            assert!(w[0].name < w[1].name);
        }
        let counts = Category::ALL.map(|c| reg.labels().iter().filter(|l| l.category == c).count());
        assert_eq!(counts.iter().sum::<usize>(), 50);
        assert!(counts.iter().all(|&c| c >= 8));
    }

    #[test]
    fn lookup_examples() {
        let reg = Registry::builtin();
        let cashew = reg.lookup("cashew").unwrap();
        assert_eq!(cashew.category, Category::Nuts);
        assert_eq!(reg.get(cashew.class_index).unwrap().name, "cashew");
        assert_eq!(reg.lookup("allspice").unwrap().category, Category::Spices);
        match reg.lookup("") {
            Err(Error::UnknownSubstance { suggestions, .. }) => assert_eq!(suggestions.len(), 3),
            other => panic!("expected unknown-name error, got {other:?}"),
        }
        match reg.lookup("cashw") {
            Err(Error::UnknownSubstance { suggestions, .. }) => assert_eq!(suggestions[0], "cashew"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lookup_round_trips_every_label() {
        let reg = Registry::builtin();
        for l in reg.labels() {
            assert_eq!(reg.lookup(&l.name).unwrap().class_index, l.class_index);
        }
    }

    #[test]
    fn mixture_target_examples() {
        let mut raw = [0.0; 12];
        raw[0] = 2.0;
        raw[1] = 2.0;
        let t = make_mixture_target(&raw).unwrap();
        assert_eq!(&t.proportions()[..3], &[0.5, 0.5, 0.0]);
        assert_eq!(t.num_present(), 2);

        raw = [0.0; 12];
        raw[0] = 1.0;
        raw[1] = 3.0;
        raw[2] = 6.0;
        let t = make_mixture_target(&raw).unwrap();
        for (got, want) in t.proportions()[..3].iter().zip([0.1, 0.3, 0.6]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(t.presence()[..4], [1, 1, 1, 0]);

        assert!(make_mixture_target(&[0.0; 12]).is_err());
        raw[5] = -1.0;
        assert!(make_mixture_target(&raw).is_err());
        assert!(make_mixture_target(&[1.0; 12]).is_err());
        assert_eq!(make_mixture_target_with_cap(&[1.0; 12], 12).unwrap().num_present(), 12);
    }

    #[test]
    fn schemas() {
        assert_eq!(ChannelSchema::base().len(), 6);
        assert_eq!(ChannelSchema::mixture().sample_rate_hz(), 10.0);
        assert!(ChannelSchema::new(vec!["a".into(), "a".into()], 1.0).is_err());
    }
}
