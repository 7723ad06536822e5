//! Config-driven experiment runner: one `run` produces a self-describing run
//! directory; `eval` reproduces its reports from the stored checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, AblationTable, PcaResult};
use crate::data::{Category, Label, Registry, SplitTag, StandardizationStats, Window};
use crate::error::{Error, Result};
use crate::gcms::{self, EmbeddingKind};
use crate::ingest::{self, DatasetKind, SplitPolicy};
use crate::metrics::{self, Report};
use crate::nn::{self, AdamConfig, Family, GcmsEncoderConfig, LossTrace, Model, ModelConfig, Objective, Targets, TrainConfig};
use crate::objectives::{ContrastiveConfig, MixtureLossConfig};
use crate::preprocess::{self, PreprocessConfig};
use crate::tensor::Tensor;

/// Learning rates accepted without `allow_custom_lr`.
pub const LR_GRID: [f64; 3] = [3e-4, 1e-3, 3e-3];
pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_LR: f64 = 1e-3;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "loss_trace.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    BaseClassify,
    BaseContrastive,
    Mixture,
}

impl Task {
    pub fn dataset_kind(self) -> DatasetKind {
        match self {
            Task::Mixture => DatasetKind::Mixture,
            _ => DatasetKind::Base,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::BaseClassify => "base-classify",
            Task::BaseContrastive => "base-contrastive",
            Task::Mixture => "mixture",
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Task::Mixture => 60,
            _ => 90,
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Task::Mixture => 64,
            _ => 32,
        }
    }

    /// Mixture models see raw windows; base models see lag-25 differences.
    pub fn default_diff_lag(self) -> usize {
        match self {
            Task::Mixture => 0,
            _ => 25,
        }
    }

    pub fn default_split(self) -> SplitPolicy {
        match self {
            Task::Mixture => SplitPolicy::Mixture,
            _ => SplitPolicy::LastDay,
        }
    }

    /// Split the headline metrics are read from.
    pub fn primary_split(self) -> SplitTag {
        match self {
            Task::Mixture => SplitTag::TestSeen,
            _ => SplitTag::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub diff_lag: Option<usize>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    #[serde(default)]
    pub pad_final: bool,
    pub truncate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub allow_custom_lr: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_tau() -> f64 {
    ContrastiveConfig::default().temperature
}
fn default_lambda() -> f64 {
    ContrastiveConfig::default().lambda
}
fn default_kind() -> EmbeddingKind {
    EmbeddingKind::Spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(default = "default_tau")]
    pub temperature: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Embeddings file written by `gcms-embed`.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_kind")]
    pub kind: EmbeddingKind,
    #[serde(default)]
    pub encoder: GcmsEncoderConfig,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            temperature: default_tau(),
            lambda: default_lambda(),
            embeddings: None,
            kind: default_kind(),
            encoder: GcmsEncoderConfig::default(),
        }
    }
}

impl ContrastiveSection {
    pub fn loss_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Per row, keep the learning rate whose final checkpoint scores best on validation.
    #[default]
    BestByValidation,
    /// Report every cell.
    All,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub window: Vec<usize>,
    #[serde(default)]
    pub diff_lag: Vec<usize>,
    /// Defaults to the configured model family.
    #[serde(default)]
    pub families: Vec<Family>,
    /// Also train the cross-modal variant of every cell.
    #[serde(default)]
    pub cross_modal: bool,
    #[serde(default)]
    pub select: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// `last-day`, `leave-one-day-out:k` or `mixture`.
    #[serde(default)]
    pub split: Option<String>,
    /// Hold one training session per ingredient (or recipe) out as validation.
    #[serde(default)]
    pub validation: bool,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub mixture_loss: MixtureLossConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn lr_in_grid(lr: f64) -> bool {
    LR_GRID.iter().any(|g| (g - lr).abs() <= 1e-12 * g)
}

impl ExperimentConfig {
    pub fn new(task: Task, dataset: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            task,
            dataset: dataset.into(),
            output_dir: None,
            split: None,
            validation: false,
            preprocess: PreprocessSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            contrastive: ContrastiveSection::default(),
            mixture_loss: MixtureLossConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills task defaults, fixes data-determined model fields and validates.
    /// Returns the resolved config and any warnings. Resolving twice is a no-op.
    pub fn resolve(&self) -> Result<(ExperimentConfig, Vec<String>)> {
        let mut c = self.clone();
        let mut warnings = Vec::new();
        let task = c.task;
        c.output_dir.get_or_insert_with(|| PathBuf::from("runs").join(task.as_str()));
        let split: SplitPolicy = match &c.split {
            Some(s) => s.parse().map_err(|e: Error| Error::config("split", e.to_string()))?,
            None => task.default_split(),
        };
        match (task, split) {
            (Task::Mixture, SplitPolicy::Mixture) | (Task::BaseClassify | Task::BaseContrastive, SplitPolicy::LastDay | SplitPolicy::LeaveOneDayOut(_)) => {}
            _ => return Err(Error::config("split", format!("policy {split} does not fit task {}", task.as_str()))),
        }
        if let SplitPolicy::LeaveOneDayOut(k) = split {
            if !(1..=6).contains(&k) {
                return Err(Error::config("split", format!("held-out day {k} outside 1..=6")));
            }
        }
        c.split = Some(split.to_string());

        let p = c.preprocess.diff_lag.get_or_insert(task.default_diff_lag());
        if task == Task::Mixture && *p != 0 {
            warnings.push(format!(
                "mixture models are trained on raw windows by default; preprocess.diff_lag = {p} was requested"
            ));
        }
        c.preprocess.window.get_or_insert(50);
        c.preprocess.validate()?;

        c.train.epochs.get_or_insert(task.default_epochs());
        c.train.batch_size.get_or_insert(task.default_batch_size());
        let lr = *c.train.lr.get_or_insert(DEFAULT_LR);
        c.train.seed.get_or_insert(DEFAULT_SEED);
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("train.lr", format!("must be positive, got {lr}")));
        }
        if !c.train.allow_custom_lr && !lr_in_grid(lr) {
            return Err(Error::config(
                "train.lr",
                format!("{lr} is not in the grid {LR_GRID:?}; set train.allow_custom_lr = true to override"),
            ));
        }
        if c.train.batch_size == Some(0) {
            return Err(Error::config("train.batch_size", "must be positive"));
        }

        c.model.input_dim = task.dataset_kind().schema().len();
        match task {
            Task::Mixture => c.model.mixture_outputs = crate::data::MIXTURE_ODORANTS.len(),
            _ => c.model.mixture_outputs = 0,
        }
        let reg = Registry::builtin();
        if c.model.num_classes == 0 || c.model.num_classes > reg.len() {
            return Err(Error::config("model.num_classes", format!("must be in 1..={}", reg.len())));
        }
        c.model.validate()?;
        if task == Task::BaseContrastive {
            c.contrastive.loss_config().validate()?;
            if c.contrastive.embeddings.is_none() {
                return Err(Error::config("contrastive.embeddings", "base-contrastive needs a GC-MS embeddings file"));
            }
        }
        if task == Task::Mixture {
            c.mixture_loss.validate()?;
        }
        if let Some(s) = &c.sweep {
            for &lr in &s.lr {
                if !c.train.allow_custom_lr && !lr_in_grid(lr) {
                    return Err(Error::config("sweep.lr", format!("{lr} is not in the grid {LR_GRID:?}")));
                }
            }
        }
        for path in [Some(&mut c.dataset), c.contrastive.embeddings.as_mut()].into_iter().flatten() {
            if let Ok(abs) = fs::canonicalize(&*path) {
                *path = abs;
            }
        }
        Ok((c, warnings))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(self.task.as_str()))
    }

    pub fn split_policy(&self) -> Result<SplitPolicy> {
        self.split.as_deref().map_or(Ok(self.task.default_split()), str::parse)
    }

    /// Preprocessing settings of a resolved config.
    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            diff_lag: self.preprocess.diff_lag.unwrap_or(self.task.default_diff_lag()),
            window: self.preprocess.window.unwrap_or(50),
            stride: self.preprocess.stride,
            pad_final: self.preprocess.pad_final,
            truncate: self.preprocess.truncate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs.unwrap_or(self.task.default_epochs()),
            batch_size: self.train.batch_size.unwrap_or(self.task.default_batch_size()),
            lr: self.train.lr.unwrap_or(DEFAULT_LR),
            seed: self.train.seed.unwrap_or(DEFAULT_SEED),
            adam: self.train.adam.clone(),
        }
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

impl PreprocessSection {
    pub fn validate(&self) -> Result<()> {
        let cfg = PreprocessConfig {
            diff_lag: self.diff_lag.unwrap_or(0),
            window: self.window.unwrap_or(50),
            stride: self.stride,
            pad_final: self.pad_final,
            truncate: self.truncate,
        };
        cfg.validate()?;
        if let Some(n) = self.truncate {
            if n < cfg.window {
                return Err(Error::InsufficientLength(format!(
                    "truncation to {n} steps is shorter than the window {}",
                    cfg.window
                )));
            }
        }
        Ok(())
    }
}

/// Windows of one split, stacked and paired with their targets.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub tag: SplitTag,
    pub windows: Vec<Window>,
    /// `[N, w, d]`.
    pub x: Tensor,
    pub targets: Targets,
}

impl PreparedSplit {
    pub fn window_ids(&self) -> Vec<String> {
        self.windows.iter().map(|w| format!("{}@{}", w.source_session, w.offset)).collect()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Mixtures(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: StandardizationStats,
    pub train: PreparedSplit,
    /// Every non-training split present in the dataset, in split order.
    pub eval: Vec<PreparedSplit>,
}

fn targets_for(windows: &[Window], task: Task, num_classes: usize) -> Result<Targets> {
    match task {
        Task::Mixture => {
            let rows: Vec<Vec<f64>> = windows
                .iter()
                .map(|w| match &w.label {
                    Label::Mixture(m) => Ok(m.proportions().to_vec()),
                    Label::Substance(_) => Err(Error::Dataset("mixture task given a single-substance session".into())),
                })
                .collect::<Result<_>>()?;
            Ok(Targets::Mixtures(Tensor::from_rows(&rows)?))
        }
        _ => windows
            .iter()
            .map(|w| match &w.label {
                Label::Substance(s) if s.class_index < num_classes => Ok(s.class_index),
                Label::Substance(s) => Err(Error::config(
                    "model.num_classes",
                    format!("{} has class index {} but the model has {num_classes} classes", s.name, s.class_index),
                )),
                Label::Mixture(_) => Err(Error::Dataset("base task given a mixture session".into())),
            })
            .collect::<Result<Vec<_>>>()
            .map(Targets::Classes),
    }
}

/// Loads, splits, windows and standardizes the dataset of a resolved config.
/// With `stats`, the given statistics are applied instead of being fitted.
pub fn prepare(cfg: &ExperimentConfig, stats: Option<&StandardizationStats>) -> Result<Prepared> {
    let registry = Registry::builtin();
    let manifest = ingest::scan_dataset(&cfg.dataset, cfg.task.dataset_kind())?;
    let mut manifest = ingest::build_splits(&manifest, cfg.split_policy()?)?;
    if cfg.validation {
        let mut last: BTreeMap<String, usize> = BTreeMap::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.split == Some(SplitTag::Train) {
                last.insert(e.ingredient.clone(), i);
                *counts.entry(e.ingredient.clone()).or_default() += 1;
            }
        }
        for (ing, i) in last {
            if counts[&ing] >= 2 {
                manifest.entries[i].split = Some(SplitTag::Validation);
            }
        }
    }
    let sessions = ingest::load_sessions(&manifest, &registry)?;
    let pcfg = cfg.preprocess_config();
    let mut by_split: BTreeMap<SplitTag, Vec<Window>> = BTreeMap::new();
    for tag in [SplitTag::Train, SplitTag::Test, SplitTag::TestSeen, SplitTag::TestUnseen, SplitTag::Validation] {
        let windows = preprocess::windows_for_sessions(sessions.iter().filter(|s| s.split_tag == Some(tag)), &pcfg)?;
        if !windows.is_empty() {
            by_split.insert(tag, windows);
        }
    }
    let train_raw = by_split
        .remove(&SplitTag::Train)
        .ok_or_else(|| Error::Split("no training windows".into()))?;
    let stats = match stats {
        Some(s) => s.clone(),
        None => preprocess::fit_standardizer(&train_raw, "train")?,
    };
    let num_classes = cfg.model.num_classes;
    let finish = |tag: SplitTag, raw: &[Window]| -> Result<PreparedSplit> {
        let windows = preprocess::standardize(raw, &stats)?;
        Ok(PreparedSplit {
            tag,
            x: preprocess::stack_windows(&windows)?,
            targets: targets_for(&windows, cfg.task, num_classes)?,
            windows,
        })
    };
    let train = finish(SplitTag::Train, &train_raw)?;
    let eval = by_split
        .iter()
        .map(|(&tag, raw)| finish(tag, raw))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { stats, train, eval })
}

/// The trained model together with the statistics its inputs were scaled with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: StandardizationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: Task,
    pub config_hash: String,
    pub registry_version: u32,
    pub stats_id: String,
    pub split_policy: String,
    pub diff_lag: usize,
    pub window: usize,
    pub stride: usize,
    pub window_counts: BTreeMap<String, usize>,
    pub num_parameters: usize,
    pub final_epoch_loss: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub reports: BTreeMap<SplitTag, Report>,
    pub trace: LossTrace,
    pub warnings: Vec<String>,
}

impl RunOutput {
    pub fn primary(&self, task: Task) -> Option<&Report> {
        self.reports.get(&task.primary_split())
    }
}

fn class_names(num_classes: usize) -> Vec<String> {
    let reg = Registry::builtin();
    (0..num_classes).map(|i| reg.get(i).expect("validated class count").name.clone()).collect()
}

fn class_categories(num_classes: usize) -> Vec<Category> {
    let reg = Registry::builtin();
    (0..num_classes).map(|i| reg.get(i).expect("validated class count").category).collect()
}

struct Evaluated {
    report: Report,
    predictions: String,
    confusion: Option<String>,
}

fn evaluate_split(model: &Model, split: &PreparedSplit, task: Task) -> Result<Evaluated> {
    let ids = split.window_ids();
    match &split.targets {
        Targets::Classes(labels) => {
            let c = model.config.num_classes;
            let logits = nn::predict_logits(model, &split.x)?;
            let probs = nn::softmax_rows(&logits);
            let report = metrics::classification_report(&probs, labels, &class_categories(c))?;
            let names = class_names(c);
            let confusion = metrics::confusion_to_csv(&report.confusion, &names);
            Ok(Evaluated {
                predictions: metrics::predictions_to_tsv(&ids, &probs, &names),
                confusion: Some(confusion),
                report: Report::Classification(report),
            })
        }
        Targets::Mixtures(target) => {
            debug_assert_eq!(task, Task::Mixture);
            let pred = nn::predict_mixture(model, &split.x)?;
            let names: Vec<String> = crate::data::MIXTURE_ODORANTS.iter().map(|s| s.to_string()).collect();
            Ok(Evaluated {
                report: Report::Mixture(metrics::mixture_report(&pred, target)?),
                predictions: metrics::predictions_to_tsv(&ids, &pred, &names),
                confusion: None,
            })
        }
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(Error::io(&path))
}

fn build_objective(cfg: &ExperimentConfig, model: &mut Model) -> Result<Objective> {
    Ok(match cfg.task {
        Task::BaseClassify => Objective::Classify,
        Task::Mixture => Objective::Mixture(cfg.mixture_loss.clone()),
        Task::BaseContrastive => {
            let path = cfg.contrastive.embeddings.as_ref().expect("validated embeddings path");
            let embeddings = gcms::read_embeddings_tsv(path)?;
            let gcms = gcms::embedding_matrix(&embeddings, cfg.contrastive.kind, &class_names(cfg.model.num_classes))?;
            model.attach_gcms_encoder(gcms.dim(1), &cfg.contrastive.encoder, cfg.train_config().seed);
            Objective::Contrastive {
                config: cfg.contrastive.loss_config(),
                gcms,
            }
        }
    })
}

/// Trains and evaluates one configuration, writing the run directory.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    let (cfg, warnings) = config.resolve()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    let prepared = prepare(&cfg, None)?;
    let tcfg = cfg.train_config();
    let mut model = Model::new(&cfg.model, tcfg.seed)?;
    let objective = build_objective(&cfg, &mut model)?;
    log::info!(
        "training {:?} on {} windows for {} epochs",
        cfg.model.family,
        prepared.train.windows.len(),
        tcfg.epochs
    );
    let trace = nn::train(&mut model, &prepared.train.x, &prepared.train.targets, &objective, &tcfg)?;

    let mut reports = BTreeMap::new();
    for split in &prepared.eval {
        let ev = evaluate_split(&model, split, cfg.task)?;
        write_evaluation(&dir, split.tag, &ev)?;
        reports.insert(split.tag, ev.report);
    }

    let pcfg = cfg.preprocess_config();
    let mut window_counts = BTreeMap::new();
    window_counts.insert(SplitTag::Train.to_string(), prepared.train.windows.len());
    for s in &prepared.eval {
        window_counts.insert(s.tag.to_string(), s.windows.len());
    }
    let manifest = RunManifest {
        task: cfg.task,
        config_hash: cfg.config_hash(),
        registry_version: Registry::builtin().version(),
        stats_id: prepared.stats.id.clone(),
        split_policy: cfg.split_policy()?.to_string(),
        diff_lag: pcfg.diff_lag,
        window: pcfg.window,
        stride: pcfg.stride(),
        window_counts,
        num_parameters: model.store.num_trainable(),
        final_epoch_loss: trace.epoch_means.last().copied(),
        warnings: warnings.clone(),
    };
    write(&dir, CONFIG_FILE, &cfg.to_toml())?;
    write(&dir, MANIFEST_FILE, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    write(&dir, TRACE_FILE, &trace.to_csv())?;
    let checkpoint = Checkpoint {
        model,
        stats: prepared.stats,
    };
    write(&dir, CHECKPOINT_FILE, &serde_json::to_string(&checkpoint)?)?;
    Ok(RunOutput {
        dir,
        reports,
        trace,
        warnings,
    })
}

fn write_evaluation(dir: &Path, tag: SplitTag, ev: &Evaluated) -> Result<()> {
    write(dir, &format!("report_{tag}.json"), &ev.report.to_json())?;
    write(dir, &format!("report_{tag}.tsv"), &ev.report.to_tsv())?;
    write(dir, &format!("predictions_{tag}.tsv"), &ev.predictions)?;
    if let Some(c) = &ev.confusion {
        write(dir, &format!("confusion_{tag}.csv"), c)?;
    }
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Checkpoint)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    Ok((cfg, serde_json::from_str(&text)?))
}

/// Re-evaluates a run directory from its checkpoint and stored statistics.
pub fn eval_run(dir: &Path) -> Result<BTreeMap<SplitTag, Report>> {
    let (cfg, ckpt) = load_run(dir)?;
    let prepared = prepare(&cfg, Some(&ckpt.stats))?;
    let mut out = BTreeMap::new();
    for split in &prepared.eval {
        out.insert(split.tag, evaluate_split(&ckpt.model, split, cfg.task)?.report);
    }
    Ok(out)
}

/// Splits whose re-evaluated JSON report differs from the stored one.
pub fn verify_run(dir: &Path) -> Result<Vec<SplitTag>> {
    let reports = eval_run(dir)?;
    let mut mismatched = Vec::new();
    for (tag, r) in &reports {
        let path = dir.join(format!("report_{tag}.json"));
        let stored = fs::read_to_string(&path).map_err(Error::io(&path))?;
        if stored != r.to_json() {
            mismatched.push(*tag);
        }
    }
    Ok(mismatched)
}

/// Headline numbers of one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc1: f64,
    pub acc5: f64,
    pub macro_f1: f64,
}

impl Scores {
    fn from_report(r: &Report) -> Result<Self> {
        match r {
            Report::Classification(c) => Ok(Scores {
                acc1: c.acc1,
                acc5: c.acc5,
                macro_f1: c.macro_f1,
            }),
            Report::Mixture(_) => Err(Error::InvalidArgument("expected a classification report".into())),
        }
    }
}

fn primary_report(out: &RunOutput, task: Task) -> Result<&Report> {
    out.primary(task)
        .ok_or_else(|| Error::Split(format!("run has no {} split", task.primary_split())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub family: Family,
    pub window: usize,
    pub diff_lag: usize,
    pub lr: f64,
    pub cross_modal: bool,
    pub dir: PathBuf,
    /// Metric name → value on the primary test split; empty when the cell failed.
    pub metrics: BTreeMap<String, f64>,
    pub validation: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub cells: Vec<SweepCell>,
    /// Selected rows (or all cells), with `delta_acc1` for cross-modal rows.
    pub table: Vec<(SweepCell, Option<f64>)>,
}

fn metric_columns(task: Task) -> &'static [&'static str] {
    match task {
        Task::Mixture => &["mae", "top1_at_0.1", "dyn_topk", "kl_target_pred", "cosine"],
        _ => &["acc1", "acc5", "macro_f1"],
    }
}

fn report_metrics(r: &Report) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    match r {
        Report::Classification(c) => {
            m.insert("acc1".into(), c.acc1);
            m.insert("acc5".into(), c.acc5);
            m.insert("macro_f1".into(), c.macro_f1);
        }
        Report::Mixture(x) => {
            m.insert("mae".into(), x.mae);
            m.insert("top1_at_0.1".into(), x.top1_at_01);
            m.insert("dyn_topk".into(), x.dyn_topk);
            m.insert("kl_target_pred".into(), x.kl_target_pred);
            m.insert("cosine".into(), x.cosine);
        }
    }
    m
}

/// Runs every `lr × window × diff_lag` cell (per family, optionally also
/// cross-modal). Failed cells are recorded and the sweep continues.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    let (cfg, _) = config.resolve()?;
    let grid = cfg.sweep.clone().unwrap_or_default();
    let lrs = if grid.lr.is_empty() { vec![cfg.train_config().lr] } else { grid.lr.clone() };
    let windows = if grid.window.is_empty() { vec![cfg.preprocess_config().window] } else { grid.window.clone() };
    let lags = if grid.diff_lag.is_empty() { vec![cfg.preprocess_config().diff_lag] } else { grid.diff_lag.clone() };
    let families = if grid.families.is_empty() { vec![cfg.model.family] } else { grid.families.clone() };
    if config.sweep.as_ref().is_none_or(|s| s.lr.is_empty() && s.window.is_empty() && s.diff_lag.is_empty()) {
        return Err(Error::config("sweep", "grid is empty"));
    }
    let modes: Vec<bool> = if grid.cross_modal {
        if cfg.task == Task::Mixture {
            return Err(Error::config("sweep.cross_modal", "only base tasks have a cross-modal variant"));
        }
        vec![false, true]
    } else {
        vec![cfg.task == Task::BaseContrastive]
    };
    let root = cfg.output_dir();
    let select = grid.select;
    let mut cells = Vec::new();
    for &family in &families {
        for &w in &windows {
            for &p in &lags {
                for &lr in &lrs {
                    for &cross in &modes {
                        let mut c = cfg.clone();
                        c.sweep = None;
                        c.model = ModelConfig {
                            family,
                            ..cfg.model.clone()
                        };
                        if family != cfg.model.family {
                            c.model.dropout = None;
                            c.model.pooling = None;
                        }
                        c.preprocess.window = Some(w);
                        c.preprocess.diff_lag = Some(p);
                        c.train.lr = Some(lr);
                        c.validation = c.validation || select == Selection::BestByValidation;
                        if !matches!(c.task, Task::Mixture) {
                            c.task = if cross { Task::BaseContrastive } else { Task::BaseClassify };
                        }
                        let mode = if cross { "cross-modal" } else { "sensor-only" };
                        let name = format!("{}-w{w}-p{p}-lr{lr}-{mode}", family_name(family));
                        let dir = root.join(&name);
                        c.output_dir = Some(dir.clone());
                        let task = c.task;
                        let mut cell = SweepCell {
                            family,
                            window: w,
                            diff_lag: p,
                            lr,
                            cross_modal: cross,
                            dir,
                            metrics: BTreeMap::new(),
                            validation: None,
                            error: None,
                        };
                        match run(&c).and_then(|out| {
                            let m = report_metrics(primary_report(&out, task)?);
                            let v = out.reports.get(&SplitTag::Validation).map(Report::headline);
                            Ok((m, v))
                        }) {
                            Ok((m, v)) => {
                                cell.metrics = m;
                                cell.validation = v;
                            }
                            Err(e) => {
                                log::warn!("sweep cell {name} failed: {e}");
                                cell.error = Some(e.to_string());
                            }
                        }
                        cells.push(cell);
                    }
                }
            }
        }
    }
    let table = select_cells(&cells, select, cfg.task);
    let out = SweepOutput { cells, table };
    fs::create_dir_all(&root).map_err(Error::io(&root))?;
    write(&root, "sweep_cells.tsv", &sweep_to_tsv(&out.cells.iter().map(|c| (c.clone(), None)).collect::<Vec<_>>(), cfg.task))?;
    write(&root, "sweep_table.tsv", &sweep_to_tsv(&out.table, cfg.task))?;
    Ok(out)
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Mlp => "mlp",
        Family::Cnn => "cnn",
        Family::Lstm => "lstm",
        Family::Transformer => "transformer",
    }
}

fn select_cells(cells: &[SweepCell], select: Selection, task: Task) -> Vec<(SweepCell, Option<f64>)> {
    let chosen: Vec<&SweepCell> = match select {
        Selection::All => cells.iter().collect(),
        Selection::BestByValidation => {
            let mut best: BTreeMap<(u8, usize, usize, bool), &SweepCell> = BTreeMap::new();
            for c in cells.iter().filter(|c| c.error.is_none()) {
                let key = (c.family as u8, c.window, c.diff_lag, c.cross_modal);
                let v = c.validation.unwrap_or(f64::NEG_INFINITY);
                match best.get(&key) {
                    Some(b) if b.validation.unwrap_or(f64::NEG_INFINITY) >= v => {}
                    _ => {
                        best.insert(key, c);
                    }
                }
            }
            // Keep failed cells visible in the table too.
            let mut v: Vec<&SweepCell> = best.into_values().collect();
            v.extend(cells.iter().filter(|c| c.error.is_some()));
            v
        }
    };
    let headline = if task == Task::Mixture { "top1_at_0.1" } else { "acc1" };
    chosen
        .iter()
        .map(|c| {
            let delta = if c.cross_modal {
                chosen
                    .iter()
                    .find(|b| {
                        !b.cross_modal
                            && b.family == c.family
                            && b.window == c.window
                            && b.diff_lag == c.diff_lag
                            && (select == Selection::BestByValidation || b.lr == c.lr)
                    })
                    .and_then(|b| Some(c.metrics.get(headline)? - b.metrics.get(headline)?))
            } else {
                None
            };
            ((*c).clone(), delta)
        })
        .collect()
}

pub fn sweep_to_tsv(rows: &[(SweepCell, Option<f64>)], task: Task) -> String {
    let cols = metric_columns(task);
    let mut out = String::from("family\twindow\tdiff_lag\tlr\tmode");
    for c in cols {
        write!(out, "\t{c}").unwrap();
    }
    out.push_str("\tvalidation\tdelta_acc1\tstatus\n");
    for (c, delta) in rows {
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            family_name(c.family),
            c.window,
            c.diff_lag,
            c.lr,
            if c.cross_modal { "cross-modal" } else { "sensor-only" }
        )
        .unwrap();
        for col in cols {
            match c.metrics.get(*col) {
                Some(v) => write!(out, "\t{v}").unwrap(),
                None => out.push_str("\tNA"),
            }
        }
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let status = c.error.as_ref().map_or("ok".to_string(), |e| format!("FAILED: {e}"));
        writeln!(out, "\t{}\t{}\t{}", opt(c.validation), opt(*delta), status.replace(['\t', '\n'], " ")).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoRow {
    pub day: u8,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoOutput {
    pub rows: Vec<LodoRow>,
    pub mean: Scores,
    /// Population standard deviation over the six folds.
    pub std: Scores,
}

impl LodoOutput {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("held_out_day\tacc1\tacc5\tmacro_f1\n");
        let mut line = |name: &str, s: &Scores| writeln!(out, "{name}\t{}\t{}\t{}", s.acc1, s.acc5, s.macro_f1).unwrap();
        for r in &self.rows {
            line(&r.day.to_string(), &r.scores);
        }
        line("mean", &self.mean);
        line("std", &self.std);
        out
    }

    /// Fold with the lowest Acc@1 (earliest day on ties).
    pub fn worst_day(&self) -> u8 {
        self.rows
            .iter()
            .min_by(|a, b| a.scores.acc1.total_cmp(&b.scores.acc1).then(a.day.cmp(&b.day)))
            .map(|r| r.day)
            .expect("six folds")
    }
}

/// Mean and population std of exactly the given values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Six runs, each holding out one acquisition day.
pub fn lodo(config: &ExperimentConfig) -> Result<LodoOutput> {
    if config.task == Task::Mixture {
        return Err(Error::config("task", "leave-one-day-out needs a base dataset"));
    }
    let (cfg, _) = config.resolve()?;
    let root = cfg.output_dir();
    let mut rows = Vec::with_capacity(6);
    for day in 1..=6u8 {
        let mut c = cfg.clone();
        c.split = Some(SplitPolicy::LeaveOneDayOut(day).to_string());
        c.output_dir = Some(root.join(format!("day{day}")));
        let out = run(&c)?;
        rows.push(LodoRow {
            day,
            scores: Scores::from_report(primary_report(&out, c.task)?)?,
        });
    }
    let col = |f: fn(&Scores) -> f64| mean_std(&rows.iter().map(|r| f(&r.scores)).collect::<Vec<_>>());
    let (a1, s1) = col(|s| s.acc1);
    let (a5, s5) = col(|s| s.acc5);
    let (f, sf) = col(|s| s.macro_f1);
    let out = LodoOutput {
        rows,
        mean: Scores { acc1: a1, acc5: a5, macro_f1: f },
        std: Scores { acc1: s1, acc5: s5, macro_f1: sf },
    };
    write(&root, "lodo.tsv", &out.to_tsv())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampRow {
    pub steps: usize,
    pub scores: Scores,
}

pub fn timestamps_to_tsv(rows: &[TimestampRow]) -> String {
    let mut out = String::from("steps\tacc1\tacc5\tmacro_f1\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}", r.steps, r.scores.acc1, r.scores.acc5, r.scores.macro_f1).unwrap();
    }
    out
}

/// Retrains with every session truncated to its first `n` (differenced) steps.
pub fn ablate_timestamps(config: &ExperimentConfig, steps: &[usize]) -> Result<Vec<TimestampRow>> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("no truncation lengths given".into()));
    }
    let (cfg, _) = config.resolve()?;
    let w = cfg.preprocess_config().window;
    if let Some(&n) = steps.iter().find(|&&n| n < w) {
        return Err(Error::InsufficientLength(format!("truncation to {n} steps is shorter than the window {w}")));
    }
    let root = cfg.output_dir();
    let mut rows = Vec::new();
    for &n in steps {
        let mut c = cfg.clone();
        c.preprocess.truncate = Some(n);
        c.output_dir = Some(root.join(format!("steps{n}")));
        let out = run(&c)?;
        rows.push(TimestampRow {
            steps: n,
            scores: Scores::from_report(primary_report(&out, c.task)?)?,
        });
    }
    write(&root, "timestamps.tsv", &timestamps_to_tsv(&rows))?;
    Ok(rows)
}

/// Channel-mask ablation of a finished classification run on its test split.
pub fn ablate_channels(dir: &Path) -> Result<AblationTable> {
    let (cfg, ckpt) = load_run(dir)?;
    let prepared = prepare(&cfg, Some(&ckpt.stats))?;
    let split = prepared
        .eval
        .iter()
        .find(|s| s.tag == cfg.task.primary_split())
        .ok_or_else(|| Error::Split("run has no test split".into()))?;
    let labels = split
        .labels()
        .ok_or_else(|| Error::config("task", "channel ablation needs a classification run"))?;
    let channels = cfg.task.dataset_kind().schema().channels().to_vec();
    let table = analysis::channel_mask_ablation(&ckpt.model, &split.x, labels, &channels)?;
    write(dir, "ablation_channels.tsv", &table.to_tsv())?;
    Ok(table)
}

/// All per-timestep readings of a dataset as `[rows, d]`, optionally z-scored.
pub fn dataset_rows(root: &Path, kind: DatasetKind, standardized: bool) -> Result<(Tensor, Vec<String>)> {
    let manifest = ingest::scan_dataset(root, kind)?;
    let sessions = ingest::load_sessions(&manifest, &Registry::builtin())?;
    let d = manifest.schema.len();
    let mut data = Vec::new();
    for s in &sessions {
        data.extend_from_slice(s.readings.data());
    }
    let n = data.len() / d;
    let mut rows = Tensor::new(vec![n, d], data)?;
    if standardized {
        let w = Window {
            values: rows.clone(),
            label: sessions[0].label.clone(),
            source_session: "all".into(),
            offset: 0,
            provenance: crate::data::Provenance {
                diff_lag: 0,
                window: n,
                stride: n,
                stats_id: None,
            },
        };
        let stats = preprocess::fit_standardizer(std::slice::from_ref(&w), "all")?;
        rows = preprocess::standardize(&[w], &stats)?.remove(0).values;
    }
    Ok((rows, manifest.schema.channels().to_vec()))
}

/// PCA loadings and the channel correlation matrix of a dataset.
pub fn analyze_dataset(root: &Path, kind: DatasetKind, standardized: bool, k: usize) -> Result<(PcaResult, Vec<Vec<f64>>, Vec<String>)> {
    let (rows, names) = dataset_rows(root, kind, standardized)?;
    let pca = analysis::pca(&rows, k)?;
    let corr = analysis::pearson_correlation(&rows)?;
    Ok((pca, corr, names))
}
