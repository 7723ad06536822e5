use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use olfact_core::analysis;
use olfact_core::data::{Registry, SplitTag};
use olfact_core::experiment::{self, ExperimentConfig};
use olfact_core::gcms;
use olfact_core::ingest::{self, DatasetKind, SplitPolicy};
use olfact_core::nn::Family;
use olfact_core::synth::{self, MixtureSynthConfig, SyntheticConfig};

/// Environment variable that overrides every output directory.
const OUTPUT_ENV: &str = "OLFACT_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "olfact", version, about = "Gas-sensor odor recognition experiments")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Base,
    Mixture,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Base => DatasetKind::Base,
            Kind::Mixture => DatasetKind::Mixture,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Mlp,
    Cnn,
    Lstm,
    Transformer,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Mlp => Family::Mlp,
            FamilyArg::Cnn => Family::Cnn,
            FamilyArg::Lstm => Family::Lstm,
            FamilyArg::Transformer => Family::Transformer,
        }
    }
}

/// Flags that override fields of the experiment config.
#[derive(clap::Args, Clone)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    family: Option<FamilyArg>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    diff_lag: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(o) = std::env::var_os(OUTPUT_ENV) {
            cfg.output_dir = Some(PathBuf::from(o));
        }
        if let Some(s) = &self.split {
            cfg.split = Some(s.clone());
        }
        if let Some(f) = self.family {
            cfg.model.family = f.into();
        }
        if self.window.is_some() {
            cfg.preprocess.window = self.window;
        }
        if self.diff_lag.is_some() {
            cfg.preprocess.diff_lag = self.diff_lag;
        }
        if self.epochs.is_some() {
            cfg.train.epochs = self.epochs;
        }
        if self.batch_size.is_some() {
            cfg.train.batch_size = self.batch_size;
        }
        if self.lr.is_some() {
            cfg.train.lr = self.lr;
        }
        if self.seed.is_some() {
            cfg.train.seed = self.seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value = "base")]
        kind: Kind,
        /// Dataset root to write.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (TOML); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write GC-MS spectra and formulas (base only).
        #[arg(long)]
        gcms: bool,
    },
    /// Validate a dataset directory and print per-split channel statistics.
    IngestCheck {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        kind: Kind,
        #[arg(long)]
        split: Option<String>,
        /// Write the summary table here instead of stdout.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Difference, window and standardize; writes stats.json and windows.tsv.
    Preprocess {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Build ingredient-level GC-MS embeddings.
    GcmsEmbed {
        #[arg(long)]
        spectra: Option<PathBuf>,
        #[arg(long)]
        formulas: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ingredients used to fit the atom statistics (comma separated; all by default).
        #[arg(long, value_delimiter = ',')]
        train_ingredients: Option<Vec<String>>,
        /// Descriptor element set.
        #[arg(long, value_delimiter = ',', default_value = "C,H,O,N,S,Cl")]
        elements: Vec<String>,
    },
    /// Train and evaluate one configuration.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-evaluate a run directory from its checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Fail unless the stored reports are reproduced exactly.
        #[arg(long)]
        check: bool,
    },
    /// Grid over learning rate, window and difference lag.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Leave-one-day-out cross-validation.
    Lodo {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Mask each sensor channel of a finished run's test windows.
    AblateChannels {
        #[arg(long)]
        run: PathBuf,
    },
    /// Retrain on sessions truncated to their first N steps.
    AblateTimestamps {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<usize>,
    },
    /// PCA loadings and channel correlation of a dataset.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "base")]
        kind: Kind,
        #[arg(long, default_value_t = 2)]
        components: usize,
        /// Z-score every channel first.
        #[arg(long)]
        standardized: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<PathBuf>, default: &str) -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .or(flag)
        .unwrap_or_else(|| PathBuf::from(default))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| olfact_core::Error::config("synth", e.to_string()).into())
        }
    }
}

fn print_reports(reports: &std::collections::BTreeMap<SplitTag, olfact_core::metrics::Report>) {
    for (tag, r) in reports {
        println!("[{tag}]");
        print!("{}", r.to_tsv());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            kind,
            out,
            config,
            seed,
            gcms,
        } => {
            let manifest = match kind {
                Kind::Base => {
                    let mut cfg: SyntheticConfig = read_toml(config.as_deref())?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    cfg.gcms |= gcms;
                    synth::generate_synthetic(&cfg, &out)?
                }
                Kind::Mixture => {
                    if gcms {
                        bail!(olfact_core::Error::config("gcms", "GC-MS files are only generated for base data"));
                    }
                    let mut cfg: MixtureSynthConfig = read_toml(config.as_deref())?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    synth::generate_mixture_synthetic(&cfg, &out)?
                }
            };
            println!("wrote {} sessions to {}", manifest.entries.len(), out.display());
        }
        Command::IngestCheck {
            dataset,
            kind,
            split,
            summary,
        } => {
            let kind: DatasetKind = kind.into();
            let manifest = ingest::scan_dataset(&dataset, kind)?;
            let policy = match split {
                Some(s) => s.parse()?,
                None if kind == DatasetKind::Mixture => SplitPolicy::Mixture,
                None => SplitPolicy::LastDay,
            };
            let manifest = ingest::build_splits(&manifest, policy)?;
            for w in ingest::layout_warnings(&manifest) {
                log::warn!("{w}");
                eprintln!("warning: {w}");
            }
            let sessions = ingest::load_sessions(&manifest, &Registry::builtin())?;
            println!(
                "{} sessions, {} ingredients, split policy {policy}",
                sessions.len(),
                manifest.ingredients().len()
            );
            for (tag, n) in manifest.split_counts() {
                println!("{tag}\t{n}");
            }
            let table = ingest::summary_to_tsv(&ingest::summarize(&sessions)?);
            match summary {
                Some(p) => write_file(&p, &table)?,
                None => print!("{table}"),
            }
        }
        Command::Preprocess { overrides } => {
            let (cfg, warnings) = overrides.load()?.resolve()?;
            warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            let prepared = experiment::prepare(&cfg, None)?;
            let dir = cfg.output_dir();
            let mut windows = String::from("window_id\tsplit\tsession\toffset\tdiff_lag\twindow\tstride\tstats_id\n");
            for split in std::iter::once(&prepared.train).chain(&prepared.eval) {
                for (id, w) in split.window_ids().iter().zip(&split.windows) {
                    let p = &w.provenance;
                    writeln!(
                        windows,
                        "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        split.tag,
                        w.source_session,
                        w.offset,
                        p.diff_lag,
                        p.window,
                        p.stride,
                        p.stats_id.as_deref().unwrap_or("")
                    )?;
                }
                println!("{}\t{} windows", split.tag, split.windows.len());
            }
            write_file(&dir.join("stats.json"), &serde_json::to_string_pretty(&prepared.stats)?)?;
            write_file(&dir.join("windows.tsv"), &windows)?;
            println!("stats {} written to {}", prepared.stats.id, dir.display());
        }
        Command::GcmsEmbed {
            spectra,
            formulas,
            out,
            train_ingredients,
            elements,
        } => {
            if spectra.is_none() && formulas.is_none() {
                bail!(olfact_core::Error::config("gcms-embed", "give --spectra and/or --formulas"));
            }
            let mut all = Vec::new();
            if let Some(p) = spectra {
                let records = gcms::read_spectra_tsv(&p)?;
                all.extend(gcms::spec_embeddings(&records, &gcms::BinConfig::default())?);
            }
            if let Some(p) = formulas {
                let records = gcms::read_formulas_tsv(&p)?;
                let (emb, stats) = gcms::atom_embeddings(&records, &elements, train_ingredients.as_deref())?;
                log::info!("atom statistics: {:?}", stats);
                all.extend(emb);
            }
            gcms::write_embeddings_tsv(&out, &all)?;
            println!("wrote {} embeddings to {}", all.len(), out.display());
        }
        Command::Train { overrides } => {
            let cfg = overrides.load()?;
            let out = experiment::run(&cfg)?;
            out.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            print_reports(&out.reports);
            println!("run directory: {}", out.dir.display());
        }
        Command::Eval { run, check } => {
            if check {
                let bad = experiment::verify_run(&run)?;
                if !bad.is_empty() {
                    let names: Vec<String> = bad.iter().map(|t| t.to_string()).collect();
                    bail!("reports differ from the stored ones for: {}", names.join(", "));
                }
                println!("all stored reports reproduced");
            }
            print_reports(&experiment::eval_run(&run)?);
        }
        Command::Sweep { overrides } => {
            let cfg = overrides.load()?;
            let out = experiment::sweep(&cfg)?;
            print!("{}", experiment::sweep_to_tsv(&out.table, cfg.task));
            let failed = out.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!("warning: {failed} of {} cells failed", out.cells.len());
            }
        }
        Command::Lodo { overrides } => {
            let out = experiment::lodo(&overrides.load()?)?;
            print!("{}", out.to_tsv());
        }
        Command::AblateChannels { run } => {
            print!("{}", experiment::ablate_channels(&run)?.to_tsv());
        }
        Command::AblateTimestamps { overrides, steps } => {
            let rows = experiment::ablate_timestamps(&overrides.load()?, &steps)?;
            print!("{}", experiment::timestamps_to_tsv(&rows));
        }
        Command::Analyze {
            dataset,
            kind,
            components,
            standardized,
            out,
        } => {
            let (pca, corr, names) = experiment::analyze_dataset(&dataset, kind.into(), standardized, components)?;
            let loadings = analysis::pca_to_tsv(&pca, &names);
            let correlation = analysis::matrix_to_tsv(&corr, &names);
            let dir = output_dir(out, "analysis");
            write_file(&dir.join("pca_loadings.tsv"), &loadings)?;
            write_file(&dir.join("correlation.tsv"), &correlation)?;
            print!("{loadings}");
            println!("tables written to {}", dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<olfact_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
