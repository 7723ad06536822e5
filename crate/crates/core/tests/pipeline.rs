//! Small end-to-end runs over synthetic data.

use olfact_core::data::SplitTag;
use olfact_core::experiment::{self, ExperimentConfig, Task};
use olfact_core::nn::ModelConfig;
use olfact_core::synth::{self, MixtureSynthConfig, SyntheticConfig};
use std::fs;
use std::path::Path;

fn tiny_model(classes: usize) -> ModelConfig {
    ModelConfig {
        latent_dim: 16,
        layers: 1,
        heads: 2,
        num_classes: classes,
        ..ModelConfig::default()
    }
}

fn base_dataset(root: &Path) -> SyntheticConfig {
    let cfg = SyntheticConfig {
        num_classes: 3,
        steps: 200,
        ..Default::default()
    };
    synth::generate_synthetic(&cfg, root).unwrap();
    cfg
}

fn base_config(data: &Path, out: &Path) -> ExperimentConfig {
    let mut e = ExperimentConfig::new(Task::BaseClassify, data);
    e.model = tiny_model(3);
    e.train.epochs = Some(2);
    e.output_dir = Some(out.to_path_buf());
    e
}

fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with("report_") || name.starts_with("predictions_") || name == "loss_trace.csv"
        })
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    base_dataset(&tmp.path().join("data"));
    let a = experiment::run(&base_config(&tmp.path().join("data"), &tmp.path().join("a"))).unwrap();
    let b = experiment::run(&base_config(&tmp.path().join("data"), &tmp.path().join("b"))).unwrap();
    let (ra, rb) = (reports(&a.dir), reports(&b.dir));
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.dir.join("checkpoint.json")).unwrap(),
        fs::read(b.dir.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn reloaded_checkpoint_reproduces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    base_dataset(&tmp.path().join("data"));
    let out = experiment::run(&base_config(&tmp.path().join("data"), &tmp.path().join("run"))).unwrap();
    assert!(out.reports.contains_key(&SplitTag::Test));
    assert!(experiment::verify_run(&out.dir).unwrap().is_empty());
    let again = experiment::eval_run(&out.dir).unwrap();
    for (tag, r) in &out.reports {
        assert_eq!(again[tag].to_json(), r.to_json());
    }
}

#[test]
fn truncating_to_the_full_length_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let synth = base_dataset(&data);
    let cfg = base_config(&data, &tmp.path().join("abl"));
    let full = synth.steps - 25;
    let rows = experiment::ablate_timestamps(&cfg, &[full]).unwrap();
    let plain = experiment::run(&base_config(&data, &tmp.path().join("plain"))).unwrap();
    let Some(olfact_core::metrics::Report::Classification(r)) = plain.reports.get(&SplitTag::Test) else {
        panic!("missing test report");
    };
    assert_eq!(rows[0].scores.acc1, r.acc1);
    assert_eq!(rows[0].scores.macro_f1, r.macro_f1);
    assert!(tmp.path().join("abl/timestamps.tsv").exists());
    assert!(experiment::ablate_timestamps(&cfg, &[10]).is_err());
}

#[test]
fn channel_ablation_leaves_the_checkpoint_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    base_dataset(&tmp.path().join("data"));
    let out = experiment::run(&base_config(&tmp.path().join("data"), &tmp.path().join("run"))).unwrap();
    let before = fs::read(out.dir.join("checkpoint.json")).unwrap();
    let (_, ckpt_before) = experiment::load_run(&out.dir).unwrap();
    let table = experiment::ablate_channels(&out.dir).unwrap();
    assert_eq!(table.rows.len(), 6);
    for row in &table.rows {
        assert!((row.delta_acc1 - (row.acc1 - table.baseline_acc1)).abs() < 1e-12);
    }
    assert_eq!(fs::read(out.dir.join("checkpoint.json")).unwrap(), before);
    let (_, ckpt_after) = experiment::load_run(&out.dir).unwrap();
    for id in ckpt_before.model.store.ids() {
        assert_eq!(ckpt_before.model.store.value(id), ckpt_after.model.store.value(id));
    }
}

#[test]
fn mixture_runs_warn_about_differencing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mix");
    let mcfg = MixtureSynthConfig {
        steps: 120,
        ..Default::default()
    };
    synth::generate_mixture_synthetic(&mcfg, &data).unwrap();
    let mut e = ExperimentConfig::new(Task::Mixture, &data);
    e.model = tiny_model(3);
    e.train.epochs = Some(1);
    e.output_dir = Some(tmp.path().join("run"));
    let (_, quiet) = e.resolve().unwrap();
    assert!(quiet.is_empty(), "{quiet:?}");
    e.preprocess.diff_lag = Some(5);
    let (resolved, warnings) = e.resolve().unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(resolved.model.mixture_outputs, 12);
    let out = experiment::run(&e).unwrap();
    assert!(out.warnings.iter().any(|w| w.contains("diff")));
    assert!(out.reports.contains_key(&SplitTag::TestSeen));
    assert!(out.reports.contains_key(&SplitTag::TestUnseen));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = "task = \"base-classify\"\ndataset = \"x\"\n[train]\nepochz = 3\n";
    assert!(ExperimentConfig::from_toml(text).is_err());
    let ok = base_config(Path::new("x"), Path::new("y"));
    let round = ExperimentConfig::from_toml(&ok.to_toml()).unwrap();
    assert_eq!(round.to_toml(), ok.to_toml());
}
