//! Acceptance runner: one PASS/FAIL/SKIP line per criterion.
//!
//! Run with `cargo test --test acceptance`. Set `OLFACT_REAL_DATA=<dir>` to
//! include the optional check on recorded sensor data.

mod common;

use common::grad_suite::{self, SEEDS};
use olfact_core::autodiff::Graph;
use olfact_core::data::SplitTag;
use olfact_core::experiment::{self, ExperimentConfig, Task};
use olfact_core::gcms::{self, BinConfig, EiSpectrum};
use olfact_core::metrics::{self, Report};
use olfact_core::nn::{Family, ModelConfig};
use olfact_core::objectives;
use olfact_core::preprocess;
use olfact_core::synth::{self, DayShift, MixtureSynthConfig, SyntheticConfig};
use olfact_core::Tensor;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn small_model(classes: usize) -> ModelConfig {
    ModelConfig {
        latent_dim: 32,
        layers: 1,
        heads: 4,
        num_classes: classes,
        ..ModelConfig::default()
    }
}

fn acc1(reports: &std::collections::BTreeMap<SplitTag, Report>, tag: SplitTag) -> f64 {
    match reports.get(&tag) {
        Some(Report::Classification(r)) => r.acc1,
        _ => panic!("no classification report for {tag}"),
    }
}

fn window_counts() -> Outcome {
    let a = preprocess::count_windows(600, 50, 25, false);
    let b = preprocess::count_windows(600, 100, 50, false);
    common::checks::window_enumeration(11, 1000);
    ensure(a == 23 && b == 11, format!("(600,50,25)->{a}, (600,100,50)->{b}, 1000 random triples agree"))
}

fn gradients() -> Outcome {
    let mut worst = (0.0f64, "");
    for (name, case) in grad_suite::CASES {
        for seed in 0..SEEDS {
            let e = case(seed);
            if e > worst.0 || e.is_nan() {
                worst = (e, name);
            }
        }
    }
    ensure(
        worst.0 < grad_suite::TOL,
        format!("{} cases x {SEEDS} seeds, worst rel err {:.2e} ({})", grad_suite::CASES.len(), worst.0, worst.1),
    )
}

fn scalar(f: impl FnOnce(&mut Graph) -> olfact_core::autodiff::Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).item()
}

fn loss_identities() -> Outcome {
    let single = scalar(|g| {
        let a = g.input(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let b = g.input(Tensor::new(vec![1, 4], vec![1.0, 0.2, -0.7, 0.1]).unwrap());
        objectives::symmetric_contrastive(g, a, b, 0.07).unwrap()
    });
    let p = [0.1, 0.2, 0.3, 0.4];
    let kl_self = objectives::kl_divergence(&p, &p);
    let mut onehot = vec![0.0; 12];
    onehot[4] = 1.0;
    let kl_uniform = scalar(|g| {
        let z = g.input(Tensor::zeros(&[1, 12]));
        objectives::kl_to_logits(g, z, &Tensor::new(vec![1, 12], onehot.clone()).unwrap()).unwrap()
    });
    let ce = scalar(|g| {
        let z = g.input(Tensor::zeros(&[3, 50]));
        objectives::cross_entropy(g, z, &[0, 17, 49]).unwrap()
    });
    let logits = vec![0.7, -1.2, 2.5, 0.0, -0.3, 1.1];
    let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let focal = scalar(|g| {
        let s = g.input(Tensor::new(vec![2, 3], logits.clone()).unwrap());
        objectives::focal_bce(g, s, &Tensor::new(vec![2, 3], targets.clone()).unwrap(), 0.5, 0.0).unwrap()
    });
    let bce: f64 = logits
        .iter()
        .zip(&targets)
        .map(|(&s, &r)| {
            let q = 1.0 / (1.0 + (-s).exp());
            -(r * q.ln() + (1.0 - r) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / 6.0;
    let checks = [
        single == 0.0,
        kl_self == 0.0,
        (kl_uniform - 12f64.ln()).abs() < 1e-9,
        (ce - 50f64.ln()).abs() < 1e-9,
        (focal - 0.5 * bce).abs() < 1e-10,
    ];
    ensure(
        checks.iter().all(|&c| c),
        format!(
            "contrastive(N=1)={single}, KL(p|p)={kl_self}, KL(onehot|uniform)-ln12={:.1e}, CE-ln50={:.1e}, focal-0.5BCE={:.1e}",
            kl_uniform - 12f64.ln(),
            ce - 50f64.ln(),
            focal - 0.5 * bce
        ),
    )
}

fn metric_oracles() -> Outcome {
    common::checks::classification_metrics(21, 1000);
    common::checks::mixture_metrics(22, 1000);
    // Single-label batches: dynamic top-K must equal top-1 exactly.
    let mut r = common::rng(23);
    for _ in 0..1000 {
        let scores = common::random_tensor(&mut r, &[8, 12], 1.0);
        let labels: Vec<usize> = (0..8).map(|i| (i * 5 + 3) % 12).collect();
        let mut t = vec![0.0; 96];
        for (i, &y) in labels.iter().enumerate() {
            t[i * 12 + y] = 1.0;
        }
        let target = Tensor::new(vec![8, 12], t).unwrap();
        let d = metrics::dynamic_topk(&scores, &target).unwrap();
        let a = metrics::topk_accuracy(&scores, &labels, 1).unwrap();
        if d != a {
            return Outcome::Fail(format!("dynamic top-K {d} != top-1 {a}"));
        }
    }
    Outcome::Pass("2000 random batches match brute force; dynamic top-K == top-1 on 1000 single-label batches".into())
}

fn masking() -> Outcome {
    let worst = common::checks::padding_leak();
    let rejected = olfact_core::nn::BatchMask::new(vec![4, 0], 4).is_err();
    ensure(
        worst < 1e-9 && rejected,
        format!("max embedding change {worst:.1e}; all-padding rejected: {rejected}"),
    )
}

fn classification_data(root: &Path) -> SyntheticConfig {
    let cfg = SyntheticConfig {
        signature_low: 500.0,
        signature_high: 510.0,
        drift_coef: 0.9995,
        drift_std: 0.5,
        day_offset_std: 40.0,
        noise_std: 2.0,
        oscillation_low: 2.0,
        oscillation_high: 12.0,
        ..Default::default()
    };
    synth::generate_synthetic(&cfg, root).unwrap();
    cfg
}

fn base_run(data: &Path, out: PathBuf, p: usize, epochs: usize) -> ExperimentConfig {
    let mut e = ExperimentConfig::new(Task::BaseClassify, data);
    e.model = small_model(5);
    e.preprocess.window = Some(50);
    e.preprocess.diff_lag = Some(p);
    e.train.epochs = Some(epochs);
    e.output_dir = Some(out);
    e
}

fn classification(work: &Path) -> Outcome {
    let data = work.join("base");
    classification_data(&data);
    let with = experiment::run(&base_run(&data, work.join("p25"), 25, 20)).unwrap();
    let without = experiment::run(&base_run(&data, work.join("p0"), 0, 20)).unwrap();
    let (a, b) = (acc1(&with.reports, SplitTag::Test), acc1(&without.reports, SplitTag::Test));
    ensure(
        a > 0.9 && a - b >= 0.10,
        format!("transformer w=50, 20 epochs: Acc@1 p=25 {a:.3}, p=0 {b:.3}"),
    )
}

fn mixture(work: &Path) -> Outcome {
    let data = work.join("mix");
    synth::generate_mixture_synthetic(&MixtureSynthConfig::default(), &data).unwrap();
    let mut e = ExperimentConfig::new(Task::Mixture, &data);
    e.model = small_model(5);
    e.train.epochs = Some(20);
    e.train.lr = Some(3e-3);
    e.output_dir = Some(work.join("mix-run"));
    let out = experiment::run(&e).unwrap();
    let Some(Report::Mixture(r)) = out.reports.get(&SplitTag::TestSeen) else {
        return Outcome::Fail("no test-seen report".into());
    };
    ensure(
        r.mae < 0.05 && r.top1_at_01 > 0.8,
        format!("4 odorants, 0.1 grid, test-seen: MAE {:.4}, Top-1@0.1 {:.3}", r.mae, r.top1_at_01),
    )
}

fn lodo(work: &Path) -> Outcome {
    let data = work.join("lodo");
    let cfg = SyntheticConfig {
        drift_std: 0.3,
        day_offset_std: 3.0,
        noise_std: 2.0,
        oscillation_high: 0.0,
        day_shift: Some(DayShift {
            day: 1,
            offset: 150.0,
            gain: 1.3,
        }),
        ..Default::default()
    };
    synth::generate_synthetic(&cfg, &data).unwrap();
    let e = base_run(&data, work.join("lodo-run"), 0, 8);
    let out = experiment::lodo(&e).unwrap();
    let accs: Vec<String> = out.rows.iter().map(|r| format!("d{}={:.2}", r.day, r.scores.acc1)).collect();
    let n = out.rows.len() as f64;
    let mean = out.rows.iter().map(|r| r.scores.acc1).sum::<f64>() / n;
    let std = (out.rows.iter().map(|r| (r.scores.acc1 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let stats_ok = (mean - out.mean.acc1).abs() < 1e-12 && (std - out.std.acc1).abs() < 1e-12;
    ensure(
        out.rows.len() == 6 && out.worst_day() == 1 && stats_ok,
        format!(
            "{} folds [{}], worst day {}, mean {:.3} +- {:.3}",
            out.rows.len(),
            accs.join(" "),
            out.worst_day(),
            out.mean.acc1,
            out.std.acc1
        ),
    )
}

fn gcms_embedding() -> Outcome {
    let cfg = BinConfig::default();
    let a1 = EiSpectrum::new("a", vec![(41.0, 100.0)]).unwrap();
    let a2 = EiSpectrum::new("a", vec![(41.0, 50.0), (43.2, 100.0)]).unwrap();
    let b1 = EiSpectrum::new("b", vec![(100.7, 10.0), (499.5, 4.0)]).unwrap();
    let spectra = [a1.clone(), a2.clone(), b1.clone()];
    let binned: Vec<Vec<f64>> = spectra.iter().map(|s| gcms::bin_spectrum(s, &cfg).unwrap()).collect();
    let lengths_ok = binned.iter().all(|v| v.len() == 460);
    let max_ok = binned.iter().all(|v| v.iter().copied().fold(f64::MIN, f64::max) == 1.0);
    let two_level = gcms::ingredient_spec_embedding(&[vec![a1, a2], vec![b1]], &cfg).unwrap();
    let flat: Vec<f64> = (0..460).map(|i| binned.iter().map(|v| v[i]).sum::<f64>() / 3.0).collect();
    let gap = two_level.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let cdf = gcms::mz_coverage_cdf(&spectra, gcms::MZ_LO).unwrap();
    let top = cdf.eval(gcms::MZ_HI);
    ensure(
        lengths_ok && max_ok && two_level.len() == 460 && gap > 1e-3 && top == 1.0,
        format!("length 460: {lengths_ok}, max 1.0: {max_ok}, two-level vs flat gap {gap:.3}, CDF at upper bound {top}"),
    )
}

fn determinism(work: &Path) -> Outcome {
    let data = work.join("det");
    let cfg = SyntheticConfig {
        num_classes: 3,
        steps: 200,
        ..Default::default()
    };
    synth::generate_synthetic(&cfg, &data).unwrap();
    let mk = |name: &str| {
        let mut e = base_run(&data, work.join(name), 25, 3);
        e.model = small_model(3);
        e
    };
    let a = experiment::run(&mk("det-a")).unwrap();
    let b = experiment::run(&mk("det-b")).unwrap();
    let mut same = true;
    let mut files = 0;
    for tag in a.reports.keys() {
        for name in [format!("report_{tag}.json"), format!("report_{tag}.tsv"), format!("predictions_{tag}.tsv")] {
            same &= std::fs::read(a.dir.join(&name)).unwrap() == std::fs::read(b.dir.join(&name)).unwrap();
            files += 1;
        }
    }
    ensure(same && files > 0, format!("{files} report files byte-identical across two runs"))
}

fn real_data(work: &Path) -> Outcome {
    let Ok(root) = std::env::var("OLFACT_REAL_DATA") else {
        return Outcome::Skip("OLFACT_REAL_DATA not set; no recorded data available".into());
    };
    let mk = |family: Family, name: &str| {
        let mut e = ExperimentConfig::new(Task::BaseClassify, &root);
        e.model = ModelConfig::for_family(family);
        e.preprocess.window = Some(100);
        e.preprocess.diff_lag = Some(25);
        e.output_dir = Some(work.join(name));
        e
    };
    let t = experiment::run(&mk(Family::Transformer, "real-transformer")).unwrap();
    let m = experiment::run(&mk(Family::Mlp, "real-mlp")).unwrap();
    let (a, b) = (acc1(&t.reports, SplitTag::Test), acc1(&m.reports, SplitTag::Test));
    ensure(a > b, format!("transformer Acc@1 {a:.3} vs MLP {b:.3}"))
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path().to_path_buf();
    type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let criteria: Vec<Criterion> = vec![
        ("window-count oracle", Duration::from_secs(1), Box::new(window_counts)),
        ("gradient suite", minutes(2), Box::new(gradients)),
        ("loss identities", minutes(1), Box::new(loss_identities)),
        ("metric oracles", minutes(1), Box::new(metric_oracles)),
        ("mask correctness", minutes(1), Box::new(masking)),
        ("synthetic classification", minutes(10), Box::new(|| classification(&w))),
        ("synthetic mixture", minutes(10), Box::new(|| mixture(&w))),
        ("leave-one-day-out harness", minutes(10), Box::new(|| lodo(&w))),
        ("gc-ms embedding", minutes(1), Box::new(gcms_embedding)),
        ("determinism", minutes(10), Box::new(|| determinism(&w))),
        ("real-data directional check (optional)", Duration::MAX, Box::new(|| real_data(&w))),
    ];
    let mut failed = 0;
    for (name, budget, check) in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::Fail(format!("panicked: {msg}"))
            });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Outcome::Pass(d) if elapsed > *budget => {
                Outcome::Fail(format!("{d}; took {elapsed:.1?}, budget {budget:.0?}"))
            }
            o => o,
        };
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail} [{elapsed:.1?}]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
