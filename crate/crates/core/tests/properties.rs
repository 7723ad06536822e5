//! Property tests for the invariants each module promises.

use olfact_core::analysis;
use olfact_core::autodiff::Graph;
use olfact_core::data::{Category, Label, SubstanceLabel};
use olfact_core::gcms::{self, BinConfig, EiSpectrum};
use olfact_core::metrics;
use olfact_core::objectives;
use olfact_core::preprocess::{self, PreprocessConfig};
use olfact_core::Tensor;
use proptest::prelude::*;

fn label() -> Label {
    Label::Substance(SubstanceLabel {
        class_index: 3,
        name: "apple".into(),
        category: Category::Fruits,
    })
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| tensor(vec![rows, cols], d))
}

fn simplex_rows(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, k), rows).prop_map(move |rs| {
        let mut out = Vec::new();
        for mut r in rs {
            r[0] += 1e-3;
            let s: f64 = r.iter().sum();
            out.extend(r.iter().map(|v| v / s));
        }
        tensor(vec![rows, k], out)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn slice_count_matches_formula(t in 1usize..400, half in 1usize..40, p in 0usize..60) {
        let w = 2 * half;
        let d = 2;
        prop_assume!(p < t);
        let x = tensor(vec![t, d], (0..t * d).map(|i| i as f64).collect());
        let diffed = preprocess::temporal_difference(&x, p).unwrap();
        let cfg = PreprocessConfig::new(p, w);
        let windows = preprocess::slice_windows(&diffed, &cfg, &label(), "s");
        prop_assert_eq!(windows.len(), preprocess::count_windows(t - p, w, w / 2, false));
        for pair in windows.windows(2) {
            prop_assert!(pair[0].offset < pair[1].offset);
            prop_assert_eq!(pair[1].offset - pair[0].offset, w / 2);
        }
        for win in &windows {
            prop_assert_eq!(win.provenance.diff_lag, p);
            prop_assert_eq!(win.provenance.window, w);
        }
    }

    #[test]
    fn difference_is_linear(
        x in matrix(30, 3, -5.0, 5.0),
        y in matrix(30, 3, -5.0, 5.0),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        p in 1usize..29,
    ) {
        let combo = tensor(vec![30, 3], x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect());
        let lhs = preprocess::temporal_difference(&combo, p).unwrap();
        let dx = preprocess::temporal_difference(&x, p).unwrap();
        let dy = preprocess::temporal_difference(&y, p).unwrap();
        for ((l, u), v) in lhs.data().iter().zip(dx.data()).zip(dy.data()) {
            prop_assert!((l - (a * u + b * v)).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_preserves_structure(x in matrix(40, 3, -10.0, 10.0)) {
        let cfg = PreprocessConfig::new(0, 10);
        let windows = preprocess::slice_windows(&x, &cfg, &label(), "s");
        let stats = preprocess::fit_standardizer(&windows, "train").unwrap();
        let z = preprocess::standardize(&windows, &stats).unwrap();
        prop_assert_eq!(z.len(), windows.len());
        for (a, b) in z.iter().zip(&windows) {
            prop_assert_eq!(a.values.shape(), b.values.shape());
            prop_assert_eq!(&a.label, &b.label);
            prop_assert_eq!(a.provenance.stats_id.as_deref(), Some(stats.id.as_str()));
        }
        let back = preprocess::destandardize(&z, &stats).unwrap();
        for (a, b) in back.iter().zip(&windows) {
            prop_assert!(a.values.max_abs_diff(&b.values) < 1e-12 * 10.0);
        }
    }

    #[test]
    fn binned_max_is_one(peaks in prop::collection::vec((40.0f64..499.99, 0.01f64..1e4), 1..30)) {
        let v = gcms::bin_spectrum(&EiSpectrum::new("c", peaks).unwrap(), &BinConfig::default()).unwrap();
        prop_assert_eq!(v.len(), 460);
        prop_assert_eq!(v.iter().copied().fold(f64::MIN, f64::max), 1.0);
        prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn spec_embedding_is_order_free_and_bounded(
        groups in prop::collection::vec(
            prop::collection::vec(prop::collection::vec((40.0f64..499.0, 0.1f64..100.0), 1..6), 1..4),
            1..4,
        )
    ) {
        let cfg = BinConfig::default();
        let compounds: Vec<Vec<EiSpectrum>> = groups
            .iter()
            .map(|g| g.iter().map(|p| EiSpectrum::new("c", p.clone()).unwrap()).collect())
            .collect();
        let e = gcms::ingredient_spec_embedding(&compounds, &cfg).unwrap();
        prop_assert!(e.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        let mut flipped: Vec<Vec<EiSpectrum>> = compounds.iter().rev().cloned().collect();
        flipped.iter_mut().for_each(|c| c.reverse());
        let f = gcms::ingredient_spec_embedding(&flipped, &cfg).unwrap();
        for (a, b) in e.iter().zip(&f) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_is_monotone(peaks in prop::collection::vec((40.0f64..499.0, 0.1f64..100.0), 1..20), a in 40.0f64..500.0, b in 40.0f64..500.0) {
        let cdf = gcms::mz_coverage_cdf(&[EiSpectrum::new("c", peaks).unwrap()], gcms::MZ_LO).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cdf.eval(lo) <= cdf.eval(hi));
        prop_assert_eq!(cdf.eval(cdf.max_mz()), 1.0);
        prop_assert_eq!(cdf.eval(gcms::MZ_HI), 1.0);
    }

    #[test]
    fn acc1_never_exceeds_acc5(scores in matrix(12, 8, -1.0, 1.0), labels in prop::collection::vec(0usize..8, 12)) {
        let a1 = metrics::topk_accuracy(&scores, &labels, 1).unwrap();
        let a5 = metrics::topk_accuracy(&scores, &labels, 5).unwrap();
        prop_assert!(a1 <= a5);
        prop_assert_eq!(metrics::topk_accuracy(&scores, &labels, 8).unwrap(), 1.0);
    }

    #[test]
    fn dynamic_topk_equals_top1_on_single_labels(scores in matrix(15, 12, 0.0, 1.0), labels in prop::collection::vec(0usize..12, 15)) {
        let mut t = vec![0.0; 15 * 12];
        for (i, &y) in labels.iter().enumerate() {
            t[i * 12 + y] = 1.0;
        }
        let target = tensor(vec![15, 12], t);
        prop_assert_eq!(
            metrics::dynamic_topk(&scores, &target).unwrap(),
            metrics::topk_accuracy(&scores, &labels, 1).unwrap()
        );
    }

    #[test]
    fn metrics_ignore_example_order(pred in simplex_rows(10, 5), target in simplex_rows(10, 5), shift in 1usize..10) {
        let rotate = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..10).map(|i| t.row((i + shift) % 10).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (rp, rt) = (rotate(&pred), rotate(&target));
        let a = metrics::mixture_report(&pred, &target).unwrap();
        let b = metrics::mixture_report(&rp, &rt).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-12);
        prop_assert_eq!(a.top1_at_01, b.top1_at_01);
        prop_assert_eq!(a.dyn_topk, b.dyn_topk);
        prop_assert!((a.kl_target_pred - b.kl_target_pred).abs() < 1e-12);
        prop_assert!((a.cosine - b.cosine).abs() < 1e-12);
        let labels: Vec<usize> = (0..10).map(|i| metrics::argmax(target.row(i))).collect();
        let rl: Vec<usize> = (0..10).map(|i| labels[(i + shift) % 10]).collect();
        prop_assert_eq!(
            metrics::topk_accuracy(&pred, &labels, 2).unwrap(),
            metrics::topk_accuracy(&rp, &rl, 2).unwrap()
        );
    }

    #[test]
    fn threshold_accuracy_is_monotone(pred in simplex_rows(8, 6), target in simplex_rows(8, 6), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(
            metrics::top1_at_threshold(&pred, &target, lo).unwrap()
                <= metrics::top1_at_threshold(&pred, &target, hi).unwrap()
        );
    }

    #[test]
    fn self_similarity(p in simplex_rows(6, 12)) {
        prop_assert!(metrics::mixture_kl(&p, &p).unwrap().abs() < 1e-12);
        prop_assert!((metrics::mean_cosine(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_is_orthonormal_and_reconstructs(x in matrix(30, 4, -5.0, 5.0)) {
        let r = analysis::pca(&x, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = r.components[i].iter().zip(&r.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-9);
            }
        }
        for w in r.explained_variance_ratio.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(r.explained_variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
        let cov = analysis::covariance(&x);
        let trace: f64 = (0..4).map(|i| cov[i][i]).sum();
        for (l, ratio) in r.eigenvalues.iter().zip(&r.explained_variance_ratio) {
            prop_assert!((l / trace - ratio).abs() < 1e-12);
        }
        for n in 0..30 {
            for j in 0..4 {
                let back: f64 = (0..4).map(|k| r.projected.row(n)[k] * r.components[k][j]).sum();
                prop_assert!((back - (x.row(n)[j] - r.mean[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contrastive_is_scale_invariant(zs in matrix(5, 4, -2.0, 2.0), zg in matrix(5, 4, -2.0, 2.0), c in 0.1f64..10.0) {
        let loss = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
            let l = objectives::symmetric_contrastive(&mut g, va, vb, 0.07).unwrap();
            g.value(l).item()
        };
        let scaled = zs.map(|v| v * c);
        prop_assert!((loss(&zs, &zg) - loss(&scaled, &zg)).abs() < 1e-9);
    }
}
