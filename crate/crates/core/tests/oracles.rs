//! Brute-force reference implementations checked against the library.

mod common;

use olfact_core::analysis;
use olfact_core::gcms::{self, BinConfig, EiSpectrum};
use olfact_core::preprocess;
use olfact_core::Tensor;
use rand::Rng;

#[test]
fn classification_metrics_match_brute_force() {
    common::checks::classification_metrics(1, 1000);
}

#[test]
fn mixture_metrics_match_brute_force() {
    common::checks::mixture_metrics(2, 1000);
}

#[test]
fn window_enumeration_matches_loop() {
    common::checks::window_enumeration(3, 1000);
}

#[test]
fn differencing_matches_loop() {
    let mut rng = common::rng(4);
    for _ in 0..200 {
        let t = rng.random_range(2..60);
        let d = rng.random_range(1..5);
        let p = rng.random_range(0..t);
        let x = common::random_tensor(&mut rng, &[t, d], 10.0);
        let dx = preprocess::temporal_difference(&x, p).unwrap();
        assert_eq!(dx.shape(), &[t - p, d]);
        for i in 0..t - p {
            for c in 0..d {
                let want = if p == 0 { x.row(i)[c] } else { x.row(i + p)[c] - x.row(i)[c] };
                assert_eq!(dx.row(i)[c], want);
            }
        }
    }
}

#[test]
fn power_iteration_agrees_with_jacobi() {
    let mut rng = common::rng(5);
    for _ in 0..20 {
        let d = 5;
        // Distinct spectrum so both methods converge to the same vectors.
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cov = analysis::covariance(&x);
        let (ej, vj) = analysis::symmetric_eigen(&cov);
        let (ep, vp) = analysis::power_iteration_eigen(&cov, 3);
        for i in 0..3 {
            assert!((ej[i] - ep[i]).abs() < 1e-6 * ej[0], "{} vs {}", ej[i], ep[i]);
            let dot: f64 = vj[i].iter().zip(&vp[i]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() > 1.0 - 1e-5);
        }
    }
}

#[test]
fn isotropic_data_spreads_variance_evenly() {
    let mut rng = common::rng(6);
    let d = 4;
    let rows: Vec<Vec<f64>> = (0..20000)
        .map(|_| (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect();
    let r = analysis::pca(&Tensor::from_rows(&rows).unwrap(), d).unwrap();
    for ratio in &r.explained_variance_ratio {
        assert!((ratio - 0.25).abs() < 0.02, "{ratio}");
    }
}

#[test]
fn pearson_matches_direct_formula() {
    let mut rng = common::rng(7);
    let x = common::random_tensor(&mut rng, &[300, 3], 1.0);
    // Make channel 2 correlated with channel 0.
    let mut data = x.data().to_vec();
    for i in 0..300 {
        data[i * 3 + 2] = 0.5 * data[i * 3] + 0.1 * data[i * 3 + 2];
    }
    let x = Tensor::new(vec![300, 3], data).unwrap();
    let r = analysis::pearson_correlation(&x).unwrap();
    let col = |j: usize| (0..300).map(|i| x.row(i)[j]).collect::<Vec<f64>>();
    for a in 0..3 {
        for b in 0..3 {
            let (u, v) = (col(a), col(b));
            let mu = u.iter().sum::<f64>() / 300.0;
            let mv = v.iter().sum::<f64>() / 300.0;
            let cov: f64 = u.iter().zip(&v).map(|(p, q)| (p - mu) * (q - mv)).sum();
            let su: f64 = u.iter().map(|p| (p - mu).powi(2)).sum::<f64>().sqrt();
            let sv: f64 = v.iter().map(|q| (q - mv).powi(2)).sum::<f64>().sqrt();
            assert!((r[a][b] - cov / (su * sv)).abs() < 1e-12);
        }
    }
    assert!(r[0][2] > 0.9);
}

#[test]
fn two_level_spectral_average() {
    let cfg = BinConfig::default();
    // Compound A has two replicate spectra, compound B one.
    let a1 = EiSpectrum::new("a", vec![(41.0, 100.0)]).unwrap();
    let a2 = EiSpectrum::new("a", vec![(41.0, 50.0), (43.2, 100.0)]).unwrap();
    let b1 = EiSpectrum::new("b", vec![(100.7, 10.0)]).unwrap();
    let e = gcms::ingredient_spec_embedding(&[vec![a1, a2], vec![b1]], &cfg).unwrap();
    // Compound A averages to {41: 0.75, 43: 0.5}; the ingredient halves that with B.
    assert!((e[1] - 0.375).abs() < 1e-12);
    assert!((e[3] - 0.25).abs() < 1e-12);
    assert!((e[60] - 0.5).abs() < 1e-12);
    assert_eq!(e.iter().filter(|v| **v != 0.0).count(), 3);
}
