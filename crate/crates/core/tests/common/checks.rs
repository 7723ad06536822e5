//! Reference checks shared by the oracle suites and the acceptance runner.

use super::grad_suite::{small_config, MODEL_VARIANTS};
use super::random_tensor;
use olfact_core::autodiff::Graph;
use olfact_core::metrics;
use olfact_core::nn::{BatchMask, Model, ModelConfig};
use olfact_core::preprocess;
use olfact_core::Tensor;
use rand::Rng;

pub fn brute_topk(scores: &[f64], y: usize, k: usize) -> bool {
    let ahead = (0..scores.len())
        .filter(|&j| scores[j] > scores[y] || (scores[j] == scores[y] && j < y))
        .count();
    ahead < k
}

pub fn brute_macro_f1(pred: &[usize], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for class in 0..c {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &y) in pred.iter().zip(labels) {
            match (p == class, y == class) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    total / c as f64
}

/// Panics on the first disagreement with the brute-force reference.
pub fn classification_metrics(seed: u64, batches: usize) {
    let mut rng = super::rng(seed);
    for _ in 0..batches {
        let n = rng.random_range(1..20);
        let c = rng.random_range(2..9);
        // Coarse scores so ties are common.
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(0..4) as f64).collect();
        let scores = Tensor::new(vec![n, c], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        for k in [1, 2, 5].into_iter().filter(|&k| k <= c) {
            let want = (0..n)
                .filter(|&i| brute_topk(scores.row(i), labels[i], k))
                .count() as f64
                / n as f64;
            let got = metrics::topk_accuracy(&scores, &labels, k).unwrap();
            assert!((got - want).abs() < 1e-12, "k={k}: {got} vs {want}");
        }
        let pred: Vec<usize> = (0..n).map(|i| metrics::argmax(scores.row(i))).collect();
        for (i, &p) in pred.iter().enumerate() {
            assert!(brute_topk(scores.row(i), p, 1));
        }
        let conf = metrics::confusion_matrix(&pred, &labels, c).unwrap();
        let got = metrics::macro_f1(&conf).unwrap();
        assert!((got - brute_macro_f1(&pred, &labels, c)).abs() < 1e-12);
    }
}

pub fn mixture_metrics(seed: u64, batches: usize) {
    let mut rng = super::rng(seed);
    for _ in 0..batches {
        let n = rng.random_range(1..10);
        let k = 12;
        let simplex = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut v: Vec<f64> = (0..k)
                .map(|_| if rng.random_bool(0.4) { rng.random_range(0.01..1.0) } else { 0.0 })
                .collect();
            v[rng.random_range(0..k)] += 0.5;
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng)).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng)).collect();
        let pt = Tensor::from_rows(&p).unwrap();
        let tt = Tensor::from_rows(&t).unwrap();

        let mae: f64 =
            p.iter().flatten().zip(t.iter().flatten()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / (n * k) as f64;
        assert!((metrics::mixture_mae(&pt, &tt).unwrap() - mae).abs() < 1e-12);

        let thr_hits = (0..n)
            .filter(|&i| (0..k).all(|j| t[i][j] == 0.0 || (p[i][j] - t[i][j]).abs() <= 0.1))
            .count() as f64
            / n as f64;
        assert!((metrics::top1_at_threshold(&pt, &tt, 0.1).unwrap() - thr_hits).abs() < 1e-12);

        let (mut hit, mut total) = (0usize, 0usize);
        for i in 0..n {
            let truth: Vec<usize> = (0..k).filter(|&j| t[i][j] > 0.0).collect();
            let order = metrics::rank_desc(&p[i]);
            let top = &order[..truth.len()];
            hit += truth.iter().filter(|j| top.contains(j)).count();
            total += truth.len();
        }
        let dyn_want = hit as f64 / total as f64;
        assert!((metrics::dynamic_topk(&pt, &tt).unwrap() - dyn_want).abs() < 1e-12);

        let cos: f64 = (0..n)
            .map(|i| {
                let dot: f64 = p[i].iter().zip(&t[i]).map(|(a, b)| a * b).sum();
                let na: f64 = p[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = t[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (na * nb)
            })
            .sum::<f64>()
            / n as f64;
        assert!((metrics::mean_cosine(&pt, &tt).unwrap() - cos).abs() < 1e-12);
    }
}

pub fn window_enumeration(seed: u64, triples: usize) {
    let mut rng = super::rng(seed);
    for _ in 0..triples {
        let t = rng.random_range(0..300);
        let w = rng.random_range(1..60);
        let s = rng.random_range(1..=w);
        for pad in [false, true] {
            let mut offsets = Vec::new();
            let mut o = 0;
            while o + w <= t {
                offsets.push(o);
                o += s;
            }
            // A trailing partial window is added only when the full ones stop short of the end.
            if pad && !offsets.is_empty() && offsets[offsets.len() - 1] + w < t {
                offsets.push(o);
            }
            assert_eq!(preprocess::window_offsets(t, w, s, pad), offsets, "t={t} w={w} s={s} pad={pad}");
            assert_eq!(preprocess::count_windows(t, w, s, pad), offsets.len());
        }
    }
}

fn embed(model: &Model, x: &Tensor, mask: &BatchMask) -> Tensor {
    let mut g = Graph::new();
    let h = model.forward_embed(&mut g, x, mask).unwrap();
    g.value(h).clone()
}

/// Largest embedding change caused by rewriting padded steps, over every family.
pub fn padding_leak() -> f64 {
    let mut worst = 0.0f64;
    let (b, t, d) = (3, 6, 3);
    let lengths = vec![6, 4, 1];
    for variant in MODEL_VARIANTS {
        for seed in 0..5 {
            let cfg = ModelConfig {
                pooling: Some(variant.1),
                use_cls: variant.2,
                ..small_config(variant.0)
            };
            let model = Model::new(&cfg, seed).unwrap();
            let mut r = super::rng(seed + 40);
            let x = random_tensor(&mut r, &[b, t, d], 1.0);
            let mask = BatchMask::new(lengths.clone(), t).unwrap();
            let base = embed(&model, &x, &mask);

            let mut noisy = x.clone();
            for (bi, &len) in lengths.iter().enumerate() {
                for step in len..t {
                    for c in 0..d {
                        noisy.data_mut()[(bi * t + step) * d + c] = r.random_range(-1e3..1e3);
                    }
                }
            }
            let moved = embed(&model, &noisy, &mask);
            worst = worst.max(base.max_abs_diff(&moved));
        }
    }
    worst
}

