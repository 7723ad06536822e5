//! Finite-difference gradient cases, one function per layer or objective.
//! Each returns the worst relative error for a given seed.

use super::{check_leaves, check_model, check_store, projection, random_tensor, rng};
use olfact_core::autodiff::ParamStore;
use olfact_core::nn::layers::{BatchNorm, Conv1d, LayerNorm, Linear, LstmCell, MultiHeadAttention};
use olfact_core::nn::{BatchMask, Family, Model, ModelConfig, Pooling};
use olfact_core::objectives::{self, MixtureLossConfig};
use olfact_core::Tensor;

pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

pub type Case = (&'static str, fn(u64) -> f64);

pub const CASES: [Case; 13] = [
    ("ops", elementwise_and_layout_ops),
    ("bmm", batched_matmul_with_transposes),
    ("activations", gelu_softmax_and_log_softmax),
    ("norms", normalizations_and_pooling),
    ("linear+layernorm", linear_layer_norm_and_stem),
    ("conv1d", conv1d_layer),
    ("batchnorm", batch_norm_training_mode),
    ("lstm", lstm_cell_over_variable_lengths),
    ("attention", attention_with_padding),
    ("model families", every_model_family),
    ("contrastive", gcms_encoder_with_contrastive_loss),
    ("objectives", objectives_against_their_inputs),
    ("mixture heads", mixture_heads_end_to_end),
];

pub fn elementwise_and_layout_ops(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&mut r, &[2, 3, 4], 1.0);
    let b = random_tensor(&mut r, &[2, 3, 4], 1.0);
    check_leaves(&[a, b], |g, v| {
        let s = g.sub(v[0], v[1]);
        let m = g.mul(s, v[0]);
        let t = g.tanh(m);
        let e = g.sigmoid(v[1]);
        let c = g.concat(&[t, e], 1);
        let p = g.permute(c, &[2, 0, 1]);
        let n = g.narrow(p, 2, 1, 4);
        let sa = g.sum_axis(n, 1);
        projection(g, sa, seed)
    })}

pub fn batched_matmul_with_transposes(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = random_tensor(&mut r, &sa, 1.0);
        let b = random_tensor(&mut r, &sb, 1.0);
        worst = worst.max(check_leaves(&[a, b], |g, v| {
            let c = g.bmm(v[0], v[1], ta, tb);
            projection(g, c, seed)
        }));
    }
    worst}

pub fn gelu_softmax_and_log_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[3, 6], 2.0);
    let mask: Vec<bool> = (0..18).map(|i| i % 6 == 5 || i == 7).collect();
    check_leaves(&[x], |g, v| {
        let a = g.gelu(v[0]);
        let s = g.softmax(a, Some(&mask));
        let l = g.log_softmax(v[0]);
        let sum = g.add(s, l);
        projection(g, sum, seed)
    })}

pub fn normalizations_and_pooling(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[2, 5, 3], 1.0);
    check_leaves(&[x], |g, v| {
        let a = g.norm_rows(v[0], 1e-5);
        let flat = g.reshape(v[0], &[10, 3]);
        let (b, _, _) = g.norm_cols(flat, 1e-5);
        let c = g.l2_normalize_rows(flat).unwrap();
        let mean = g.masked_mean_time(a, &[5, 2]);
        let max = g.masked_max_time(v[0], &[3, 5]);
        let p1 = projection(g, mean, seed);
        let p2 = projection(g, max, seed + 1);
        let p3 = projection(g, b, seed + 2);
        let p4 = projection(g, c, seed + 3);
        let s = g.add(p1, p2);
        let s = g.add(s, p3);
        g.add(s, p4)
    })}

pub fn linear_layer_norm_and_stem(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut r, "stem", 4, 6);
    let ln = LayerNorm::new(&mut store, "ln", 6);
    // Non-trivial affine parameters.
    for id in store.ids().collect::<Vec<_>>() {
        let t = random_tensor(&mut r, store.value(id).shape(), 1.0);
        *store.value_mut(id) = t;
    }
    let x = random_tensor(&mut r, &[2, 3, 4], 1.0);
    check_store(&mut store, |g, s| {
        let xi = g.input(x.clone());
        let h = lin.forward(g, s, xi);
        let h = ln.forward(g, s, h);
        projection(g, h, seed)
    })}

pub fn conv1d_layer(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let conv = Conv1d::new(&mut store, &mut r, "conv", 3, 4, 5);
    let x = random_tensor(&mut r, &[2, 3, 7], 1.0);
    let w = check_store(&mut store, |g, s| {
        let xi = g.input(x.clone());
        let y = conv.forward(g, s, xi);
        projection(g, y, seed)
    });
    let wt = store.value(conv.weight).clone();
    let xin = check_leaves(&[x.clone(), wt], |g, v| {
        let y = g.conv1d(v[0], v[1], None, 2);
        projection(g, y, seed)
    });
    w.max(xin)}

pub fn batch_norm_training_mode(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    *store.value_mut(bn.gamma) = random_tensor(&mut r, &[3], 1.0);
    *store.value_mut(bn.beta) = random_tensor(&mut r, &[3], 1.0);
    let x = random_tensor(&mut r, &[6, 3], 1.0);
    check_store(&mut store, |g, s| {
        let xi = g.input(x.clone());
        let y = bn.forward(g, s, xi);
        let y = g.tanh(y);
        projection(g, y, seed)
    })}

pub fn lstm_cell_over_variable_lengths(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, &mut r, "lstm", 3, 4);
    let x = random_tensor(&mut r, &[2, 5, 3], 1.0);
    check_store(&mut store, |g, s| {
        let xi = g.input(x.clone());
        let (seq, last) = cell.run(g, s, xi, &[5, 3], seed.is_multiple_of(2));
        let a = projection(g, seq, seed);
        let b = projection(g, last, seed + 1);
        g.add(a, b)
    })}

pub fn attention_with_padding(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, &mut r, "attn", 8, 2);
    let x = random_tensor(&mut r, &[2, 4, 8], 1.0);
    check_store(&mut store, |g, s| {
        let xi = g.input(x.clone());
        let y = mha.forward(g, s, xi, &[4, 2]);
        let y = g.masked_mean_time(y, &[4, 2]);
        projection(g, y, seed)
    })}

pub fn small_config(family: Family) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        latent_dim: 8,
        layers: 1,
        heads: 2,
        num_classes: 4,
        cnn_channels: vec![4, 6],
        cnn_kernel: 3,
        mlp_hidden: vec![6, 5],
        lstm_hidden: 4,
        mixture_outputs: 3,
        // Dropout masks are fixed per graph seed, so they can stay on.
        dropout: Some(0.1),
        ..ModelConfig::for_family(family)
    }
}

pub const MODEL_VARIANTS: [(Family, Pooling, bool); 6] = [
    (Family::Transformer, Pooling::Mean, false),
    (Family::Transformer, Pooling::Cls, true),
    (Family::Lstm, Pooling::Last, false),
    (Family::Lstm, Pooling::Max, false),
    (Family::Cnn, Pooling::Mean, false),
    (Family::Mlp, Pooling::Mean, false),
];

pub fn model_variant(seed: u64, (family, pooling, cls): (Family, Pooling, bool)) -> f64 {
    let cfg = ModelConfig {
        pooling: Some(pooling),
        use_cls: cls,
        ..small_config(family)
    };
    let mut model = Model::new(&cfg, seed).unwrap();
    let x = random_tensor(&mut rng(seed + 100), &[3, 5, 3], 1.0);
    let mask = BatchMask::new(vec![5, 4, 2], 5).unwrap();
    check_model(&mut model, |g, m| {
        let logits = m.classify(g, &x, &mask).unwrap();
        objectives::cross_entropy(g, logits, &[0, 3, 1]).unwrap()
    })
}

pub fn every_model_family(seed: u64) -> f64 {
    MODEL_VARIANTS.iter().map(|&v| model_variant(seed, v)).fold(0.0, f64::max)
}

pub fn gcms_encoder_with_contrastive_loss(seed: u64) -> f64 {
    let cfg = small_config(Family::Transformer);
    let mut model = Model::new(&cfg, seed).unwrap();
    let enc = olfact_core::nn::GcmsEncoderConfig {
        hidden: vec![7, 6],
        ..Default::default()
    };
    model.attach_gcms_encoder(5, &enc, seed);
    let x = random_tensor(&mut rng(seed + 1), &[3, 4, 3], 1.0);
    let gx = random_tensor(&mut rng(seed + 2), &[3, 5], 1.0);
    let mask = BatchMask::full(3, 4);
    check_model(&mut model, |g, m| {
        let h = m.forward_embed(g, &x, &mask).unwrap();
        let gi = g.input(gx.clone());
        let zg = m.encode_gcms(g, gi).unwrap();
        objectives::symmetric_contrastive(g, h, zg, 0.5).unwrap()
    })}

pub fn objectives_against_their_inputs(seed: u64) -> f64 {
    let mut r = rng(seed);
    let z = random_tensor(&mut r, &[4, 6], 2.0);
    let s = random_tensor(&mut r, &[4, 6], 2.0);
    let a = random_tensor(&mut r, &[4, 5], 1.0);
    let b = random_tensor(&mut r, &[4, 5], 1.0);
    let mut t = vec![0.0; 24];
    for i in 0..4 {
        t[i * 6 + i] = 0.3;
        t[i * 6 + (i + 2) % 6] = 0.7;
    }
    let targets = Tensor::new(vec![4, 6], t).unwrap();
    let r01 = targets.map(|p| if p > 0.0 { 1.0 } else { 0.0 });
    let cfg = MixtureLossConfig {
        epsilon: 0.0,
        ..Default::default()
    };
    let ce = check_leaves(std::slice::from_ref(&z), |g, v| {
        objectives::cross_entropy(g, v[0], &[0, 5, 2, 2]).unwrap()
    });
    let con = check_leaves(&[a, b], |g, v| {
        objectives::symmetric_contrastive(g, v[0], v[1], 0.3).unwrap()
    });
    let mix = check_leaves(&[z, s.clone()], |g, v| {
        objectives::mixture_loss(g, v[0], v[1], &targets, &cfg)
            .unwrap()
            .total
    });
    let focal = check_leaves(&[s], |g, v| {
        objectives::focal_bce(g, v[0], &r01, 0.75, 2.0).unwrap()
    });
    ce.max(con).max(mix).max(focal)}

pub fn mixture_heads_end_to_end(seed: u64) -> f64 {
    let mut model = Model::new(&small_config(Family::Transformer), seed).unwrap();
    let x = random_tensor(&mut rng(seed + 9), &[2, 4, 3], 1.0);
    let mask = BatchMask::full(2, 4);
    let targets = Tensor::new(vec![2, 3], vec![0.5, 0.5, 0.0, 0.0, 0.1, 0.9]).unwrap();
    check_model(&mut model, |g, m| {
        let h = m.forward_embed(g, &x, &mask).unwrap();
        let (u, z) = m.mixture_logits(g, h).unwrap();
        objectives::mixture_loss(g, z, u, &targets, &MixtureLossConfig::default())
            .unwrap()
            .total
    })}

