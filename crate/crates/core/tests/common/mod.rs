//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod checks;
pub mod grad_suite;

use olfact_core::autodiff::{Graph, ParamStore, Var};
use olfact_core::nn::Model;
use olfact_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Max relative error between backward gradients of every leaf input and
/// central differences of the scalar produced by `f`.
pub fn check_leaves(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::training(7);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::training(7);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Same check over every trainable parameter of a store.
pub fn check_store(store: &mut ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let eval = |s: &ParamStore| {
        let mut g = Graph::training(11);
        let out = f(&mut g, s);
        g.value(out).item()
    };
    let mut g = Graph::training(11);
    let out = f(&mut g, store);
    let grads = g.backward(out).unwrap();
    store.zero_grad();
    grads.accumulate_into(store);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let fp = eval(store);
            store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let fm = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Gradient check over all parameters of a model.
pub fn check_model(model: &mut Model, f: impl Fn(&mut Graph, &Model) -> Var) -> f64 {
    let mut store = std::mem::take(&mut model.store);
    let shell = model.clone();
    let worst = check_store(&mut store, |g, s| {
        let mut m = shell.clone();
        m.store = s.clone();
        f(g, &m)
    });
    model.store = store;
    worst
}

/// Random scalar projection `Σ w ⊙ x` used to reduce a tensor output to a loss.
pub fn projection(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = g.input(w);
    let p = g.mul(x, w);
    g.sum_all(p)
}
