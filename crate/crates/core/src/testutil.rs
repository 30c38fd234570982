//! Finite-difference helpers shared by the unit tests.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Initializer, ParamStore};
use crate::tensor::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Initializer::new(seed).normal(shape, 1.0)
}

pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Relative error with an absolute floor: differences below `1e-9` are
/// central-difference noise (structurally zero gradients land there).
fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between autodiff and central differences of
/// `Σ w ⊙ build(inputs)` with respect to every input, for fixed random
/// weights `w` (so no output element is trivially summed away).
pub fn fd_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let objective = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = build(g, vars).unwrap();
        let shape = g.shape(out).to_vec();
        let w = g.constant(randn(&shape, 991));
        let prod = g.mul(out, w).unwrap();
        g.sum_all(prod).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = objective(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[k]);
        let numeric = crate::gradcheck::numeric_gradient(x, 1e-5, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| g.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let l = objective(&mut g, &vars);
            g.value(l).item()
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let rel = rel_err(*a, *n);
            assert!(!rel.is_nan(), "NaN gradient for input {k}");
            worst = worst.max(rel);
        }
    }
    worst
}

/// Like [`fd_check`] but differentiates with respect to every parameter of
/// `store`, with `build` reading parameters through `g.param`.
pub fn fd_check_params(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> f64 {
    let objective = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Var {
        let out = build(g, p).unwrap();
        let shape = g.shape(out).to_vec();
        let w = g.constant(randn(&shape, 992));
        let prod = g.mul(out, w).unwrap();
        g.sum_all(prod).unwrap()
    };
    let mut g = Graph::new();
    let loss = objective(&mut g, store);
    let mut grads = store.zero_grads();
    g.backward_into(loss, &mut grads).unwrap();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let mut p = store.clone();
        for i in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[i];
            let mut eval = |x: f64| {
                p.get_mut(id).data_mut()[i] = x;
                let mut g = Graph::inference();
                let l = objective(&mut g, &p);
                g.value(l).item()
            };
            let n = (eval(x0 + 1e-5) - eval(x0 - 1e-5)) / 2e-5;
            eval(x0);
            let a = grads.get(id)[i];
            let rel = rel_err(a, n);
            assert!(!rel.is_nan(), "NaN gradient for {}", store.name(id));
            worst = worst.max(rel);
        }
    }
    worst
}
