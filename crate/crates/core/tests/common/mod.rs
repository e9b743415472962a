#![allow(dead_code)]

use nimbus_core::nn::ParamStore;
use nimbus_core::tensor::Fill;
use nimbus_core::Tensor;

pub const EPS: f64 = 1e-6;

/// Relative error; pairs below 1e-4 in magnitude are compared against 1e-4
/// so structurally zero gradients are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn randn(dims: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::new(dims, Fill::Normal(1.0), seed).unwrap()
}

/// `Σ w ⊙ y`: a scalar probe whose output gradient is `w`.
pub fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    assert_eq!(y.dims(), w.dims());
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `f` with respect to the listed input elements;
/// returns the worst relative error against `analytic`.
pub fn check_input(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    picks: &[usize],
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let mut worst = 0f64;
    let mut xp = x.clone();
    for &i in picks {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + EPS;
        let lp = f(&xp);
        xp.data_mut()[i] = orig - EPS;
        let lm = f(&xp);
        xp.data_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Same as [`check_input`] for parameter elements `(block, index)`.
pub fn check_params(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    picks: &[(usize, usize)],
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let mut worst = 0f64;
    for &(b, i) in picks {
        let orig = store.values()[b].data()[i];
        store.values_mut()[b].data_mut()[i] = orig + EPS;
        let lp = f(store);
        store.values_mut()[b].data_mut()[i] = orig - EPS;
        let lm = f(store);
        store.values_mut()[b].data_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * EPS);
        worst = worst.max(rel_err(analytic[b].data()[i], num));
    }
    worst
}

/// Every element of every block.
pub fn all_param_picks(store: &ParamStore<f64>) -> Vec<(usize, usize)> {
    store
        .values()
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.len()).map(move |i| (b, i)))
        .collect()
}

/// Deterministic spread of `k` indices over `0..len`.
pub fn spread(len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    (0..k).map(|i| i * len / k + (i * 7919) % (len / k).max(1)).collect()
}
