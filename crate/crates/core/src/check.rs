//! Numerical verification helpers: central finite differences and error
//! metrics. Used by the test suites to check analytic gradients; kept
//! independent of the backward implementations.

use crate::graph::{GradMap, Params};
use crate::nn::Scalar;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn numerical_grad<F: Scalar>(mut f: impl FnMut(&[F]) -> F, x: &[F], h: F) -> Vec<F> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (h + h));
    }
    grad
}

/// Max relative error between two gradients, with an absolute floor so that
/// near-zero entries compare absolutely.
pub fn max_rel_err<F: Scalar>(analytic: &[F], numeric: &[F], floor: F) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = ((*a - *n).abs() / denom).to_f64();
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Max absolute elementwise difference.
pub fn max_abs_diff<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64())
        .fold(0.0, f64::max)
}

/// Concatenate all trainable parameters into one flat vector (stable order).
pub fn flatten_trainable<F: Scalar>(params: &Params<F>) -> Vec<F> {
    let mut out = Vec::new();
    params.visit_trainable(|_, view| out.extend(view.iter().cloned()));
    out
}

/// Write a flat vector produced by [`flatten_trainable`] back into the
/// parameters.
pub fn set_trainable<F: Scalar>(params: &mut Params<F>, flat: &[F]) {
    let mut off = 0usize;
    params.visit_trainable_mut(|_, mut view| {
        for v in view.iter_mut() {
            *v = flat[off];
            off += 1;
        }
    });
    assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
}

/// Flatten a gradient map into the same order as [`flatten_trainable`];
/// parameters without gradients contribute zeros.
pub fn flatten_grads<F: Scalar>(params: &Params<F>, grads: &GradMap<F>) -> Vec<F> {
    let mut out = Vec::new();
    params.visit_trainable(|name, view| match grads.get(name) {
        Some(g) => {
            assert_eq!(g.len(), view.len(), "gradient shape mismatch for {name}");
            out.extend(g.iter().cloned());
        }
        None => out.extend(std::iter::repeat_n(F::zero(), view.len())),
    });
    out
}
