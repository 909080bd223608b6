//! Stateless operations and losses.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{Feature, Scalar};
use crate::error::{Error, Result};

pub fn relu<F: Scalar>(x: &Feature<F>) -> Feature<F> {
    match x {
        Feature::Map(a) => Feature::Map(a.mapv(|v| if v > F::zero() { v } else { F::zero() })),
        Feature::Flat(a) => Feature::Flat(a.mapv(|v| if v > F::zero() { v } else { F::zero() })),
    }
}

/// dx = dy where the forward input was positive, else 0.
pub fn relu_backward<F: Scalar>(x: &Feature<F>, dy: &Feature<F>) -> Result<Feature<F>> {
    match (x, dy) {
        (Feature::Map(x), Feature::Map(dy)) => {
            let mut dx = dy.clone();
            dx.zip_mut_with(x, |d, &xi| {
                if xi <= F::zero() {
                    *d = F::zero();
                }
            });
            Ok(Feature::Map(dx))
        }
        (Feature::Flat(x), Feature::Flat(dy)) => {
            let mut dx = dy.clone();
            dx.zip_mut_with(x, |d, &xi| {
                if xi <= F::zero() {
                    *d = F::zero();
                }
            });
            Ok(Feature::Flat(dx))
        }
        _ => Err(Error::Shape("relu backward variant mismatch".into())),
    }
}

/// [B,C,H,W] -> [B,C] spatial mean.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let scale = F::one() / F::cast((h * w) as f64);
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = F::zero();
            for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                s = s + *v;
            }
            y[[bi, ci]] = s * scale;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(
    dy: &Array2<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (b, c) = (dy.shape()[0], dy.shape()[1]);
    let scale = F::one() / F::cast((h * w) as f64);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] * scale;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Row-wise softmax of logits.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            denom = denom + *v;
        }
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    out
}

/// Mean cross-entropy over the batch; also returns d(loss)/d(logits).
pub fn cross_entropy_with_grad<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>)> {
    check_labels(logits, labels)?;
    let b = logits.shape()[0];
    let inv_b = F::one() / F::cast(b as f64);
    let mut grad = softmax(logits);
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let p = grad[[i, y]].max(F::cast(1e-30));
        loss = loss - p.ln();
        grad[[i, y]] = grad[[i, y]] - F::one();
    }
    grad.mapv_inplace(|v| v * inv_b);
    Ok((loss * inv_b, grad))
}

/// Mean cross-entropy without gradients.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<F> {
    check_labels(logits, labels)?;
    let b = logits.shape()[0];
    let probs = softmax(logits);
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss = loss - probs[[i, y]].max(F::cast(1e-30)).ln();
    }
    Ok(loss / F::cast(b as f64))
}

/// Per-sample margin max(z_y - max_{c != y} z_c, -kappa), averaged over the
/// batch. Driving this down is the attack objective under the C&W loss.
pub fn cw_margin_with_grad<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    kappa: F,
) -> Result<(F, Array2<F>)> {
    check_labels(logits, labels)?;
    let b = logits.shape()[0];
    let inv_b = F::one() / F::cast(b as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.index_axis(Axis(0), i);
        let mut best = F::neg_infinity();
        let mut best_c = 0usize;
        for (c, v) in row.iter().enumerate() {
            if c != y && *v > best {
                best = *v;
                best_c = c;
            }
        }
        let margin = row[y] - best;
        if margin > -kappa {
            loss = loss + margin;
            grad[[i, y]] = inv_b;
            grad[[i, best_c]] = -inv_b;
        } else {
            loss = loss - kappa;
        }
    }
    Ok((loss * inv_b, grad))
}

pub fn cw_margin_loss<F: Scalar>(logits: &Array2<F>, labels: &[usize], kappa: F) -> Result<F> {
    cw_margin_with_grad(logits, labels, kappa).map(|(l, _)| l)
}

pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = F::neg_infinity();
            let mut idx = 0usize;
            for (c, v) in row.iter().enumerate() {
                if *v > best {
                    best = *v;
                    idx = c;
                }
            }
            idx
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Mean of per-class probability vectors; used for ensemble aggregation.
pub fn mean_rows<F: Scalar>(parts: &[Array2<F>]) -> Array2<F> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc += p;
    }
    acc.mapv_inplace(|v| v / F::cast(parts.len() as f64));
    acc
}

fn check_labels<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<()> {
    if logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.shape()[0],
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if classes < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Sum of an arbitrary dimension gradient expressed on [B,C] features.
pub fn bias_like<F: Scalar>(dy: &Array2<F>) -> Array1<F> {
    dy.sum_axis(Axis(0))
}

/// Clamp `z` into B_inf(x, eps) intersected with [0, 1]. The ball constraint
/// is enforced in the working precision: after the interval clamp, entries
/// whose measured distance still exceeds eps (from rounding of x +- eps) are
/// nudged one ulp at a time toward x.
pub fn clamp_to_ball<F: Scalar>(z: &mut Array4<F>, x: &Array4<F>, eps: F) {
    let zero = F::zero();
    let one = F::one();
    ndarray::Zip::from(z).and(x).for_each(|zi, &xi| {
        let lo = (xi - eps).max(zero);
        let hi = (xi + eps).min(one);
        let mut v = if *zi < lo {
            lo
        } else if *zi > hi {
            hi
        } else {
            *zi
        };
        while (v - xi).abs() > eps {
            v = v.next_toward(xi);
        }
        *zi = v.min(one).max(zero);
    });
}
