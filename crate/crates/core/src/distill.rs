//! PGD feature distillation: construct an input near `x_s` whose layer-l
//! features under a given path mimic an unrelated target input `x_t`. The
//! resulting inputs expose the path's non-robust features and are what other
//! paths cross-train on.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::graph::BackwardOpts;
use crate::nn::{Feature, Scalar};
use crate::rgn::{Path, RgnModel};
use crate::rng::Stream;

#[derive(Clone, Debug)]
pub struct DistillConfig<F> {
    /// L-infinity radius of the perturbation around `x_s`, in input units.
    pub eps: F,
    /// PGD iterations.
    pub steps: usize,
    /// Per-step magnitude of the signed gradient step.
    pub step_size: F,
    /// Start from a uniform point inside the ball instead of `x_s`.
    pub random_start: bool,
}

impl<F: Scalar> Default for DistillConfig<F> {
    fn default() -> Self {
        Self {
            eps: F::cast(0.07),
            steps: 10,
            step_size: F::cast(0.007),
            random_start: false,
        }
    }
}

impl<F: Scalar> DistillConfig<F> {
    pub fn with_eps(eps: f64, steps: usize) -> Self {
        Self {
            eps: F::cast(eps),
            steps,
            step_size: F::cast(eps / steps.max(1) as f64),
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < F::zero() {
            return Err(Error::Config("distillation eps must be >= 0".into()));
        }
        if self.steps > 0 && self.step_size <= F::zero() {
            return Err(Error::Config("step size must be > 0 when steps > 0".into()));
        }
        Ok(())
    }
}

/// A distilled batch plus its provenance.
#[derive(Clone, Debug)]
pub struct DistilledBatch<F> {
    pub x_prime: Array4<F>,
    pub source_labels: Vec<usize>,
    /// Path whose features were distilled.
    pub path: Path,
    /// Gated-block index (1-based) the features were tapped at.
    pub layer: usize,
}

/// Objective trajectory of one distillation run.
#[derive(Clone, Debug)]
pub struct DistillStats<F> {
    pub initial_objective: F,
    pub final_objective: F,
    pub per_step: Vec<F>,
}

/// Squared Euclidean distance between the layer-l features of `z` and `x_t`
/// under `path` (the target features are constants).
pub fn distill_objective<F: Scalar>(
    rgn: &RgnModel<F>,
    path: &Path,
    l: usize,
    z: &Array4<F>,
    x_t: &Array4<F>,
) -> Result<F> {
    if z.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "z shape {:?} vs x_t shape {:?}",
            z.shape(),
            x_t.shape()
        )));
    }
    let (target, _) = rgn.forward_to_tap(path, x_t, l)?;
    let (f, _) = rgn.forward_to_tap(path, z, l)?;
    f.sq_distance(&target)
}

/// Objective value and its gradient with respect to `z`, for a fixed target
/// feature map.
pub fn objective_and_grad<F: Scalar>(
    rgn: &RgnModel<F>,
    path: &Path,
    l: usize,
    z: &Array4<F>,
    target: &Feature<F>,
) -> Result<(F, Array4<F>)> {
    let (f, trace) = rgn.forward_to_tap(path, z, l)?;
    let diff = f.sub(target)?;
    let obj = {
        let mut acc = F::zero();
        match &diff {
            Feature::Map(a) => {
                for v in a.iter() {
                    acc = acc + *v * *v;
                }
            }
            Feature::Flat(a) => {
                for v in a.iter() {
                    acc = acc + *v * *v;
                }
            }
        }
        acc
    };
    let seed = diff.scale(F::cast(2.0));
    let tap = rgn.tap_node(l)?;
    let bw = rgn.backward_from(
        path,
        &trace,
        tap,
        seed,
        &BackwardOpts { param_grads: false, input_grad: true, sgm_gamma: None },
    )?;
    let grad = bw
        .input_grad
        .ok_or_else(|| Error::Invalid("distillation input gradient missing".into()))?;
    Ok((obj, grad))
}

fn sign<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Run the PGD scheme of the feature-distillation objective: starting from
/// `x_s`, descend the signed gradient of ||f_l(z) - f_l(x_t)||^2 while
/// staying inside the eps ball and the valid input range.
pub fn distill_features<F: Scalar>(
    rgn: &RgnModel<F>,
    path: &Path,
    l: usize,
    x_t: &Array4<F>,
    x_s: &Array4<F>,
    y_s: &[usize],
    cfg: &DistillConfig<F>,
    rng: &mut Stream,
) -> Result<(DistilledBatch<F>, DistillStats<F>)> {
    cfg.validate()?;
    if x_t.shape() != x_s.shape() {
        return Err(Error::Shape(format!(
            "x_t shape {:?} vs x_s shape {:?}",
            x_t.shape(),
            x_s.shape()
        )));
    }
    if x_s.shape()[0] != y_s.len() {
        return Err(Error::Shape(format!(
            "{} source labels for batch of {}",
            y_s.len(),
            x_s.shape()[0]
        )));
    }

    let (target, _) = rgn.forward_to_tap(path, x_t, l)?;

    let mut z = x_s.clone();
    if cfg.random_start && cfg.eps > F::zero() {
        let eps = cfg.eps;
        z.mapv_inplace(|v| {
            let u = F::sample_unit(rng);
            v + (u + u - F::one()) * eps
        });
        crate::nn::ops::clamp_to_ball(&mut z, x_s, cfg.eps);
    }

    let mut per_step = Vec::with_capacity(cfg.steps);
    let (initial, mut grad) = objective_and_grad(rgn, path, l, &z, &target)?;
    let mut current = initial;
    for step in 0..cfg.steps {
        ndarray::Zip::from(&mut z).and(&grad).for_each(|zi, &gi| {
            *zi = *zi - cfg.step_size * sign(gi);
        });
        crate::nn::ops::clamp_to_ball(&mut z, x_s, cfg.eps);
        if step + 1 < cfg.steps {
            let (obj, g) = objective_and_grad(rgn, path, l, &z, &target)?;
            current = obj;
            grad = g;
        } else {
            current = {
                let (f, _) = rgn.forward_to_tap(path, &z, l)?;
                f.sq_distance(&target)?
            };
        }
        per_step.push(current);
    }

    Ok((
        DistilledBatch { x_prime: z, source_labels: y_s.to_vec(), path: path.clone(), layer: l },
        DistillStats { initial_objective: initial, final_objective: current, per_step },
    ))
}
