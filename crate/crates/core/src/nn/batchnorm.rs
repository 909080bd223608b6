//! Batch normalization over [B,C,H,W] with per-channel statistics.

use ndarray::{Array1, Array4, Axis};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: F,
    /// Running-statistics update rate (torch convention: new = (1-m)*old + m*batch).
    pub momentum: F,
}

/// Batch statistics cached by a training-mode forward, used by the backward
/// pass and by deferred running-statistics updates.
#[derive(Clone, Debug)]
pub struct BnCache<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub inv_std: Array1<F>,
    /// Elements per channel in the batch that produced these statistics.
    pub count: usize,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: F::cast(1e-5),
            momentum: F::cast(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Array4<F>) -> Result<()> {
        if x.shape()[1] != self.channels() {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels(),
                x.shape()[1]
            )));
        }
        Ok(())
    }

    /// Training-mode forward: normalize by batch statistics. Running
    /// statistics are not touched here; apply the returned cache via
    /// [`BatchNorm::update_running`] after the step if the unit executed.
    pub fn forward_train(&self, x: &Array4<F>) -> Result<(Array4<F>, BnCache<F>)> {
        self.check(x)?;
        let c = self.channels();
        let count = x.len() / c;
        let n = F::cast(count as f64);
        let mut mean = Array1::zeros(c);
        let mut inv_std = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let view = x.index_axis(Axis(1), ci);
            let mut s = F::zero();
            for v in view.iter() {
                s = s + *v;
            }
            let m = s / n;
            let mut sq = F::zero();
            for v in view.iter() {
                let d = *v - m;
                sq = sq + d * d;
            }
            let v = sq / n;
            mean[ci] = m;
            var[ci] = v;
            inv_std[ci] = F::one() / (v + self.eps).sqrt();
        }
        let y = self.normalize(x, &mean, &inv_std);
        Ok((y, BnCache { mean, var, inv_std, count }))
    }

    /// Fold batch statistics into the running estimates (torch convention,
    /// unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache<F>) {
        let m = self.momentum;
        let one_m = F::one() - m;
        let n_f = cache.count as f64;
        let unbias = F::cast(n_f / (n_f - 1.0).max(1.0));
        for ci in 0..self.channels() {
            self.running_mean[ci] = one_m * self.running_mean[ci] + m * cache.mean[ci];
            self.running_var[ci] = one_m * self.running_var[ci] + m * cache.var[ci] * unbias;
        }
    }

    /// Eval-mode forward: normalize by running statistics.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check(x)?;
        let c = self.channels();
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            inv_std[ci] = F::one() / (self.running_var[ci] + self.eps).sqrt();
        }
        Ok(self.normalize(x, &self.running_mean, &inv_std))
    }

    fn normalize(&self, x: &Array4<F>, mean: &Array1<F>, inv_std: &Array1<F>) -> Array4<F> {
        let mut y = x.clone();
        let c = self.channels();
        for ci in 0..c {
            let g = self.gamma[ci] * inv_std[ci];
            let b = self.beta[ci] - mean[ci] * g;
            let mut view = y.index_axis_mut(Axis(1), ci);
            view.mapv_inplace(|v| v * g + b);
        }
        y
    }

    /// Backward through a training-mode forward (batch statistics).
    /// Returns (dx, dgamma, dbeta).
    pub fn backward_train(
        &self,
        x: &Array4<F>,
        dy: &Array4<F>,
        cache: &BnCache<F>,
    ) -> (Array4<F>, Array1<F>, Array1<F>) {
        let c = self.channels();
        let n = F::cast((x.len() / c) as f64);
        let mut dx = Array4::zeros(x.raw_dim());
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ci in 0..c {
            let xv = x.index_axis(Axis(1), ci);
            let dyv = dy.index_axis(Axis(1), ci);
            let m = cache.mean[ci];
            let istd = cache.inv_std[ci];
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for (xi, di) in xv.iter().zip(dyv.iter()) {
                let xhat = (*xi - m) * istd;
                sum_dy = sum_dy + *di;
                sum_dy_xhat = sum_dy_xhat + *di * xhat;
            }
            dbeta[ci] = sum_dy;
            dgamma[ci] = sum_dy_xhat;
            let g = self.gamma[ci];
            let mut dxv = dx.index_axis_mut(Axis(1), ci);
            for ((xi, di), o) in xv.iter().zip(dyv.iter()).zip(dxv.iter_mut()) {
                let xhat = (*xi - m) * istd;
                *o = g * istd / n * (n * *di - sum_dy - xhat * sum_dy_xhat);
            }
        }
        (dx, dgamma, dbeta)
    }

    /// Backward through an eval-mode forward (running statistics are
    /// constants). Returns (dx, dgamma, dbeta); parameter gradients are only
    /// computed when `want_params` is set, which requires the forward input.
    pub fn backward_eval(
        &self,
        x: Option<&Array4<F>>,
        dy: &Array4<F>,
        want_params: bool,
    ) -> (Array4<F>, Option<Array1<F>>, Option<Array1<F>>) {
        let c = self.channels();
        let mut dx = Array4::zeros(dy.raw_dim());
        let mut dgamma = want_params.then(|| Array1::zeros(c));
        let mut dbeta = want_params.then(|| Array1::zeros(c));
        for ci in 0..c {
            let istd = F::one() / (self.running_var[ci] + self.eps).sqrt();
            let g = self.gamma[ci] * istd;
            let dyv = dy.index_axis(Axis(1), ci);
            let mut dxv = dx.index_axis_mut(Axis(1), ci);
            for (di, o) in dyv.iter().zip(dxv.iter_mut()) {
                *o = *di * g;
            }
            if want_params {
                let x = x.expect("eval-mode parameter gradients need the forward input");
                let m = self.running_mean[ci];
                let xv = x.index_axis(Axis(1), ci);
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                for (xi, di) in xv.iter().zip(dyv.iter()) {
                    sum_dy = sum_dy + *di;
                    sum_dy_xhat = sum_dy_xhat + *di * (*xi - m) * istd;
                }
                dgamma.as_mut().unwrap()[ci] = sum_dy_xhat;
                dbeta.as_mut().unwrap()[ci] = sum_dy;
            }
        }
        (dx, dgamma, dbeta)
    }
}
