//! Fully-connected layer.

use ndarray::{Array1, Array2, Axis};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear<F> {
    /// [out_features, in_features]
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.shape()[1] != self.in_features() {
            return Err(Error::Shape(format!(
                "linear expects {} inputs, got {}",
                self.in_features(),
                x.shape()[1]
            )));
        }
        let mut y = x.dot(&self.weight.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        Ok(y)
    }

    /// Returns (dx?, dw, db).
    pub fn backward(
        &self,
        x: &Array2<F>,
        dy: &Array2<F>,
        want_dx: bool,
    ) -> (Option<Array2<F>>, Array2<F>, Array1<F>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = want_dx.then(|| dy.dot(&self.weight));
        (dx, dw, db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{max_rel_err, numerical_grad};
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Array2::from_shape_simple_fn((3, 5), || rng.random::<f64>() - 0.5);
        let b = Array1::from_shape_simple_fn(3, || rng.random::<f64>() - 0.5);
        let lin = Linear { weight: w.clone(), bias: b.clone() };
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random::<f64>() - 0.5);
        let coef = Array2::from_shape_simple_fn((4, 3), || rng.random::<f64>() - 0.5);

        let (dx, dw, db) = lin.backward(&x, &coef, true);

        let f = |xs: &[f64]| {
            let xa = Array2::from_shape_vec(x.raw_dim(), xs.to_vec()).unwrap();
            (lin.forward(&xa).unwrap() * &coef).sum()
        };
        let num_dx = numerical_grad(f, x.as_slice().unwrap(), 1e-6);
        assert!(max_rel_err(dx.unwrap().as_slice().unwrap(), &num_dx, 1e-6) < 1e-6);

        let fw = |ws: &[f64]| {
            let l2 = Linear {
                weight: Array2::from_shape_vec(w.raw_dim(), ws.to_vec()).unwrap(),
                bias: b.clone(),
            };
            (l2.forward(&x).unwrap() * &coef).sum()
        };
        let num_dw = numerical_grad(fw, w.as_slice().unwrap(), 1e-6);
        assert!(max_rel_err(dw.as_slice().unwrap(), &num_dw, 1e-6) < 1e-6);

        let fb = |bs: &[f64]| {
            let l2 = Linear { weight: w.clone(), bias: Array1::from_vec(bs.to_vec()) };
            (l2.forward(&x).unwrap() * &coef).sum()
        };
        let num_db = numerical_grad(fb, b.as_slice().unwrap(), 1e-6);
        assert!(max_rel_err(db.as_slice().unwrap(), &num_db, 1e-6) < 1e-6);
    }
}
