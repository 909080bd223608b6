//! Neural-network primitives: tensors, layers, losses.
//!
//! Everything is generic over [`Scalar`] so that training runs in `f32` while
//! gradient-check tests instantiate the same code paths in `f64`.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::distr::uniform::SampleUniform;
use rand::Rng;

use crate::error::{Error, Result};

pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod ops;

pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use linear::Linear;

/// Floating-point element type for all tensors.
pub trait Scalar: NdFloat + SampleUniform {
    fn cast(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Uniform draw in [0, 1).
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One representable value closer to `target` (identity when equal).
    fn next_toward(self, target: Self) -> Self;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
    fn next_toward(self, target: Self) -> Self {
        match self.partial_cmp(&target) {
            Some(std::cmp::Ordering::Less) => self.next_up(),
            Some(std::cmp::Ordering::Greater) => self.next_down(),
            _ => self,
        }
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
    fn next_toward(self, target: Self) -> Self {
        match self.partial_cmp(&target) {
            Some(std::cmp::Ordering::Less) => self.next_up(),
            Some(std::cmp::Ordering::Greater) => self.next_down(),
            _ => self,
        }
    }
}

/// Activation flowing through the graph: a feature map or a flat batch.
#[derive(Clone, Debug)]
pub enum Feature<F> {
    Map(Array4<F>),
    Flat(Array2<F>),
}

impl<F: Scalar> Feature<F> {
    pub fn batch_len(&self) -> usize {
        match self {
            Feature::Map(a) => a.shape()[0],
            Feature::Flat(a) => a.shape()[0],
        }
    }

    pub fn as_map(&self) -> Result<&Array4<F>> {
        match self {
            Feature::Map(a) => Ok(a),
            Feature::Flat(_) => Err(Error::Shape("expected 4-d feature map".into())),
        }
    }

    pub fn as_flat(&self) -> Result<&Array2<F>> {
        match self {
            Feature::Flat(a) => Ok(a),
            Feature::Map(_) => Err(Error::Shape("expected 2-d feature".into())),
        }
    }

    /// Flatten to [batch, features], copying when the input is a map.
    pub fn to_flat(&self) -> Array2<F> {
        match self {
            Feature::Flat(a) => a.clone(),
            Feature::Map(a) => {
                let (b, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
                a.to_shape((b, c * h * w)).unwrap().to_owned()
            }
        }
    }

    /// Number of scalar elements per sample.
    pub fn feature_len(&self) -> usize {
        match self {
            Feature::Map(a) => a.len() / a.shape()[0].max(1),
            Feature::Flat(a) => a.shape()[1],
        }
    }

    /// Squared Euclidean distance to another feature of the same shape,
    /// summed over the whole batch.
    pub fn sq_distance(&self, other: &Feature<F>) -> Result<F> {
        let a = self.to_flat();
        let b = other.to_flat();
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "feature shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut acc = F::zero();
        for (x, y) in a.iter().zip(b.iter()) {
            let d = *x - *y;
            acc = acc + d * d;
        }
        Ok(acc)
    }

    /// Elementwise difference `self - other`, same variant required.
    pub fn sub(&self, other: &Feature<F>) -> Result<Feature<F>> {
        match (self, other) {
            (Feature::Map(a), Feature::Map(b)) if a.shape() == b.shape() => {
                Ok(Feature::Map(a - b))
            }
            (Feature::Flat(a), Feature::Flat(b)) if a.shape() == b.shape() => {
                Ok(Feature::Flat(a - b))
            }
            _ => Err(Error::Shape("feature variants/shapes differ".into())),
        }
    }

    pub fn scale(&self, k: F) -> Feature<F> {
        match self {
            Feature::Map(a) => Feature::Map(a.mapv(|v| v * k)),
            Feature::Flat(a) => Feature::Flat(a.mapv(|v| v * k)),
        }
    }
}

/// He fan-in normal initialization for conv weights.
pub fn he_normal_conv<F: Scalar, R: Rng>(
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut R,
) -> Array4<F> {
    let fan_in = (in_c * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    Array4::from_shape_simple_fn((out_c, in_c, k, k), || {
        F::sample_standard_normal(rng) * F::cast(std)
    })
}

/// Torch-style uniform initialization for linear layers.
pub fn uniform_linear<F: Scalar, R: Rng>(
    out_d: usize,
    in_d: usize,
    rng: &mut R,
) -> (Array2<F>, Array1<F>) {
    let bound = F::cast(1.0 / (in_d as f64).sqrt());
    let w = Array2::from_shape_simple_fn((out_d, in_d), || {
        let u = F::sample_unit(rng);
        (u + u - F::one()) * bound
    });
    let b = Array1::from_shape_simple_fn(out_d, || {
        let u = F::sample_unit(rng);
        (u + u - F::one()) * bound
    });
    (w, b)
}
