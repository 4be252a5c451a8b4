//! Scalar abstraction so the numerical core works for both `f32` and `f64`.
//!
//! All model code is written against [`Scalar`]; concrete aliases for the
//! `f64` instantiation live at the crate root.

use nalgebra::RealField;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub trait Scalar: RealField + Copy {
    fn of_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One draw from U[0, 1).
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform_01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}
