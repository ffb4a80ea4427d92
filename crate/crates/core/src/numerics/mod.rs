//! Deterministic model, loss, gradient and PRNG used by every executor.
//!
//! All arithmetic is `f64`. Batch reductions sum per-sample terms in batch
//! index order so that results do not depend on thread scheduling.

mod mlp;
mod rng;

use std::ops::{Deref, DerefMut};

pub use mlp::{finite_diff_gradient, gradient, loss, loss_and_gradient, Activation, MlpModel};
pub use mlp::{finite_diff_gradient_with, gradient_with, loss_with};
pub use rng::Rng;

/// Flat parameter (or gradient) vector; the unit of all collective communication.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &[f64]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().for_each(|v| *v *= c);
    }

    pub fn div_scalar(&mut self, d: f64) {
        self.0.iter_mut().for_each(|v| *v /= d);
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Max over coordinates of `|a - b| / max(|a|, 1e-8)`, with `a` the reference.
pub fn max_relative_deviation(reference: &[f64], other: &[f64]) -> f64 {
    reference
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}
