//! Noise-prediction models: the uniform `ε(x_t, t, r_t, r_s)` interface, an exact
//! analytic model for Gaussian-mixture targets, and a small trainable MLP.

mod analytic;
mod mlp;

pub use analytic::{analytic_posterior_mean, AnalyticDenoiser, Posterior};
pub use mlp::{
    toy_training_set, train_toy_denoiser, MlpArchitecture, TrainedDenoiser, TrainingConfig,
    TrainingExample, TrainingReport,
};

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::conditions::Condition;
use crate::linalg;
use crate::{Error, Result, Scalar};

/// A noise estimate with the sample's (flattened) shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoisePrediction<T>(Vec<T>);

impl<T: Scalar> NoisePrediction<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        linalg::norm(&self.0)
    }

    pub fn dot(&self, other: &Self) -> T {
        linalg::dot(&self.0, &other.0)
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.0)
    }

    pub fn scaled(&self, k: T) -> Self {
        Self(self.0.iter().map(|&v| v * k).collect())
    }

    /// `self + k * other`, entrywise.
    pub fn add_scaled(&self, k: T, other: &Self) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a + k * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect())
    }

    pub(crate) fn check_shape(&self, other: &Self) -> Result<()> {
        linalg::check_same_len(&self.0, &other.0)
    }
}

impl<T> Deref for NoisePrediction<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for NoisePrediction<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

/// A noise-prediction model. Implementations must be pure: identical arguments
/// give bit-identical outputs.
pub trait Denoiser<T: Scalar>: Send + Sync {
    /// Dimension of `x_t`.
    fn sample_dim(&self) -> usize;

    /// Number of diffusion steps the model was built for.
    fn num_steps(&self) -> usize;

    /// Whether the model has a meaningful unconditional branch.
    fn has_null_branch(&self) -> bool;

    /// Unchecked prediction; callers go through [`predict_eps`].
    fn raw_predict(&self, x_t: &[T], t: usize, cond: &Condition<T>) -> Result<Vec<T>>;
}

/// Validated noise prediction: checks `t`, the input dimension and finiteness of the output.
pub fn predict_eps<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    x_t: &[T],
    t: usize,
    cond: &Condition<T>,
) -> Result<NoisePrediction<T>> {
    if t == 0 || t > model.num_steps() {
        return Err(Error::domain(format!(
            "timestep {t} outside [1, {}]",
            model.num_steps()
        )));
    }
    if x_t.len() != model.sample_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.sample_dim(),
            actual: x_t.len(),
        });
    }
    let eps = NoisePrediction(model.raw_predict(x_t, t, cond)?);
    if !eps.is_finite() {
        return Err(Error::NonFinite {
            step: t,
            strategy: "denoiser".into(),
        });
    }
    Ok(eps)
}
