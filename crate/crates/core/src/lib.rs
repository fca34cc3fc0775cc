//! Guided diffusion sampling toolkit.
//!
//! Dual orthogonal guidance (DOG) builds a negative prompt by masked, scaled
//! noise on the content or style representation, clips the norm of its noise
//! prediction, removes the component along the positive prediction, and
//! pushes away from the remaining orthogonal direction with a triangular
//! time schedule. CFG and APG are provided as baselines. An exact analytic
//! denoiser for Gaussian-mixture targets and a small trainable MLP sit behind
//! the same [`Denoiser`] interface.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditions;
pub mod denoiser;
mod error;
pub mod eval;
pub mod guidance;
pub mod linalg;
pub mod perturb;
pub mod rng;
pub mod sampler;
mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use conditions::{ConditionEmbedder, ToyGmmSpec};
pub use denoiser::{predict_eps, Denoiser};
pub use eval::EvalConfig;
pub use guidance::Strategy;
pub use perturb::{PerturbTarget, ResampleMode};
pub use sampler::{Recording, SamplerOptions};

pub type DiffusionSchedule = schedule::DiffusionSchedule<f64>;
pub type TriangularSchedule = schedule::TriangularSchedule<f64>;
pub type Condition = conditions::Condition<f64>;
pub type ConditionPair = conditions::ConditionPair<f64>;
pub type ConditionalGmm = conditions::ConditionalGmm<f64>;
pub type GmmComponent = conditions::GmmComponent<f64>;
pub type NoisePrediction = denoiser::NoisePrediction<f64>;
pub type AnalyticDenoiser = denoiser::AnalyticDenoiser<f64>;
pub type TrainedDenoiser = denoiser::TrainedDenoiser<f64>;
pub type GuidanceConfig = guidance::GuidanceConfig<f64>;
pub type Tau = guidance::Tau<f64>;
pub type PerturbConfig = perturb::PerturbConfig<f64>;
pub type Trajectory = sampler::Trajectory<f64>;
pub type MetricReport = eval::MetricReport<f64>;
