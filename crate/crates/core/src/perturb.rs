//! Negative prompt construction: Bernoulli-masked, scaled Gaussian replacements
//! of the content and/or style representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditions::{Condition, ConditionPair};
use crate::rng::{self, SeededRng, STREAM_NEGATIVE};
use crate::{Error, Result, Scalar};

/// Which half of the positive pair is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    Style,
    Content,
    Both,
    /// The negative branch is the model's unconditional prediction.
    Unconditional,
}

impl PerturbTarget {
    pub const ALL: [PerturbTarget; 4] = [
        PerturbTarget::Style,
        PerturbTarget::Content,
        PerturbTarget::Both,
        PerturbTarget::Unconditional,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PerturbTarget::Style => "style",
            PerturbTarget::Content => "content",
            PerturbTarget::Both => "both",
            PerturbTarget::Unconditional => "unconditional",
        }
    }
}

/// When negative prompts are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Drawn once at the start of a trajectory and reused for every step.
    PerTrajectory,
    /// Fresh draw at every step.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig<T> {
    pub lambda_style: T,
    pub lambda_content: T,
    /// Bernoulli keep-probability of the dropout mask.
    pub keep_prob: T,
    pub target: PerturbTarget,
    pub resample: ResampleMode,
    /// Adds the masked noise to the original vector instead of replacing it.
    #[serde(default)]
    pub additive: bool,
}

impl<T: Scalar> Default for PerturbConfig<T> {
    fn default() -> Self {
        Self {
            lambda_style: T::of(1000.0),
            lambda_content: T::of(1000.0),
            keep_prob: T::of(0.75),
            target: PerturbTarget::Style,
            resample: ResampleMode::PerTrajectory,
            additive: false,
        }
    }
}

impl<T: Scalar> PerturbConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > T::zero() && self.keep_prob <= T::one()) {
            return Err(Error::config("keep_prob", "must lie in (0, 1]"));
        }
        if !(self.lambda_style >= T::zero()) || !self.lambda_style.is_finite() {
            return Err(Error::config(
                "lambda_style",
                "must be finite and nonnegative",
            ));
        }
        if !(self.lambda_content >= T::zero()) || !self.lambda_content.is_finite() {
            return Err(Error::config(
                "lambda_content",
                "must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: T) -> Self {
        Self {
            lambda_style: lambda,
            lambda_content: lambda,
            ..self
        }
    }
}

/// `lambda * mask * z` element-wise, optionally added onto `original`.
fn masked_noise<T: Scalar, R: Rng + ?Sized>(
    original: &[T],
    lambda: T,
    keep_prob: T,
    additive: bool,
    rng: &mut R,
) -> Vec<T> {
    original
        .iter()
        .map(|&r| {
            let keep = T::unit_uniform(rng) < keep_prob;
            let z = T::standard_normal(rng);
            let noise = if keep { lambda * z } else { T::zero() };
            if additive {
                r + noise
            } else {
                noise
            }
        })
        .collect()
}

/// Builds the negative condition for `pos`. Untargeted halves are copied verbatim.
pub fn make_negative<T: Scalar, R: Rng + ?Sized>(
    pos: &ConditionPair<T>,
    cfg: &PerturbConfig<T>,
    rng: &mut R,
) -> Result<Condition<T>> {
    if pos.content.is_empty() || pos.style.is_empty() {
        return Err(Error::domain("positive condition vectors must be nonempty"));
    }
    let (perturb_content, perturb_style) = match cfg.target {
        PerturbTarget::Unconditional => return Ok(Condition::Null),
        PerturbTarget::Style => (false, true),
        PerturbTarget::Content => (true, false),
        PerturbTarget::Both => (true, true),
    };
    let content = if perturb_content {
        masked_noise(
            &pos.content,
            cfg.lambda_content,
            cfg.keep_prob,
            cfg.additive,
            rng,
        )
    } else {
        pos.content.clone()
    };
    let style = if perturb_style {
        masked_noise(
            &pos.style,
            cfg.lambda_style,
            cfg.keep_prob,
            cfg.additive,
            rng,
        )
    } else {
        pos.style.clone()
    };
    Ok(Condition::Pair(ConditionPair {
        content,
        style,
        content_id: if perturb_content {
            None
        } else {
            pos.content_id
        },
        style_id: if perturb_style { None } else { pos.style_id },
    }))
}

/// Per-trajectory negative prompt state.
#[derive(Debug, Clone)]
pub struct NegativeSampler<T> {
    cfg: PerturbConfig<T>,
    rng: SeededRng,
    cached: Option<Condition<T>>,
}

impl<T: Scalar> NegativeSampler<T> {
    /// The generator is derived from the trajectory seed on a stream of its own.
    pub fn new(cfg: PerturbConfig<T>, trajectory_seed: u64) -> Self {
        Self {
            cfg,
            rng: rng::derived(trajectory_seed, STREAM_NEGATIVE),
            cached: None,
        }
    }

    pub fn config(&self) -> &PerturbConfig<T> {
        &self.cfg
    }

    /// Negative condition to use at timestep `t`.
    pub fn negative_for_step(&mut self, pos: &ConditionPair<T>, _t: usize) -> Result<Condition<T>> {
        match self.cfg.resample {
            ResampleMode::PerStep => make_negative(pos, &self.cfg, &mut self.rng),
            ResampleMode::PerTrajectory => {
                if self.cached.is_none() {
                    self.cached = Some(make_negative(pos, &self.cfg, &mut self.rng)?);
                }
                Ok(self.cached.clone().expect("cached above"))
            }
        }
    }
}
