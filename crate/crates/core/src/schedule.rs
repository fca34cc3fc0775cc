//! Forward-process noise schedule and the triangular guidance-scale schedule.
//!
//! Timesteps run from `t = T` (pure noise) down to `t = 0` (clean data).
//! Per-step tables are stored for `t = 1..=T`; `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// β, α and ᾱ tables over `T` diffusion steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> DiffusionSchedule<T> {
    /// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(num_steps: usize, beta_start: T, beta_end: T) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::config("num_steps", "must be at least 2"));
        }
        if !(beta_start > T::zero() && beta_start < T::one()) {
            return Err(Error::config("beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end < T::one()) {
            return Err(Error::config("beta_end", "must be below 1"));
        }
        if beta_start > beta_end {
            return Err(Error::config("beta_start", "must not exceed beta_end"));
        }
        let last = T::of_usize(num_steps - 1);
        let span = beta_end - beta_start;
        let betas = (0..num_steps)
            .map(|i| {
                if i == num_steps - 1 {
                    beta_end
                } else {
                    beta_start + span * T::of_usize(i) / last
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds the derived tables from explicit betas (index 0 is `t = 1`).
    pub fn from_betas(betas: Vec<T>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::config("num_steps", "must be at least 2"));
        }
        if let Some(i) = betas.iter().position(|&b| !(b > T::zero() && b < T::one())) {
            return Err(Error::config(
                "betas",
                format!("beta at t={} is outside (0, 1)", i + 1),
            ));
        }
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(T::one(), |acc, &a| {
                *acc = *acc * a;
                Some(*acc)
            })
            .collect::<Vec<_>>();
        if !(alpha_bars[alpha_bars.len() - 1] > T::zero()) {
            return Err(Error::config("betas", "alpha_bar underflows to zero"));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    /// ᾱ for `t = 1..=T`, in that order.
    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    /// ᾱ_t for `t ∈ [0, T]`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        match t {
            0 => Ok(T::one()),
            t if t <= self.num_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::domain(format!(
                "timestep {t} outside [0, {}]",
                self.num_steps()
            ))),
        }
    }
}

/// Triangular guidance weight γ(t) peaking at `peak`, scaled by `scale` (gs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularSchedule<T> {
    num_steps: usize,
    peak: usize,
    scale: T,
}

impl<T: Scalar> TriangularSchedule<T> {
    pub fn new(num_steps: usize, peak: usize, scale: T) -> Result<Self> {
        if peak == 0 || peak >= num_steps {
            return Err(Error::config(
                "peak",
                format!("must lie strictly inside (0, {num_steps}), got {peak}"),
            ));
        }
        if !(scale >= T::zero()) || !scale.is_finite() {
            return Err(Error::config("gs", "must be a finite nonnegative number"));
        }
        Ok(Self {
            num_steps,
            peak,
            scale,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    /// The base guidance factor gs.
    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn with_scale(self, scale: T) -> Result<Self> {
        Self::new(self.num_steps, self.peak, scale)
    }

    /// γ(t): `t / peak` on the rising leg, `1 - (t - peak) / (T - peak)` on the falling leg.
    pub fn gamma(&self, t: usize) -> Result<T> {
        if t > self.num_steps {
            return Err(Error::domain(format!(
                "timestep {t} outside [0, {}]",
                self.num_steps
            )));
        }
        let t_f = T::of_usize(t);
        let peak = T::of_usize(self.peak);
        if t <= self.peak {
            Ok(t_f / peak)
        } else {
            Ok(T::one() - (t_f - peak) / (T::of_usize(self.num_steps) - peak))
        }
    }

    /// g(t) = gs · γ(t).
    pub fn guidance_scale_at(&self, t: usize) -> Result<T> {
        Ok(self.scale * self.gamma(t)?)
    }
}
