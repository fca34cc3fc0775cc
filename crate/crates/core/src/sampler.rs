//! Deterministic DDIM reverse process with per-step guidance.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{Condition, ConditionPair};
use crate::denoiser::{predict_eps, Denoiser, NoisePrediction};
use crate::guidance::{apg_combine, cfg_combine, dog_combine, Flagged, GuidanceConfig, Strategy};
use crate::linalg::{all_finite, norm};
use crate::perturb::{NegativeSampler, PerturbTarget};
use crate::rng::{self, STREAM_INITIAL_NOISE};
use crate::schedule::DiffusionSchedule;
use crate::{Error, Result, Scalar};

/// Which visited states are kept in [`Trajectory::steps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recording {
    Every,
    EveryNth(usize),
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Timestep stride; 1 visits every step from T down to 0.
    pub stride: usize,
    pub recording: Recording,
    /// Digest of the run configuration, stamped on the trajectory.
    pub config_digest: String,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            recording: Recording::Every,
            config_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep<T> {
    pub t: usize,
    pub x: Vec<T>,
    /// Combined prediction used to leave this state; absent at `t = 0`.
    pub eps_hat: Option<NoisePrediction<T>>,
    pub g: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    /// Recorded states in strictly decreasing `t`.
    pub steps: Vec<TrajectoryStep<T>>,
    pub seed: u64,
    pub strategy: Strategy,
    pub config_digest: String,
    pub degenerate_step_count: usize,
    pub final_sample: Vec<T>,
    /// Largest state norm over every visited state, recorded or not.
    pub max_norm: T,
}

impl<T: Scalar> Trajectory<T> {
    /// Line-delimited records: a `#` header with seed and digest, a column
    /// line, then one `t,x_1..x_d,g` line per recorded step.
    pub fn write_records<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "# seed={} config_digest={} strategy={} degenerate_steps={}",
            self.seed, self.config_digest, self.strategy, self.degenerate_step_count
        )?;
        let dim = self.final_sample.len();
        let cols: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "t,{},g", cols.join(","))?;
        for step in &self.steps {
            let xs: Vec<String> = step.x.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", step.t, xs.join(","), step.g)?;
        }
        Ok(())
    }
}

/// Timesteps visited by a strided chain: `T, T - k, ..., 0`.
pub fn timesteps(num_steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out = Vec::with_capacity(num_steps / stride + 2);
    let mut t = num_steps;
    loop {
        out.push(t);
        if t == 0 {
            break;
        }
        t = t.saturating_sub(stride);
    }
    out
}

/// One deterministic DDIM update from `t` to `t - 1`.
pub fn ddim_step<T: Scalar>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    schedule: &DiffusionSchedule<T>,
) -> Result<Vec<T>> {
    if t == 0 {
        return Err(Error::domain("ddim step requires t >= 1"));
    }
    ddim_step_to(x_t, eps_hat, t, t - 1, schedule)
}

/// DDIM update from `t` to any earlier `t_prev`: predict `x_0`, then re-noise
/// to `t_prev` along `eps_hat`. Landing on `t_prev = 0` returns the `x_0` estimate.
pub fn ddim_step_to<T: Scalar>(
    x_t: &[T],
    eps_hat: &[T],
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule<T>,
) -> Result<Vec<T>> {
    if t == 0 || t > schedule.num_steps() {
        return Err(Error::domain(format!(
            "timestep {t} outside [1, {}]",
            schedule.num_steps()
        )));
    }
    if t_prev >= t {
        return Err(Error::domain(format!(
            "target timestep {t_prev} is not before {t}"
        )));
    }
    crate::linalg::check_same_len(x_t, eps_hat)?;
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa, so) = (ab.sqrt(), (T::one() - ab).sqrt());
    let x0 = x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - so * e) / sa);
    if t_prev == 0 {
        return Ok(x0.collect());
    }
    let (sa_prev, so_prev) = (ab_prev.sqrt(), (T::one() - ab_prev).sqrt());
    Ok(x0
        .zip(eps_hat)
        .map(|(x0, &e)| sa_prev * x0 + so_prev * e)
        .collect())
}

fn check_compatible<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    gcfg: &GuidanceConfig<T>,
    schedule: &DiffusionSchedule<T>,
) -> Result<()> {
    gcfg.validate()?;
    if model.num_steps() != schedule.num_steps() {
        return Err(Error::config(
            "num_steps",
            format!(
                "model built for {} steps, schedule has {}",
                model.num_steps(),
                schedule.num_steps()
            ),
        ));
    }
    if gcfg.triangular.num_steps() != schedule.num_steps() {
        return Err(Error::config(
            "peak",
            "guidance schedule length differs from the diffusion schedule",
        ));
    }
    let needs_null = gcfg.strategy.needs_null_branch()
        || (gcfg.strategy == Strategy::Dog && gcfg.perturb.target == PerturbTarget::Unconditional);
    if needs_null && !model.has_null_branch() {
        return Err(Error::config(
            "strategy",
            format!(
                "{} needs an unconditional branch, which the model lacks",
                gcfg.strategy
            ),
        ));
    }
    Ok(())
}

/// Runs one guided DDIM chain from `x_T ~ N(0, I)` drawn from `seed`.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    cond: &ConditionPair<T>,
    gcfg: &GuidanceConfig<T>,
    schedule: &DiffusionSchedule<T>,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Trajectory<T>> {
    check_compatible(model, gcfg, schedule)?;
    let dim = model.sample_dim();
    let mut noise = rng::derived(seed, STREAM_INITIAL_NOISE);
    let mut x: Vec<T> = (0..dim).map(|_| T::standard_normal(&mut noise)).collect();
    let mut negatives = NegativeSampler::new(gcfg.perturb, seed);
    let positive = Condition::Pair(cond.clone());
    let visits = timesteps(schedule.num_steps(), opts.stride);

    let mut steps = Vec::new();
    let mut degenerate = 0usize;
    let mut max_norm = norm(&x);

    for (i, pair) in visits.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps_p = predict_eps(model, &x, t, &positive)?;
        let (combined, g) = match gcfg.strategy {
            Strategy::None => (
                Flagged {
                    value: eps_p,
                    degenerate: false,
                },
                T::zero(),
            ),
            Strategy::Cfg => {
                let eps_u = predict_eps(model, &x, t, &Condition::Null)?;
                let v = cfg_combine(&eps_p, &eps_u, gcfg.gs())?;
                (
                    Flagged {
                        value: v,
                        degenerate: false,
                    },
                    gcfg.gs(),
                )
            }
            Strategy::Apg => {
                let eps_u = predict_eps(model, &x, t, &Condition::Null)?;
                (
                    apg_combine(&eps_p, &eps_u, gcfg.gs(), gcfg.apg_parallel_weight)?,
                    gcfg.gs(),
                )
            }
            Strategy::Dog => {
                let negative = negatives.negative_for_step(cond, t)?;
                let eps_n = predict_eps(model, &x, t, &negative)?;
                (dog_combine(&eps_p, &eps_n, t, gcfg)?, gcfg.scale_at(t)?)
            }
        };
        if combined.degenerate {
            degenerate += 1;
        }
        let next = ddim_step_to(&x, &combined.value, t, t_prev, schedule)?;
        if !all_finite(&next) {
            return Err(Error::NonFinite {
                step: t,
                strategy: gcfg.strategy.to_string(),
            });
        }
        let keep = match opts.recording {
            Recording::Every => true,
            Recording::EveryNth(k) => i % k.max(1) == 0,
            Recording::FinalOnly => false,
        };
        if keep {
            steps.push(TrajectoryStep {
                t,
                x: std::mem::take(&mut x),
                eps_hat: Some(combined.value),
                g,
            });
        }
        x = next;
        max_norm = max_norm.max(norm(&x));
    }

    let final_g = match gcfg.strategy {
        Strategy::Dog => gcfg.scale_at(0)?,
        Strategy::None => T::zero(),
        _ => gcfg.gs(),
    };
    steps.push(TrajectoryStep {
        t: 0,
        x: x.clone(),
        eps_hat: None,
        g: final_g,
    });
    Ok(Trajectory {
        steps,
        seed,
        strategy: gcfg.strategy,
        config_digest: opts.config_digest.clone(),
        degenerate_step_count: degenerate,
        final_sample: x,
        max_norm,
    })
}

/// Runs independent chains in parallel; element `i` equals
/// `sample(model, &conds[i], .., seeds[i], ..)`.
pub fn sample_batch<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    conds: &[ConditionPair<T>],
    gcfg: &GuidanceConfig<T>,
    schedule: &DiffusionSchedule<T>,
    seeds: &[u64],
    opts: &SamplerOptions,
) -> Result<Vec<Trajectory<T>>> {
    if conds.len() != seeds.len() {
        return Err(Error::config(
            "seeds",
            format!("{} conditions but {} seeds", conds.len(), seeds.len()),
        ));
    }
    check_compatible(model, gcfg, schedule)?;
    conds
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(cond, &seed)| sample(model, cond, gcfg, schedule, seed, opts))
        .collect()
}
