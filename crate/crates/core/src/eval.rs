//! Desk-scale evaluation: sliced Wasserstein-2 fidelity against the known
//! target, multi-seed diversity, and blow-up rate across guidance scales.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::conditions::{Condition, ConditionEmbedder, ConditionPair, ConditionalGmm};
use crate::denoiser::{predict_eps, Denoiser};
use crate::guidance::GuidanceConfig;
use crate::linalg::{distance, dot, normalize};
use crate::rng;
use crate::sampler::{sample_batch, SamplerOptions, Trajectory};
use crate::schedule::DiffusionSchedule;
use crate::{Error, Result, Scalar};

const STREAM_PROJECTIONS: u64 = 5 << 32;
const STREAM_PROBES: u64 = 6 << 32;

/// Random-projection settings for the sliced distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicedConfig {
    pub projections: usize,
    pub seed: u64,
}

impl Default for SlicedConfig {
    fn default() -> Self {
        Self {
            projections: 128,
            seed: 0,
        }
    }
}

/// Exact W2 between two 1-D empirical measures with uniform weights,
/// integrating the squared difference of their quantile functions.
pub fn wasserstein2_1d<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain(
            "wasserstein distance needs nonempty sample sets",
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    if a.len() == b.len() {
        let n = T::of_usize(a.len());
        let sq: T = a.iter().zip(&b).map(|(&x, &y)| (x - y) * (x - y)).sum();
        return Ok((sq / n).sqrt());
    }
    let (n, m) = (a.len(), b.len());
    // walk the merged quantile breakpoints i/n and j/m in integer units of 1/(n*m)
    let (mut i, mut j) = (0usize, 0usize);
    let (mut level, mut total) = (0usize, T::zero());
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total = total + T::of_usize(next - level) * diff * diff;
        level = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok((total / T::of_usize(n * m)).sqrt())
}

/// Wasserstein-2 between sample sets: exact in one dimension, sliced over
/// seeded random directions otherwise (root of the mean squared 1-D distance).
pub fn wasserstein2<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], cfg: &SlicedConfig) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain(
            "wasserstein distance needs nonempty sample sets",
        ));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::domain(
            "all samples must share one nonzero dimension",
        ));
    }
    if dim == 1 {
        let fa: Vec<T> = a.iter().map(|x| x[0]).collect();
        let fb: Vec<T> = b.iter().map(|x| x[0]).collect();
        return wasserstein2_1d(&fa, &fb);
    }
    if cfg.projections == 0 {
        return Err(Error::config("projections", "must be at least 1"));
    }
    let mut r = rng::derived(cfg.seed, STREAM_PROJECTIONS);
    let mut total = T::zero();
    for _ in 0..cfg.projections {
        let mut dir: Vec<T> = (0..dim).map(|_| T::standard_normal(&mut r)).collect();
        normalize(&mut dir);
        let pa: Vec<T> = a.iter().map(|x| dot(x, &dir)).collect();
        let pb: Vec<T> = b.iter().map(|x| dot(x, &dir)).collect();
        total = total + wasserstein2_1d(&pa, &pb)?.powi(2);
    }
    Ok((total / T::of_usize(cfg.projections)).sqrt())
}

/// Mean pairwise Euclidean distance.
pub fn diversity<T: Scalar>(samples: &[Vec<T>]) -> Result<T> {
    if samples.len() < 2 {
        return Err(Error::domain("diversity needs at least two samples"));
    }
    let n = samples.len();
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            total = total + distance(&samples[i], &samples[j]);
        }
    }
    Ok(total / T::of_usize(n * (n - 1) / 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub strategy: String,
    pub gs: T,
    pub fidelity_w2: T,
    pub diversity: T,
    pub blowup_rate: T,
    pub n_samples: usize,
}

impl<T: Scalar> MetricReport<T> {
    pub const CSV_HEADER: &'static str = "strategy,gs,fidelity_w2,diversity,blowup_rate,n_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.strategy,
            self.gs,
            self.fidelity_w2,
            self.diversity,
            self.blowup_rate,
            self.n_samples
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sliced: SlicedConfig,
    /// Fresh target samples drawn per condition.
    pub target_samples: usize,
    pub target_seed: u64,
    /// State-norm bound for the blow-up rate; defaults to
    /// `10 * max ||mu_k|| + 5 * max sigma_k` of the target.
    pub blowup_bound: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sliced: SlicedConfig::default(),
            target_samples: 512,
            target_seed: 1,
            blowup_bound: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sliced.projections == 0 {
            return Err(Error::config("projections", "must be at least 1"));
        }
        if self.target_samples == 0 {
            return Err(Error::config("target_samples", "must be at least 1"));
        }
        if let Some(b) = self.blowup_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config("blowup_bound", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn resolve_bound<T: Scalar>(&self, target: &ConditionalGmm<T>) -> T {
        match self.blowup_bound {
            Some(b) => T::of(b),
            None => {
                let (mu, sigma) = target.extent();
                T::of(10.0) * mu + T::of(5.0) * sigma
            }
        }
    }
}

/// Target samples for `cond`, keyed by its slice so every run sees the same set.
pub fn target_samples<T: Scalar>(
    target: &ConditionalGmm<T>,
    cond: &ConditionPair<T>,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<T>>> {
    let (c, s) = match (cond.content_id, cond.style_id) {
        (Some(c), Some(s)) => (c, s),
        _ => {
            return Err(Error::domain(
                "evaluation conditions need content and style ids",
            ))
        }
    };
    let stream = (c * target.style_vocab() + s) as u64;
    target.sample(
        c,
        s,
        cfg.target_samples,
        &mut rng::derived(cfg.target_seed, stream),
    )
}

/// Metrics for trajectories grouped by condition (`groups[i]` belongs to `conds[i]`).
pub fn summarize<T: Scalar>(
    label: &str,
    gs: T,
    conds: &[ConditionPair<T>],
    groups: &[Vec<Trajectory<T>>],
    target: &ConditionalGmm<T>,
    cfg: &EvalConfig,
) -> Result<MetricReport<T>> {
    cfg.validate()?;
    if conds.is_empty() || conds.len() != groups.len() {
        return Err(Error::config(
            "conditions",
            "need one trajectory group per condition",
        ));
    }
    let bound = cfg.resolve_bound(target);
    let mut fidelity = T::zero();
    let mut spread = T::zero();
    let mut blown = 0usize;
    let mut total = 0usize;
    for (cond, group) in conds.iter().zip(groups) {
        let finals: Vec<Vec<T>> = group.iter().map(|tr| tr.final_sample.clone()).collect();
        let reference = target_samples(target, cond, cfg)?;
        fidelity = fidelity + wasserstein2(&finals, &reference, &cfg.sliced)?;
        spread = spread + diversity(&finals)?;
        blown += group.iter().filter(|tr| !(tr.max_norm <= bound)).count();
        total += group.len();
    }
    let k = T::of_usize(conds.len());
    Ok(MetricReport {
        strategy: label.to_string(),
        gs,
        fidelity_w2: fidelity / k,
        diversity: spread / k,
        blowup_rate: T::of_usize(blown) / T::of_usize(total),
        n_samples: total,
    })
}

/// Samples every condition under every seed with `gcfg` and summarizes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar, D: Denoiser<T> + ?Sized>(
    label: &str,
    model: &D,
    conds: &[ConditionPair<T>],
    gcfg: &GuidanceConfig<T>,
    schedule: &DiffusionSchedule<T>,
    seeds: &[u64],
    target: &ConditionalGmm<T>,
    cfg: &EvalConfig,
    opts: &SamplerOptions,
) -> Result<MetricReport<T>> {
    if seeds.len() < 2 {
        return Err(Error::config(
            "seeds",
            "need at least two seeds per condition",
        ));
    }
    let groups = conds
        .iter()
        .map(|cond| {
            let batch = vec![cond.clone(); seeds.len()];
            sample_batch(model, &batch, gcfg, schedule, seeds, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(label, gcfg.gs(), conds, &groups, target, cfg)
}

/// Mean squared per-coordinate disagreement between two ε predictions over
/// `probes` forward-noised target points with uniformly drawn slices and
/// timesteps.
pub fn eps_disagreement<T: Scalar, A: Denoiser<T> + ?Sized, R: Denoiser<T> + ?Sized>(
    model: &A,
    reference: &R,
    target: &ConditionalGmm<T>,
    embedder: &ConditionEmbedder,
    schedule: &DiffusionSchedule<T>,
    probes: usize,
    seed: u64,
) -> Result<T> {
    if probes == 0 {
        return Err(Error::config("probes", "must be at least 1"));
    }
    let mut rng = rng::derived(seed, STREAM_PROBES);
    let mut diff = T::zero();
    for _ in 0..probes {
        let c = rng.random_range(0..target.content_vocab());
        let s = rng.random_range(0..target.style_vocab());
        let t = rng.random_range(1..=schedule.num_steps());
        let x0 = target.sample(c, s, 1, &mut rng)?.remove(0);
        let ab = schedule.alpha_bar(t)?;
        let x_t: Vec<T> = x0
            .iter()
            .map(|&v| ab.sqrt() * v + (T::one() - ab).sqrt() * T::standard_normal(&mut rng))
            .collect();
        let cond = Condition::Pair(embedder.embed(c, s)?);
        let a = predict_eps(model, &x_t, t, &cond)?;
        let r = predict_eps(reference, &x_t, t, &cond)?;
        let d = a.sub(&r);
        diff = diff + d.dot(&d);
    }
    Ok(diff / T::of_usize(probes * target.dim()))
}

/// One [`MetricReport`] per guidance scale, all other settings held fixed.
#[allow(clippy::too_many_arguments)]
pub fn stability_curve<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    conds: &[ConditionPair<T>],
    gcfg: &GuidanceConfig<T>,
    gs_list: &[T],
    schedule: &DiffusionSchedule<T>,
    seeds: &[u64],
    target: &ConditionalGmm<T>,
    cfg: &EvalConfig,
    opts: &SamplerOptions,
) -> Result<Vec<MetricReport<T>>> {
    if gs_list.is_empty() {
        return Err(Error::config("gs_list", "must not be empty"));
    }
    gs_list
        .iter()
        .map(|&gs| {
            let at = gcfg.clone().with_gs(gs)?;
            evaluate(
                gcfg.strategy.label(),
                model,
                conds,
                &at,
                schedule,
                seeds,
                target,
                cfg,
                opts,
            )
        })
        .collect()
}
