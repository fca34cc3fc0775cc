//! Guidance combination rules: unguided, classifier-free (CFG), adaptive
//! projected (APG) and dual orthogonal guidance (DOG).
//!
//! All inner products are taken over the full flattened prediction.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::denoiser::NoisePrediction;
use crate::perturb::PerturbConfig;
use crate::schedule::TriangularSchedule;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Cfg,
    Apg,
    Dog,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Cfg, Strategy::Apg, Strategy::Dog];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Cfg => "cfg",
            Strategy::Apg => "apg",
            Strategy::Dog => "dog",
        }
    }

    /// CFG and APG contrast against the unconditional branch.
    pub fn needs_null_branch(self) -> bool {
        matches!(self, Strategy::Cfg | Strategy::Apg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

/// Norm-clip threshold for the negative prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tau<T> {
    /// The norm of the positive prediction at the current step.
    Auto,
    Fixed(T),
}

impl<T: Scalar> Tau<T> {
    pub fn resolve(self, eps_p: &NoisePrediction<T>) -> T {
        match self {
            Tau::Auto => eps_p.norm(),
            Tau::Fixed(v) => v,
        }
    }
}

impl<T: Serialize> Serialize for Tau<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tau::Auto => s.serialize_str("auto"),
            Tau::Fixed(v) => v.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Tau<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr<T> {
            Value(T),
            Keyword(String),
        }
        match Repr::<T>::deserialize(d)? {
            Repr::Value(v) => Ok(Tau::Fixed(v)),
            Repr::Keyword(k) if k == "auto" => Ok(Tau::Auto),
            Repr::Keyword(k) => Err(serde::de::Error::custom(format!(
                "tau must be a number or \"auto\", got \"{k}\""
            ))),
        }
    }
}

/// A combined prediction plus whether a degenerate fallback was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Flagged<T> {
    pub value: NoisePrediction<T>,
    pub degenerate: bool,
}

impl<T> Flagged<T> {
    fn ok(value: NoisePrediction<T>) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: NoisePrediction<T>) -> Self {
        Self {
            value,
            degenerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig<T> {
    pub strategy: Strategy,
    /// Carries the step count, the peak `u_T` and the base scale gs.
    pub triangular: TriangularSchedule<T>,
    pub tau: Tau<T>,
    pub apg_parallel_weight: T,
    /// Triangular g(t) when set, constant gs otherwise.
    pub schedule_on: bool,
    /// Orthogonalize the negative prediction before the residual (DOG only).
    pub projection_on: bool,
    pub perturb: PerturbConfig<T>,
}

impl<T: Scalar> GuidanceConfig<T> {
    pub const DEFAULT_PEAK: usize = 700;

    /// Defaults: peak 700 (or 70% of the chain when shorter), τ = auto,
    /// APG parallel weight 0.1, schedule and projection on.
    pub fn new(strategy: Strategy, gs: T, num_steps: usize) -> Result<Self> {
        let peak = if num_steps > Self::DEFAULT_PEAK {
            Self::DEFAULT_PEAK
        } else {
            (num_steps * 7 / 10).max(1)
        };
        let cfg = Self {
            strategy,
            triangular: TriangularSchedule::new(num_steps, peak, gs)?,
            tau: Tau::Auto,
            apg_parallel_weight: T::of(0.1),
            schedule_on: true,
            projection_on: true,
            perturb: PerturbConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // re-runs the constructor checks on possibly hand-edited fields
        TriangularSchedule::new(
            self.triangular.num_steps(),
            self.triangular.peak(),
            self.triangular.scale(),
        )?;
        if let Tau::Fixed(v) = self.tau {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::config("tau", "must be positive and finite, or auto"));
            }
        }
        if !(self.apg_parallel_weight >= T::zero() && self.apg_parallel_weight <= T::one()) {
            return Err(Error::config("apg_parallel_weight", "must lie in [0, 1]"));
        }
        self.perturb.validate()
    }

    pub fn gs(&self) -> T {
        self.triangular.scale()
    }

    pub fn with_gs(mut self, gs: T) -> Result<Self> {
        self.triangular = self.triangular.with_scale(gs)?;
        Ok(self)
    }

    pub fn with_peak(mut self, peak: usize) -> Result<Self> {
        self.triangular = TriangularSchedule::new(self.triangular.num_steps(), peak, self.gs())?;
        Ok(self)
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// Guidance scale applied at timestep `t`.
    pub fn scale_at(&self, t: usize) -> Result<T> {
        if self.schedule_on {
            self.triangular.guidance_scale_at(t)
        } else if t > self.triangular.num_steps() {
            Err(Error::domain(format!("timestep {t} outside schedule")))
        } else {
            Ok(self.gs())
        }
    }
}

/// `(<eps_n, eps_p> / ||eps_p||^2) eps_p`. Degenerate (zero result) when `eps_p` is zero.
pub fn project_onto<T: Scalar>(
    eps_n: &NoisePrediction<T>,
    eps_p: &NoisePrediction<T>,
) -> Result<Flagged<T>> {
    eps_p.check_shape(eps_n)?;
    let denom = eps_p.dot(eps_p);
    if !(denom > T::zero()) {
        return Ok(Flagged::degenerate(NoisePrediction::zeros(eps_p.len())));
    }
    Ok(Flagged::ok(eps_p.scaled(eps_n.dot(eps_p) / denom)))
}

/// Component of `eps_n` orthogonal to `eps_p`.
pub fn orthogonal_component<T: Scalar>(
    eps_n: &NoisePrediction<T>,
    eps_p: &NoisePrediction<T>,
) -> Result<Flagged<T>> {
    let proj = project_onto(eps_n, eps_p)?;
    if proj.degenerate {
        return Ok(Flagged::degenerate(NoisePrediction::zeros(eps_p.len())));
    }
    let once = eps_n.sub(&proj.value);
    // Second Gram-Schmidt pass; removes the parallel residue left by cancellation.
    let residue = project_onto(&once, eps_p)?.value;
    Ok(Flagged::ok(once.sub(&residue)))
}

/// `min(1, tau / ||eps_n||) eps_n`.
pub fn clip_norm<T: Scalar>(eps_n: &NoisePrediction<T>, tau: T) -> Result<NoisePrediction<T>> {
    if !(tau > T::zero()) {
        return Err(Error::domain(format!(
            "clip threshold must be positive, got {tau}"
        )));
    }
    let n = eps_n.norm();
    if n <= tau {
        Ok(eps_n.clone())
    } else {
        Ok(eps_n.scaled(tau / n))
    }
}

/// DOG residual with an explicit scale: clip, orthogonalize, then
/// `eps_p + g (eps_p - eps_star)`. With `projection_on == false` the clipped
/// negative prediction is used in place of its orthogonal component.
pub fn dog_residual<T: Scalar>(
    eps_p: &NoisePrediction<T>,
    eps_n: &NoisePrediction<T>,
    g: T,
    tau: Tau<T>,
    projection_on: bool,
) -> Result<Flagged<T>> {
    eps_p.check_shape(eps_n)?;
    if g == T::zero() {
        return Ok(Flagged::ok(eps_p.clone()));
    }
    if !(eps_p.norm() > T::zero()) {
        return Ok(Flagged::degenerate(eps_p.clone()));
    }
    let clipped = clip_norm(eps_n, tau.resolve(eps_p))?;
    let eps_star = if projection_on {
        orthogonal_component(&clipped, eps_p)?.value
    } else {
        clipped
    };
    Ok(Flagged::ok(eps_p.add_scaled(g, &eps_p.sub(&eps_star))))
}

/// DOG combination at timestep `t` under `cfg`.
pub fn dog_combine<T: Scalar>(
    eps_p: &NoisePrediction<T>,
    eps_n: &NoisePrediction<T>,
    t: usize,
    cfg: &GuidanceConfig<T>,
) -> Result<Flagged<T>> {
    let g = cfg.scale_at(t)?;
    dog_residual(eps_p, eps_n, g, cfg.tau, cfg.projection_on)
}

/// `eps_u + gs (eps_c - eps_u)`; exact at `gs = 0` and `gs = 1`.
pub fn cfg_combine<T: Scalar>(
    eps_c: &NoisePrediction<T>,
    eps_u: &NoisePrediction<T>,
    gs: T,
) -> Result<NoisePrediction<T>> {
    eps_c.check_shape(eps_u)?;
    if gs == T::one() {
        return Ok(eps_c.clone());
    }
    if gs == T::zero() {
        return Ok(eps_u.clone());
    }
    Ok(eps_u.add_scaled(gs, &eps_c.sub(eps_u)))
}

/// `eps_c + gs (d_perp + w d_par)` where `d = eps_c - eps_u` is split along `eps_c`.
/// Falls back to [`cfg_combine`] when `eps_c` is zero.
pub fn apg_combine<T: Scalar>(
    eps_c: &NoisePrediction<T>,
    eps_u: &NoisePrediction<T>,
    gs: T,
    parallel_weight: T,
) -> Result<Flagged<T>> {
    eps_c.check_shape(eps_u)?;
    let diff = eps_c.sub(eps_u);
    let parallel = project_onto(&diff, eps_c)?;
    if parallel.degenerate {
        return Ok(Flagged::degenerate(cfg_combine(eps_c, eps_u, gs)?));
    }
    let perpendicular = diff.sub(&parallel.value);
    let update = perpendicular.add_scaled(parallel_weight, &parallel.value);
    Ok(Flagged::ok(eps_c.add_scaled(gs, &update)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn np(v: &[f64]) -> NoisePrediction<f64> {
        NoisePrediction::new(v.to_vec())
    }

    fn random(dim: usize, r: &mut rng::SeededRng) -> NoisePrediction<f64> {
        np(&(0..dim)
            .map(|_| f64::standard_normal(r))
            .collect::<Vec<_>>())
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            project_onto(&np(&[3.0, 4.0]), &np(&[1.0, 0.0]))
                .unwrap()
                .value,
            np(&[3.0, 0.0])
        );
        assert_eq!(
            project_onto(&np(&[2.0, 0.0]), &np(&[1.0, 0.0]))
                .unwrap()
                .value,
            np(&[2.0, 0.0])
        );
        // <(0,2),(1,1)> = 2, ||(1,1)||^2 = 2
        assert_eq!(
            project_onto(&np(&[0.0, 2.0]), &np(&[1.0, 1.0]))
                .unwrap()
                .value,
            np(&[1.0, 1.0])
        );
    }

    #[test]
    fn projection_onto_zero_is_flagged() {
        let p = project_onto(&np(&[1.0, 2.0]), &np(&[0.0, 0.0])).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.value, np(&[0.0, 0.0]));
        assert!(
            orthogonal_component(&np(&[1.0, 2.0]), &np(&[0.0, 0.0]))
                .unwrap()
                .degenerate
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(project_onto(&np(&[1.0]), &np(&[1.0, 0.0])).is_err());
        assert!(cfg_combine(&np(&[1.0]), &np(&[1.0, 0.0]), 2.0).is_err());
        assert!(dog_residual(&np(&[1.0]), &np(&[1.0, 0.0]), 2.0, Tau::Auto, true).is_err());
    }

    #[test]
    fn orthogonal_examples() {
        assert_eq!(
            orthogonal_component(&np(&[3.0, 4.0]), &np(&[1.0, 0.0]))
                .unwrap()
                .value,
            np(&[0.0, 4.0])
        );
        assert_eq!(
            orthogonal_component(&np(&[2.0, 0.0]), &np(&[1.0, 0.0]))
                .unwrap()
                .value,
            np(&[0.0, 0.0])
        );
    }

    #[test]
    fn orthogonality_property_64d() {
        let mut r = rng::seeded(64);
        for _ in 0..10_000 {
            let p = random(64, &mut r);
            let n = random(64, &mut r);
            let star = orthogonal_component(&n, &p).unwrap().value;
            assert!(star.dot(&p).abs() <= 1e-10 * star.norm() * p.norm());
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_norm(&np(&[3.0, 4.0]), 5.0).unwrap(), np(&[3.0, 4.0]));
        let c = clip_norm(&np(&[3.0, 4.0]), 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip_norm(&np(&[0.0, 0.0]), 10.0).unwrap(), np(&[0.0, 0.0]));
        assert!(clip_norm(&np(&[1.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn dog_examples() {
        let cfg = GuidanceConfig::new(Strategy::Dog, 30.0, 1000).unwrap();
        let p = np(&[0.5, -1.0]);
        let n = np(&[2.0, 3.0]);
        assert_eq!(dog_combine(&p, &n, 0, &cfg).unwrap().value, p);
        assert_eq!(dog_combine(&p, &n, 1000, &cfg).unwrap().value, p);

        // eps* = (0,4), eps_hat = (1,0) + 1 * ((1,0) - (0,4)) = (2,-4)
        let out = dog_residual(
            &np(&[1.0, 0.0]),
            &np(&[3.0, 4.0]),
            1.0,
            Tau::Fixed(5.0),
            true,
        )
        .unwrap();
        assert_eq!(out.value, np(&[2.0, -4.0]));

        for g in [0.5, 3.0, 30.0] {
            let out = dog_residual(
                &np(&[1.0, 2.0]),
                &np(&[-3.0, -6.0]),
                g,
                Tau::Fixed(0.5),
                true,
            )
            .unwrap();
            assert!((out.value[0] - (1.0 + g)).abs() < 1e-12);
            assert!((out.value[1] - 2.0 * (1.0 + g)).abs() < 1e-12);
        }
    }

    #[test]
    fn dog_degenerate_positive() {
        let out = dog_residual(&np(&[0.0, 0.0]), &np(&[1.0, 1.0]), 3.0, Tau::Auto, true).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, np(&[0.0, 0.0]));
    }

    #[test]
    fn dog_without_projection_uses_clipped_negative() {
        let out = dog_residual(&np(&[1.0, 0.0]), &np(&[3.0, 4.0]), 1.0, Tau::Auto, false).unwrap();
        // clipped negative = (0.6, 0.8); 2 * (1,0) - (0.6,0.8)
        assert!((out.value[0] - 1.4).abs() < 1e-15);
        assert!((out.value[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn pythagorean_identity() {
        let mut r = rng::seeded(7);
        for _ in 0..2000 {
            let p = random(16, &mut r);
            let n = random(16, &mut r).scaled(3.0);
            for g in [0.0, 1.0, 30.0] {
                let out = dog_residual(&p, &n, g, Tau::Auto, true).unwrap().value;
                let clipped = clip_norm(&n, p.norm()).unwrap();
                let star = orthogonal_component(&clipped, &p).unwrap().value;
                let want = (1.0 + g).powi(2) * p.dot(&p) + g * g * star.dot(&star);
                let got = out.dot(&out);
                assert!((got - want).abs() <= 1e-8 * want);
            }
        }
    }

    #[test]
    fn cfg_examples() {
        let c = np(&[1.0, 0.0]);
        let u = np(&[0.0, 1.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &u, 2.0).unwrap(), np(&[2.0, -1.0]));
    }

    #[test]
    fn apg_examples() {
        let c = np(&[1.0, 0.0]);
        let u = np(&[0.0, 1.0]);
        assert_eq!(
            apg_combine(&c, &u, 2.0, 0.0).unwrap().value,
            np(&[1.0, -2.0])
        );
        // difference parallel to eps_c and zero parallel weight leaves eps_c
        let u_par = np(&[-2.0, 0.0]);
        for gs in [0.5, 7.0, 30.0] {
            assert_eq!(apg_combine(&c, &u_par, gs, 0.0).unwrap().value, c);
        }
    }

    #[test]
    fn apg_full_parallel_weight_is_shifted_cfg() {
        let mut r = rng::seeded(3);
        for _ in 0..500 {
            let c = random(8, &mut r);
            let u = random(8, &mut r);
            let gs = 10.0 * f64::unit_uniform(&mut r);
            let apg = apg_combine(&c, &u, gs, 1.0).unwrap().value;
            let cfg = cfg_combine(&c, &u, gs + 1.0).unwrap();
            for (a, b) in apg.iter().zip(cfg.iter()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn apg_zero_conditional_falls_back() {
        let out = apg_combine(&np(&[0.0, 0.0]), &np(&[1.0, 1.0]), 3.0, 0.1).unwrap();
        assert!(out.degenerate);
        assert_eq!(
            out.value,
            cfg_combine(&np(&[0.0, 0.0]), &np(&[1.0, 1.0]), 3.0).unwrap()
        );
    }

    #[test]
    fn config_validation_and_scale() {
        let cfg = GuidanceConfig::new(Strategy::Dog, 10.0, 1000).unwrap();
        assert_eq!(cfg.triangular.peak(), 700);
        assert_eq!(cfg.scale_at(850).unwrap(), 5.0);
        let flat = GuidanceConfig {
            schedule_on: false,
            ..cfg.clone()
        };
        assert_eq!(flat.scale_at(850).unwrap(), 10.0);
        assert!(GuidanceConfig {
            tau: Tau::Fixed(0.0),
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(GuidanceConfig {
            apg_parallel_weight: 1.5,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(cfg.clone().with_gs(-1.0).is_err());
        assert_eq!(
            GuidanceConfig::<f64>::new(Strategy::Dog, 1.0, 50)
                .unwrap()
                .triangular
                .peak(),
            35
        );
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("DOG".parse::<Strategy>().unwrap(), Strategy::Dog);
        assert!("perp-neg".parse::<Strategy>().is_err());
        assert!(Strategy::Cfg.needs_null_branch() && !Strategy::Dog.needs_null_branch());
    }
}
