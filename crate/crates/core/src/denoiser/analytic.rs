use crate::conditions::{Condition, ConditionEmbedder, ConditionalGmm, GmmComponent};
use crate::linalg::dot;
use crate::schedule::DiffusionSchedule;
use crate::{Error, Result, Scalar};

use super::Denoiser;

/// `E[x_0 | x_t]` together with the component responsibilities that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T> {
    pub mean: Vec<T>,
    pub responsibilities: Vec<T>,
    /// Set when every log-responsibility was non-finite and the nearest
    /// component was used instead.
    pub fallback: bool,
}

/// Closed-form posterior mean of a Gaussian mixture under the variance-preserving
/// forward process `x_t = sqrt(ab) x_0 + sqrt(1 - ab) ε`.
pub fn analytic_posterior_mean<T: Scalar>(
    components: &[GmmComponent<T>],
    x_t: &[T],
    alpha_bar: T,
) -> Result<Posterior<T>> {
    if components.is_empty() {
        return Err(Error::domain("mixture has no components"));
    }
    let log_weights: Vec<T> = components.iter().map(|c| c.weight.ln()).collect();
    let weighted: Vec<(T, &GmmComponent<T>)> = log_weights.into_iter().zip(components).collect();
    posterior_from_log_weights(&weighted, x_t, alpha_bar)
}

fn posterior_from_log_weights<T: Scalar>(
    components: &[(T, &GmmComponent<T>)],
    x_t: &[T],
    alpha_bar: T,
) -> Result<Posterior<T>> {
    let d = x_t.len();
    let sqrt_ab = alpha_bar.sqrt();
    let one_minus = T::one() - alpha_bar;
    let half = T::of(0.5);
    let log_two_pi = T::TAU().ln();

    let mut logits = Vec::new();
    for &(log_w, comp) in components {
        if comp.mean.len() != d {
            return Err(Error::DimensionMismatch {
                expected: comp.mean.len(),
                actual: d,
            });
        }
        let var = alpha_bar * comp.sigma * comp.sigma + one_minus;
        let sq = comp
            .mean
            .iter()
            .zip(x_t)
            .fold(T::zero(), |acc, (&m, &x)| acc + (x - sqrt_ab * m).powi(2));
        logits.push(log_w - half * T::of_usize(d) * (log_two_pi + var.ln()) - half * sq / var);
    }

    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let (responsibilities, fallback) = if max.is_finite() {
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        (
            exps.into_iter().map(|e| e / total).collect::<Vec<_>>(),
            false,
        )
    } else {
        // Nearest component in the noised space, first index on ties.
        let mut best = (0usize, T::infinity());
        for (k, (_, comp)) in components.iter().enumerate() {
            let dist = comp
                .mean
                .iter()
                .zip(x_t)
                .fold(T::zero(), |acc, (&m, &x)| acc + (x - sqrt_ab * m).powi(2));
            if dist < best.1 {
                best = (k, dist);
            }
        }
        let mut r = vec![T::zero(); logits.len()];
        r[best.0] = T::one();
        (r, true)
    };

    let mut mean = vec![T::zero(); d];
    for ((_, comp), &r) in components.iter().zip(&responsibilities) {
        if r == T::zero() {
            continue;
        }
        let var = alpha_bar * comp.sigma * comp.sigma + one_minus;
        let shrink = sqrt_ab * comp.sigma * comp.sigma / var;
        for ((acc, &m), &x) in mean.iter_mut().zip(&comp.mean).zip(x_t) {
            *acc = *acc + r * (m + shrink * (x - sqrt_ab * m));
        }
    }
    Ok(Posterior {
        mean,
        responsibilities,
        fallback,
    })
}

/// Exact noise predictor for a [`ConditionalGmm`] target.
///
/// A condition vector selects slices through a sharp softmax over its inner
/// products with the vocabulary embeddings, independently for content and
/// style. Vocabulary embeddings therefore select their own slice, while an
/// arbitrary (e.g. perturbed) vector selects a mixture of slices. The null
/// condition marginalizes uniformly over every slice.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser<T> {
    gmm: ConditionalGmm<T>,
    schedule: DiffusionSchedule<T>,
    content_table: Vec<Vec<T>>,
    style_table: Vec<Vec<T>>,
    sharpness: T,
}

impl<T: Scalar> AnalyticDenoiser<T> {
    /// `bandwidth` is the kernel width on unit-norm representations; the
    /// slice weights are `softmax(<r, e> / bandwidth^2)`.
    pub fn new(
        gmm: ConditionalGmm<T>,
        embedder: &ConditionEmbedder,
        schedule: DiffusionSchedule<T>,
        bandwidth: T,
    ) -> Result<Self> {
        embedder.validate()?;
        if embedder.content_vocab != gmm.content_vocab()
            || embedder.style_vocab != gmm.style_vocab()
        {
            return Err(Error::config(
                "vocab",
                "embedding vocabularies must match the mixture's slice grid",
            ));
        }
        if !(bandwidth > T::zero()) {
            return Err(Error::config("bandwidth", "must be positive"));
        }
        Ok(Self {
            content_table: embedder.content_table(),
            style_table: embedder.style_table(),
            sharpness: (bandwidth * bandwidth).recip(),
            gmm,
            schedule,
        })
    }

    pub fn gmm(&self) -> &ConditionalGmm<T> {
        &self.gmm
    }

    pub fn schedule(&self) -> &DiffusionSchedule<T> {
        &self.schedule
    }

    fn log_softmax(&self, table: &[Vec<T>], r: &[T]) -> Result<Vec<T>> {
        let scores: Vec<T> = table
            .iter()
            .map(|e| {
                if e.len() != r.len() {
                    Err(Error::DimensionMismatch {
                        expected: e.len(),
                        actual: r.len(),
                    })
                } else {
                    Ok(self.sharpness * dot(e, r))
                }
            })
            .collect::<Result<_>>()?;
        let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
        Ok(scores.into_iter().map(|s| s - lse).collect())
    }

    /// Log slice weights over content and style for a condition.
    pub fn condition_log_weights(&self, cond: &Condition<T>) -> Result<(Vec<T>, Vec<T>)> {
        match cond {
            Condition::Null => {
                let c = self.gmm.content_vocab();
                let s = self.gmm.style_vocab();
                Ok((vec![-T::of_usize(c).ln(); c], vec![-T::of_usize(s).ln(); s]))
            }
            Condition::Pair(p) => Ok((
                self.log_softmax(&self.content_table, &p.content)?,
                self.log_softmax(&self.style_table, &p.style)?,
            )),
        }
    }

    /// `E[x_0 | x_t, cond]` under the condition-weighted mixture of slices.
    pub fn posterior(&self, x_t: &[T], t: usize, cond: &Condition<T>) -> Result<Posterior<T>> {
        if x_t.len() != self.gmm.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.gmm.dim(),
                actual: x_t.len(),
            });
        }
        let alpha_bar = self.schedule.alpha_bar(t)?;
        let (log_c, log_s) = self.condition_log_weights(cond)?;
        let flat: Vec<(T, &GmmComponent<T>)> = self
            .gmm
            .slices()
            .flat_map(|((c, s), slice)| {
                let lw = log_c[c] + log_s[s];
                slice.iter().map(move |comp| (lw + comp.weight.ln(), comp))
            })
            .collect();
        posterior_from_log_weights(&flat, x_t, alpha_bar)
    }
}

impl<T: Scalar> Denoiser<T> for AnalyticDenoiser<T> {
    fn sample_dim(&self) -> usize {
        self.gmm.dim()
    }

    fn num_steps(&self) -> usize {
        self.schedule.num_steps()
    }

    fn has_null_branch(&self) -> bool {
        true
    }

    fn raw_predict(&self, x_t: &[T], t: usize, cond: &Condition<T>) -> Result<Vec<T>> {
        let alpha_bar = self.schedule.alpha_bar(t)?;
        let post = self.posterior(x_t, t, cond)?;
        let sqrt_ab = alpha_bar.sqrt();
        let sqrt_one_minus = (T::one() - alpha_bar).sqrt();
        Ok(x_t
            .iter()
            .zip(&post.mean)
            .map(|(&x, &m)| (x - sqrt_ab * m) / sqrt_one_minus)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::ToyGmmSpec;
    use crate::denoiser::predict_eps;

    fn schedule() -> DiffusionSchedule<f64> {
        DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn comp(w: f64, mean: [f64; 2], sigma: f64) -> GmmComponent<f64> {
        GmmComponent {
            weight: w,
            mean: mean.to_vec(),
            sigma,
        }
    }

    fn single_slice_model(components: Vec<GmmComponent<f64>>) -> AnalyticDenoiser<f64> {
        let gmm = ConditionalGmm::single(2, components).unwrap();
        let embedder = ConditionEmbedder {
            content_vocab: 1,
            style_vocab: 1,
            content_dim: 4,
            style_dim: 4,
            seed: 0,
        };
        AnalyticDenoiser::new(gmm, &embedder, schedule(), 0.05).unwrap()
    }

    #[test]
    fn point_mass_eps_closed_form() {
        let mu = [1.0, -2.0];
        let model = single_slice_model(vec![comp(1.0, mu, 0.0)]);
        let sched = schedule();
        for (t, x) in [(1, [0.3, 0.1]), (500, [-4.0, 2.0]), (1000, [0.0, 0.0])] {
            let ab = sched.alpha_bar(t).unwrap();
            let eps = predict_eps(&model, &x, t, &Condition::Null).unwrap();
            for d in 0..2 {
                let want = (x[d] - ab.sqrt() * mu[d]) / (1.0 - ab).sqrt();
                assert!((eps[d] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn symmetric_modes_at_origin_give_zero() {
        let model = single_slice_model(vec![
            comp(0.5, [1.5, 0.5], 0.2),
            comp(0.5, [-1.5, -0.5], 0.2),
        ]);
        let eps = predict_eps(&model, &[0.0, 0.0], 300, &Condition::Null).unwrap();
        assert!(eps.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn single_component_posterior() {
        let c = comp(1.0, [0.5, 1.0], 0.7);
        let x = [2.0, -1.0];
        let ab = 0.3;
        let post = analytic_posterior_mean(std::slice::from_ref(&c), &x, ab).unwrap();
        let var = ab * 0.49 + 0.7;
        for d in 0..2 {
            let want = c.mean[d] + ab.sqrt() * 0.49 / var * (x[d] - ab.sqrt() * c.mean[d]);
            assert!((post.mean[d] - want).abs() < 1e-15);
        }
        assert_eq!(post.responsibilities, vec![1.0]);
    }

    #[test]
    fn point_masses_give_weighted_mean_of_centres() {
        let comps = vec![comp(0.3, [1.0, 0.0], 0.0), comp(0.7, [0.0, 2.0], 0.0)];
        let post = analytic_posterior_mean(&comps, &[0.2, 0.4], 0.5).unwrap();
        let r = &post.responsibilities;
        assert!((r[0] + r[1] - 1.0).abs() < 1e-12);
        assert!((post.mean[0] - r[0]).abs() < 1e-15);
        assert!((post.mean[1] - 2.0 * r[1]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_falls_back_to_nearest() {
        let comps = vec![comp(0.5, [1.0, 0.0], 0.1), comp(0.5, [-1.0, 0.0], 0.1)];
        let post = analytic_posterior_mean(&comps, &[f64::INFINITY, 0.0], 0.5).unwrap();
        assert!(post.fallback);
        assert_eq!(
            post.responsibilities.iter().filter(|&&r| r == 1.0).count(),
            1
        );
    }

    #[test]
    fn reconstruction_identity_and_responsibilities() {
        let spec = ToyGmmSpec::default();
        let gmm = spec.build::<f64>().unwrap();
        let embedder = ConditionEmbedder {
            content_vocab: 4,
            style_vocab: 3,
            content_dim: 8,
            style_dim: 8,
            seed: 1,
        };
        let model = AnalyticDenoiser::new(gmm, &embedder, schedule(), 0.05).unwrap();
        let cond: Condition<f64> = embedder.embed(2, 1).unwrap().into();
        let sched = schedule();
        let mut rng = crate::rng::seeded(4);
        for t in [1usize, 10, 200, 700, 1000] {
            for _ in 0..20 {
                let x: Vec<f64> = (0..2)
                    .map(|_| 3.0 * f64::standard_normal(&mut rng))
                    .collect();
                for c in [&cond, &Condition::Null] {
                    let post = model.posterior(&x, t, c).unwrap();
                    let total: f64 = post.responsibilities.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    let eps = predict_eps(&model, &x, t, c).unwrap();
                    let ab = sched.alpha_bar(t).unwrap();
                    for d in 0..2 {
                        let rec = (1.0 - ab).sqrt() * eps[d] + ab.sqrt() * post.mean[d];
                        assert!((rec - x[d]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn vocabulary_condition_selects_its_slice() {
        let spec = ToyGmmSpec::default();
        let gmm = spec.build::<f64>().unwrap();
        let embedder = ConditionEmbedder {
            content_vocab: 4,
            style_vocab: 3,
            content_dim: 8,
            style_dim: 8,
            seed: 1,
        };
        let model = AnalyticDenoiser::new(gmm.clone(), &embedder, schedule(), 0.05).unwrap();
        let cond: Condition<f64> = embedder.embed(1, 2).unwrap().into();
        let x = [0.4, -0.9];
        let t = 250;
        let joint = model.posterior(&x, t, &cond).unwrap();
        let direct = analytic_posterior_mean(
            gmm.slice(1, 2).unwrap(),
            &x,
            schedule().alpha_bar(t).unwrap(),
        )
        .unwrap();
        for d in 0..2 {
            assert!((joint.mean[d] - direct.mean[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_is_pure() {
        let model = single_slice_model(vec![
            comp(0.5, [1.0, 1.0], 0.3),
            comp(0.5, [-1.0, 0.0], 0.1),
        ]);
        let a = predict_eps(&model, &[0.1, 0.2], 40, &Condition::Null).unwrap();
        let b = predict_eps(&model, &[0.1, 0.2], 40, &Condition::Null).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_rejects_bad_inputs() {
        let model = single_slice_model(vec![comp(1.0, [0.0, 0.0], 1.0)]);
        assert!(matches!(
            predict_eps(&model, &[0.0; 3], 10, &Condition::Null),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(predict_eps(&model, &[0.0; 2], 0, &Condition::Null).is_err());
        assert!(predict_eps(&model, &[0.0; 2], 1001, &Condition::Null).is_err());
    }
}
