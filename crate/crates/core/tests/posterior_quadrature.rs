use dog_core::denoiser::analytic_posterior_mean;
use dog_core::{DiffusionSchedule, GmmComponent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gmm(rng: &mut ChaCha8Rng, k: usize) -> Vec<GmmComponent> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter()
        .map(|w| GmmComponent {
            weight: w / total,
            mean: vec![rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            sigma: rng.random_range(0.2..0.5),
        })
        .collect()
}

/// `E[x_0 | x_t]` by brute-force midpoint summation of
/// `x_0 p(x_0) N(x_t; sqrt(ab) x_0, (1 - ab) I)` over a dense planar grid.
fn quadrature_mean(gmm: &[GmmComponent], x_t: [f64; 2], alpha_bar: f64) -> [f64; 2] {
    let (half, h) = (6.0, 0.01);
    let n = (2.0 * half / h) as usize;
    let (sa, var_t) = (alpha_bar.sqrt(), 1.0 - alpha_bar);
    let log_density = |p: [f64; 2]| -> f64 {
        let prior: f64 = gmm
            .iter()
            .map(|c| {
                let d2 = (p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2);
                c.weight * (-d2 / (2.0 * c.sigma * c.sigma)).exp() / (c.sigma * c.sigma)
            })
            .sum();
        let r2 = (x_t[0] - sa * p[0]).powi(2) + (x_t[1] - sa * p[1]).powi(2);
        prior.ln() - r2 / (2.0 * var_t)
    };
    let grid: Vec<f64> = (0..n).map(|i| -half + (i as f64 + 0.5) * h).collect();
    let mut logs = Vec::with_capacity(n * n);
    for &u in &grid {
        for &v in &grid {
            logs.push(log_density([u, v]));
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for (i, &u) in grid.iter().enumerate() {
        for (j, &v) in grid.iter().enumerate() {
            let w = (logs[i * n + j] - max).exp();
            z += w;
            m0 += w * u;
            m1 += w * v;
        }
    }
    [m0 / z, m1 / z]
}

#[test]
fn posterior_mean_matches_grid_quadrature() {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..3 {
        let gmm = random_gmm(&mut rng, 3 + trial % 2);
        for t in [100, 500, 900] {
            let ab = schedule.alpha_bar(t).unwrap();
            for _ in 0..2 {
                let anchor = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let x_t = [
                    ab.sqrt() * anchor[0] + (1.0 - ab).sqrt() * rng.random_range(-1.0..1.0),
                    ab.sqrt() * anchor[1] + (1.0 - ab).sqrt() * rng.random_range(-1.0..1.0),
                ];
                let exact = analytic_posterior_mean(&gmm, &x_t, ab).unwrap().mean;
                let oracle = quadrature_mean(&gmm, x_t, ab);
                for k in 0..2 {
                    assert!(
                        (exact[k] - oracle[k]).abs() < 1e-6,
                        "trial {trial} t={t} coord {k}: closed form {} vs quadrature {}",
                        exact[k],
                        oracle[k]
                    );
                }
            }
        }
    }
}

#[test]
fn reconstruction_identity_holds() {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gmm = random_gmm(&mut rng, 4);
    for t in [1, 100, 500, 900, 1000] {
        let ab = schedule.alpha_bar(t).unwrap();
        let x_t = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let mean = analytic_posterior_mean(&gmm, &x_t, ab).unwrap().mean;
        let eps: Vec<f64> = (0..2)
            .map(|k| (x_t[k] - ab.sqrt() * mean[k]) / (1.0 - ab).sqrt())
            .collect();
        for k in 0..2 {
            let rebuilt = (1.0 - ab).sqrt() * eps[k] + ab.sqrt() * mean[k];
            assert!((rebuilt - x_t[k]).abs() < 1e-10);
        }
    }
}
