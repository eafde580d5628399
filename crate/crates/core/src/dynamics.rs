//! Euler–Maruyama move of the sample locations.
//!
//! `theta <- theta - h * drift + noise_scale * sqrt(2 h / beta) * g` with `g`
//! standard normal. Normals come from `rand_distr::StandardNormal` (ziggurat) on
//! the run's ChaCha8 stream and are drawn row by row, coordinate by coordinate.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::ParticleCloud;
use crate::error::{Error, Result};
use crate::grad::GradBlocks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub h: f64,
    pub beta: f64,
    pub noise_scale: f64,
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("time step h must be positive, got {}", self.h)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise scale must be nonnegative, got {}", self.noise_scale)));
        }
        Ok(())
    }

    /// Standard deviation of the per-coordinate noise increment.
    pub fn noise_std(&self) -> f64 {
        self.noise_scale * (2.0 * self.h / self.beta).sqrt()
    }
}

/// Applies one Euler–Maruyama step to a copy of `cloud`. Weights and step index
/// are left untouched. A zero noise scale draws nothing from `rng`.
pub fn em_update<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    drift: &GradBlocks,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<ParticleCloud> {
    cfg.validate()?;
    let d = drift.to_matrix();
    em_update_matrix(cloud, &d, cfg, rng)
}

pub(crate) fn em_update_matrix<R: Rng + ?Sized>(
    cloud: &ParticleCloud,
    d: &Array2<f64>,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<ParticleCloud> {
    if d.dim() != cloud.theta.dim() {
        return Err(Error::dimension(
            "drift",
            format!("{:?}", cloud.theta.dim()),
            format!("{:?}", d.dim()),
        ));
    }
    if let Some(v) = d.iter().find(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("non-finite drift value {v}")));
    }
    let sd = cfg.noise_std();
    let mut theta = cloud.theta.clone();
    if sd > 0.0 {
        for (t, g) in theta.iter_mut().zip(d.iter()) {
            let n: f64 = rng.sample(StandardNormal);
            *t = *t - cfg.h * g + sd * n;
        }
    } else {
        theta.zip_mut_with(d, |t, g| *t -= cfg.h * g);
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("sample locations became non-finite; lower h"));
    }
    Ok(ParticleCloud {
        theta,
        rho: cloud.rho.clone(),
        step_index: cloud.step_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(theta: Array2<f64>) -> ParticleCloud {
        let n = theta.nrows();
        ParticleCloud::new(theta, Array1::ones(n)).unwrap()
    }

    fn multi(d: Array2<f64>) -> GradBlocks {
        let (n, p) = d.dim();
        GradBlocks::Multi {
            d_theta: d.into_shape_with_order((n, 1, p)).unwrap(),
        }
    }

    #[test]
    fn zero_drift_without_noise_is_identity() {
        let c = cloud(array![[0.1, 0.2], [0.3, -0.4]]);
        let cfg = EmConfig { h: 0.1, beta: 1.0, noise_scale: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = em_update(&c, &multi(Array2::zeros((2, 2))), &cfg, &mut rng).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn single_descent_step() {
        let c = cloud(array![[0.5]]);
        let cfg = EmConfig { h: 0.1, beta: 1.0, noise_scale: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = em_update(&c, &multi(array![[2.0]]), &cfg, &mut rng).unwrap();
        assert!((out.theta[[0, 0]] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn noise_replays_the_seeded_stream() {
        let c = cloud(array![[0.0, 1.0], [2.0, 3.0]]);
        let cfg = EmConfig { h: 0.5, beta: 2.0, noise_scale: 1.0 };
        let out = em_update(&c, &multi(Array2::zeros((2, 2))), &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..4).map(|_| replay.sample(StandardNormal)).collect();
        let sd = (2.0f64 * 0.5 / 2.0).sqrt();
        for (k, (new, old)) in out.theta.iter().zip(c.theta.iter()).enumerate() {
            assert_eq!(*new, old + sd * draws[k]);
        }
        let again = em_update(&c, &multi(Array2::zeros((2, 2))), &cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn noise_statistics() {
        let n = 100_000;
        let c = cloud(Array2::zeros((n, 2)));
        let cfg = EmConfig { h: 0.01, beta: 0.5, noise_scale: 0.1 };
        let out = em_update(&c, &multi(Array2::zeros((n, 2))), &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let target = cfg.noise_scale.powi(2) * 2.0 * cfg.h / cfg.beta;
        for col in out.theta.columns() {
            let mean = col.mean().unwrap();
            let var = col.var(1.0);
            assert!(mean.abs() <= 4.0 * (target / n as f64).sqrt(), "mean {mean}");
            assert!((var / target - 1.0).abs() <= 0.02, "var {var} vs {target}");
        }
    }

    #[test]
    fn constant_drifts_compose() {
        let c = cloud(array![[0.5, -1.0], [2.0, 0.25]]);
        let cfg = EmConfig { h: 0.2, beta: 1.0, noise_scale: 0.0 };
        let d1 = array![[1.0, -0.5], [0.25, 3.0]];
        let d2 = array![[-2.0, 0.5], [1.5, 0.125]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let both = em_update(&c, &multi(&d1 + &d2), &cfg, &mut rng).unwrap();
        let seq = em_update(&em_update(&c, &multi(d1), &cfg, &mut rng).unwrap(), &multi(d2), &cfg, &mut rng).unwrap();
        for (a, b) in both.theta.iter().zip(seq.theta.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_drift_and_config() {
        let c = cloud(array![[0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ok = EmConfig { h: 0.1, beta: 1.0, noise_scale: 1.0 };
        assert!(matches!(em_update(&c, &multi(array![[f64::NAN]]), &ok, &mut rng), Err(Error::Numerical { .. })));
        assert!(matches!(em_update(&c, &multi(array![[1.0, 2.0]]), &ok, &mut rng), Err(Error::Dimension { .. })));
        let bad = EmConfig { h: 0.0, ..ok };
        assert!(matches!(em_update(&c, &multi(array![[0.0]]), &bad, &mut rng), Err(Error::Config(_))));
        let bad = EmConfig { noise_scale: -1.0, ..ok };
        assert!(matches!(em_update(&c, &multi(array![[0.0]]), &bad, &mut rng), Err(Error::Config(_))));
    }
}
