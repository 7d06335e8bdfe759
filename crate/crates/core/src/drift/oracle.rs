//! Brute-force Feynman–Kac estimate of the exact transport potential:
//!
//! `φ_t(x) = ∫_0^∞ E[∂_t F_t - ∂_t U_t(X_τ)] dτ` with `dX_τ = -∇U_t(X_τ) dτ + √2 dW_τ`, `X_0 = x`,
//! at frozen `t`. The integral is truncated at `inner_steps · inner_dt`, so the estimate is
//! defined up to an additive constant.

use serde::{Deserialize, Serialize};

use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{fill_normal, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKacConfig {
    pub inner_steps: usize,
    pub inner_dt: f64,
    pub replicas: usize,
}

impl Default for FeynmanKacConfig {
    fn default() -> Self {
        Self { inner_steps: 2000, inner_dt: 5e-3, replicas: 10_000 }
    }
}

fn validate(cfg: &FeynmanKacConfig) -> Result<()> {
    if cfg.inner_steps == 0 || cfg.replicas < 2 || !(cfg.inner_dt > 0.0) {
        return Err(NetsError::InvalidParameter(format!("bad Feynman-Kac settings {cfg:?}")));
    }
    Ok(())
}

/// Integrated `∂_tF - ∂_tU` along each start point's trajectory, all driven by the same noise.
fn integrals<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    starts: &[&[f64]],
    cfg: &FeynmanKacConfig,
    seed: u64,
    replica: u64,
) -> Result<Vec<f64>> {
    let d = potential.dim();
    let df = potential.free_energy_rate(t).unwrap_or(0.0);
    let mut rng = stream(seed, replica);
    let mut xs: Vec<Vec<f64>> = starts.iter().map(|s| s.to_vec()).collect();
    let mut acc = vec![0.0; starts.len()];
    let mut xi = vec![0.0; d];
    let mut g = vec![0.0; d];
    let s = (2.0 * cfg.inner_dt).sqrt();
    for _ in 0..cfg.inner_steps {
        fill_normal(&mut rng, &mut xi);
        for (x, a) in xs.iter_mut().zip(acc.iter_mut()) {
            let dtu = potential.grad_and_dt(t, x, &mut g);
            *a += cfg.inner_dt * (df - dtu);
            for k in 0..d {
                x[k] += -g[k] * cfg.inner_dt + s * xi[k];
            }
            if !x.iter().all(|v| v.is_finite()) || !a.is_finite() {
                return Err(NetsError::NonFinite("inner Langevin trajectory diverged".into()));
            }
        }
    }
    Ok(acc)
}

/// Estimate of `φ_t(x)` (up to a constant) and its standard error.
pub fn feynman_kac_phi_oracle<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    x: &[f64],
    cfg: &FeynmanKacConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    validate(cfg)?;
    let vals = (0..cfg.replicas as u64)
        .map(|r| integrals(potential, t, &[x], cfg, seed, r).map(|v| v[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::stats::mean_and_se(&vals))
}

/// Estimate of `φ_t(x) - φ_t(y)` using common random numbers, and its standard error.
pub fn feynman_kac_phi_difference<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    x: &[f64],
    y: &[f64],
    cfg: &FeynmanKacConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    validate(cfg)?;
    let vals = (0..cfg.replicas as u64)
        .map(|r| integrals(potential, t, &[x, y], cfg, seed, r).map(|v| v[0] - v[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::stats::mean_and_se(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::MovingGaussianPotential;

    #[test]
    fn static_potential_gives_zero() {
        let p = MovingGaussianPotential::isotropic(1, 1.0, 1.0, vec![0.0]).unwrap();
        let cfg = FeynmanKacConfig { inner_steps: 100, inner_dt: 1e-2, replicas: 10 };
        let (m, _) = feynman_kac_phi_oracle(&p, 0.3, &[1.2], &cfg, 1).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn rejects_bad_settings() {
        let p = MovingGaussianPotential::isotropic(1, 1.0, 1.0, vec![0.0]).unwrap();
        let cfg = FeynmanKacConfig { inner_steps: 0, inner_dt: 1e-2, replicas: 10 };
        assert!(feynman_kac_phi_oracle(&p, 0.3, &[1.2], &cfg, 1).is_err());
    }
}
