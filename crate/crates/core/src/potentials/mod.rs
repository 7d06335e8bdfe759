//! Time-dependent potential families `U_t(x)` and benchmark targets.
//!
//! A [`TimePotential`] gives energy, spatial gradient and time derivative at `(t, x)`.
//! `ρ_t ∝ e^{-U_t}` must be normalizable on `t ∈ [0, 1]`. When the free energy
//! `F_t = -log ∫ e^{-U_t}` is known in closed form it is exposed through
//! [`TimePotential::free_energy`].

mod funnel;
mod mixture;
mod moving_gaussian;

pub use funnel::FunnelPotential;
pub use mixture::{
    circle_means, fab_gmm40_means, random_box_means, ComponentKind, GaussianMixture, GMM40_SCALE,
    MixturePath,
};
pub use moving_gaussian::MovingGaussianPotential;


use crate::error::{NetsError, Result};
use crate::rng::{fill_normal, WalkerRng};

/// Annealed potential family `U_t(x)`, `t ∈ [0, 1]`.
pub trait TimePotential: Send + Sync {
    fn dim(&self) -> usize;

    fn energy(&self, t: f64, x: &[f64]) -> f64;

    /// Writes `∇_x U_t(x)` into `out`.
    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `∂_t U_t(x)`.
    fn dt_energy(&self, t: f64, x: &[f64]) -> f64;

    /// Exact free energy `F_t = -log Z_t`, if known.
    fn free_energy(&self, _t: f64) -> Option<f64> {
        None
    }

    /// Exact `∂_t F_t`, if known.
    fn free_energy_rate(&self, _t: f64) -> Option<f64> {
        None
    }

    /// Draws an exact sample of `ρ_t`. Every potential used as a sampler start supports `t = 0`.
    fn sample(&self, t: f64, _rng: &mut WalkerRng, _out: &mut [f64]) -> Result<()> {
        Err(NetsError::Unsupported(format!(
            "no exact sampler for this potential at t = {t}"
        )))
    }

    /// Gradient and time derivative in one call; override when they share work.
    fn grad_and_dt(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        self.grad(t, x, grad);
        self.dt_energy(t, x)
    }
}

impl<P: TimePotential + ?Sized> TimePotential for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        (**self).energy(t, x)
    }
    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (**self).grad(t, x, out)
    }
    fn dt_energy(&self, t: f64, x: &[f64]) -> f64 {
        (**self).dt_energy(t, x)
    }
    fn free_energy(&self, t: f64) -> Option<f64> {
        (**self).free_energy(t)
    }
    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        (**self).free_energy_rate(t)
    }
    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        (**self).sample(t, rng, out)
    }
    fn grad_and_dt(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).grad_and_dt(t, x, grad)
    }
}

/// A time-independent potential, used as an endpoint of [`LinearInterpolation`].
pub trait Energy: Send + Sync {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64], out: &mut [f64]);

    /// `-log ∫ e^{-U}` when known.
    fn free_energy(&self) -> Option<f64> {
        None
    }

    fn sample(&self, _rng: &mut WalkerRng, _out: &mut [f64]) -> Result<()> {
        Err(NetsError::Unsupported("no exact sampler".into()))
    }
}

/// `U(x) = |x - m|² / (2σ²)`.
#[derive(Clone, Debug)]
pub struct IsotropicGaussian {
    mean: Vec<f64>,
    sigma: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(NetsError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        if mean.is_empty() {
            return Err(NetsError::Empty("gaussian mean"));
        }
        Ok(Self { mean, sigma })
    }

    /// Centered Gaussian with scale `sigma` in `dim` dimensions.
    pub fn centered(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], sigma)
    }
}

impl Energy for IsotropicGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        x.iter()
            .zip(&self.mean)
            .map(|(xi, mi)| (xi - mi).powi(2))
            .sum::<f64>()
            / (2.0 * s2)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let s2 = self.sigma * self.sigma;
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&self.mean) {
            *o = (xi - mi) / s2;
        }
    }

    fn free_energy(&self) -> Option<f64> {
        let d = self.mean.len() as f64;
        Some(-0.5 * d * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln())
    }

    fn sample(&self, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        fill_normal(rng, out);
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o = m + self.sigma * *o;
        }
        Ok(())
    }
}

/// Time-independent potential `U_t = U`.
#[derive(Clone, Debug)]
pub struct StaticPotential<E>(pub E);

impl<E: Energy> TimePotential for StaticPotential<E> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn energy(&self, _t: f64, x: &[f64]) -> f64 {
        self.0.energy(x)
    }

    fn grad(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        self.0.grad(x, out)
    }

    fn dt_energy(&self, _t: f64, _x: &[f64]) -> f64 {
        0.0
    }

    fn free_energy(&self, _t: f64) -> Option<f64> {
        self.0.free_energy()
    }

    fn free_energy_rate(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }

    fn sample(&self, _t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        self.0.sample(rng, out)
    }
}

/// `U_t = (1 - t) U_0 + t U_1`.
pub struct LinearInterpolation<B, T> {
    base: B,
    target: T,
}

impl<B: Energy, T: Energy> LinearInterpolation<B, T> {
    pub fn new(base: B, target: T) -> Result<Self> {
        if base.dim() != target.dim() {
            return Err(NetsError::DimensionMismatch {
                expected: base.dim(),
                got: target.dim(),
            });
        }
        Ok(Self { base, target })
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn target(&self) -> &T {
        &self.target
    }
}

/// Convenience constructor matching [`LinearInterpolation::new`].
pub fn make_linear_interpolation<B: Energy, T: Energy>(
    base: B,
    target: T,
) -> Result<LinearInterpolation<B, T>> {
    LinearInterpolation::new(base, target)
}

impl<B: Energy, T: Energy> TimePotential for LinearInterpolation<B, T> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        // Exact endpoints, no rounding through (1 - t).
        if t == 0.0 {
            return self.base.energy(x);
        }
        if t == 1.0 {
            return self.target.energy(x);
        }
        (1.0 - t) * self.base.energy(x) + t * self.target.energy(x)
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        self.base.grad(x, out);
        self.target.grad(x, &mut tmp);
        for (o, g1) in out.iter_mut().zip(&tmp) {
            *o = (1.0 - t) * *o + t * g1;
        }
    }

    fn dt_energy(&self, _t: f64, x: &[f64]) -> f64 {
        self.target.energy(x) - self.base.energy(x)
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        if t == 0.0 {
            self.base.free_energy()
        } else if t == 1.0 {
            self.target.free_energy()
        } else {
            None
        }
    }

    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        if t == 0.0 {
            self.base.sample(rng, out)
        } else if t == 1.0 {
            self.target.sample(rng, out)
        } else {
            Err(NetsError::Unsupported(format!(
                "linear interpolation has no exact sampler at t = {t}"
            )))
        }
    }
}
