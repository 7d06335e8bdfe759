use super::TimePotential;
use crate::error::{NetsError, Result};
use crate::rng::{fill_normal, WalkerRng};

/// Funnel path from `N(0, I)` at `t = 0` to Neal's funnel at `t = 1`:
///
/// `U_t(x) = ½ x₀² c_t + ½ Σ_{i≥1} e^{-t x₀} x_i² + ½ (d-1) t x₀`, `c_t = 1 - t + t/σ²`.
///
/// At `t = 1` this is `x₀ ~ N(0, σ²)`, `x_i | x₀ ~ N(0, e^{x₀})`. Every `ρ_t` is
/// available in closed form: `x₀ ~ N(0, 1/c_t)`, `x_i | x₀ ~ N(0, e^{t x₀})`.
#[derive(Clone, Debug)]
pub struct FunnelPotential {
    dim: usize,
    sigma: f64,
}

impl Default for FunnelPotential {
    fn default() -> Self {
        Self { dim: 10, sigma: 3.0 }
    }
}

impl FunnelPotential {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim < 2 {
            return Err(NetsError::InvalidParameter(format!("funnel needs d >= 2, got {dim}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(NetsError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { dim, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn c(&self, t: f64) -> f64 {
        1.0 - t + t / (self.sigma * self.sigma)
    }

    fn c_rate(&self) -> f64 {
        -1.0 + 1.0 / (self.sigma * self.sigma)
    }
}

impl TimePotential for FunnelPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        let x0 = x[0];
        let s: f64 = x[1..].iter().map(|v| v * v).sum();
        0.5 * x0 * x0 * self.c(t)
            + 0.5 * (-t * x0).exp() * s
            + 0.5 * (self.dim - 1) as f64 * t * x0
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let x0 = x[0];
        let e = (-t * x0).exp();
        let s: f64 = x[1..].iter().map(|v| v * v).sum();
        out[0] = x0 * self.c(t) - 0.5 * t * e * s + 0.5 * (self.dim - 1) as f64 * t;
        for (o, xi) in out[1..].iter_mut().zip(&x[1..]) {
            *o = e * xi;
        }
    }

    fn dt_energy(&self, t: f64, x: &[f64]) -> f64 {
        let x0 = x[0];
        let s: f64 = x[1..].iter().map(|v| v * v).sum();
        0.5 * x0 * x0 * self.c_rate() - 0.5 * x0 * (-t * x0).exp() * s
            + 0.5 * (self.dim - 1) as f64 * x0
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        let d = self.dim as f64;
        Some(-0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.c(t).ln())
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        Some(0.5 * self.c_rate() / self.c(t))
    }

    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        fill_normal(rng, out);
        out[0] /= self.c(t).sqrt();
        let s = (0.5 * t * out[0]).exp();
        for o in out[1..].iter_mut() {
            *o *= s;
        }
        Ok(())
    }
}
