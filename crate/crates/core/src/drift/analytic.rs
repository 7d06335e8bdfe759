use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView2, ArrayViewMut2};

use super::DriftModel;
use crate::error::{NetsError, Result};
use crate::potentials::{ComponentKind, MixturePath, MovingGaussianPotential, TimePotential};

/// `b̂ ≡ 0`: plain annealed importance sampling.
#[derive(Clone, Copy, Debug)]
pub struct ZeroDrift {
    dim: usize,
}

impl ZeroDrift {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl DriftModel for ZeroDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, _x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        out.fill(0.0);
    }

    fn exact_divergence(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        true
    }

    fn is_zero(&self) -> bool {
        true
    }

    fn scalar_potential(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }

    fn dt_scalar_potential(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }

    fn has_scalar_potential(&self) -> bool {
        true
    }
}

/// Static gradient field of `φ(x) = ½ c |x|²`.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticPotentialDrift {
    dim: usize,
    c: f64,
}

impl QuadraticPotentialDrift {
    pub fn new(dim: usize, c: f64) -> Self {
        Self { dim, c }
    }
}

impl DriftModel for QuadraticPotentialDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        out.assign(&(&x * self.c));
    }

    fn exact_divergence(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        let v = self.c * self.dim as f64;
        out.iter_mut().for_each(|o| *o = v);
        true
    }

    fn scalar_potential(&self, _t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        for (o, r) in out.iter_mut().zip(x.rows()) {
            *o = 0.5 * self.c * r.dot(&r);
        }
        Ok(())
    }

    fn dt_scalar_potential(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        Ok(())
    }

    fn has_scalar_potential(&self) -> bool {
        true
    }
}

/// Exact transport for a [`MovingGaussianPotential`]:
///
/// `φ_t(x) = ḃ·(x-b) - ¼ (x-b)ᵀ Ȧ A⁻¹ (x-b) + ¼ tr(A⁻¹ Ȧ A⁻¹)`, `b̂ = ∇φ = ḃ - ½ Ȧ A⁻¹ (x-b)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDrift {
    potential: MovingGaussianPotential,
}

struct Frame {
    b: DVector<f64>,
    m: DMatrix<f64>,
    a_inv: DMatrix<f64>,
}

impl AnalyticGaussianDrift {
    pub fn new(potential: MovingGaussianPotential) -> Self {
        Self { potential }
    }

    pub fn potential(&self) -> &MovingGaussianPotential {
        &self.potential
    }

    fn frame(&self, t: f64) -> Frame {
        let a_inv = self
            .potential
            .precision(t)
            .try_inverse()
            .expect("precision checked positive definite at construction");
        let m = self.potential.precision_rate() * &a_inv;
        Frame { b: self.potential.mean(t), m, a_inv }
    }

    fn centered(x: ndarray::ArrayView1<'_, f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(b.len(), x.iter().zip(b.iter()).map(|(xi, bi)| xi - bi))
    }
}

impl DriftModel for AnalyticGaussianDrift {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        let f = self.frame(t);
        let bd = self.potential.mean_rate();
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            let r = Self::centered(xr, &f.b);
            let v = bd - (&f.m * r) * 0.5;
            for (o, vi) in or.iter_mut().zip(v.iter()) {
                *o = *vi;
            }
        }
    }

    fn exact_divergence(&self, t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        let v = -0.5 * self.frame(t).m.trace();
        out.iter_mut().for_each(|o| *o = v);
        true
    }

    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        let f = self.frame(t);
        let bd = self.potential.mean_rate();
        let c = 0.25 * (&f.a_inv * self.potential.precision_rate() * &f.a_inv).trace();
        for (o, xr) in out.iter_mut().zip(x.rows()) {
            let r = Self::centered(xr, &f.b);
            *o = bd.dot(&r) - 0.25 * r.dot(&(&f.m * &r)) + c;
        }
        Ok(())
    }

    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        // With r = x - b_t: ṙ = -ḃ, d/dt (Ȧ A⁻¹) = -Ȧ A⁻¹ Ȧ A⁻¹, d/dt A⁻¹ = -A⁻¹ Ȧ A⁻¹.
        let f = self.frame(t);
        let bd = self.potential.mean_rate();
        let ad = self.potential.precision_rate();
        let m_dot = -(&f.m * &f.m);
        let ai_dot = -(&f.a_inv * ad * &f.a_inv);
        let c_dot = 0.25 * (&ai_dot * ad * &f.a_inv + &f.a_inv * ad * &ai_dot).trace();
        let bmb = bd.dot(bd);
        for (o, xr) in out.iter_mut().zip(x.rows()) {
            let r = Self::centered(xr, &f.b);
            let sym = &f.m + f.m.transpose();
            *o = -bmb + 0.25 * bd.dot(&(&sym * &r)) - 0.25 * r.dot(&(&m_dot * &r)) + c_dot;
        }
        Ok(())
    }

    fn has_scalar_potential(&self) -> bool {
        true
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        Some(self.potential.reference(t).ok()?.0 - self.potential.reference(0.0).ok()?.0)
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        self.potential.free_energy_rate(t)
    }
}

/// Exact transport `b = Σ_i p_i(t, x) μ_i` for a mean-interpolated Gaussian mixture with constant scale.
#[derive(Clone, Debug)]
pub struct MixtureDrift {
    path: MixturePath,
    sigma: f64,
}

impl MixtureDrift {
    pub fn new(path: MixturePath) -> Result<Self> {
        match path.kind() {
            ComponentKind::Gaussian { sigma0, sigma1 } if sigma0 == sigma1 => {
                Ok(Self { path, sigma: sigma0 })
            }
            _ => Err(NetsError::Unsupported(
                "closed-form mixture transport needs Gaussian components with constant scale".into(),
            )),
        }
    }

    fn weighted_mean(&self, t: f64, x: &[f64], p: &mut [f64], mean: &mut [f64]) -> f64 {
        self.path.responsibilities(t, x, p);
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut second = 0.0;
        for (pi, mu) in p.iter().zip(self.path.means()) {
            for (m, v) in mean.iter_mut().zip(mu) {
                *m += pi * v;
            }
            second += pi * mu.iter().map(|v| v * v).sum::<f64>();
        }
        second
    }
}

impl DriftModel for MixtureDrift {
    fn dim(&self) -> usize {
        self.path.dim()
    }

    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        let mut p = vec![0.0; self.path.means().len()];
        for (xr, mut or) in x.rows().into_iter().zip(out.rows_mut()) {
            let xs = xr.to_vec();
            self.weighted_mean(t, &xs, &mut p, or.as_slice_mut().expect("standard layout"));
        }
    }

    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        // ∇·b = (t/σ²) (Σ p_i |μ_i|² - |Σ p_i μ_i|²).
        let mut p = vec![0.0; self.path.means().len()];
        let mut m = vec![0.0; self.dim()];
        for (o, xr) in out.iter_mut().zip(x.rows()) {
            let second = self.weighted_mean(t, &xr.to_vec(), &mut p, &mut m);
            let mm: f64 = m.iter().map(|v| v * v).sum();
            *o = t / (self.sigma * self.sigma) * (second - mm);
        }
        true
    }

    fn free_energy(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }

    fn free_energy_rate(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }
}
