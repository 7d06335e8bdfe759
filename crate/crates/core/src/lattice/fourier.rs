use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::LatticeSpec;
use crate::error::{NetsError, Result};
use crate::rng::{fill_normal, WalkerRng};

/// Eigenvalues `M_k = m² + 2D - 2 Σ_μ cos k_μ` of the free quadratic form, in FFT order.
fn mode_masses(size: usize, dim: usize, m2: f64) -> Vec<f64> {
    let volume = size.pow(dim as u32);
    let cosines: Vec<f64> = (0..size).map(|l| (2.0 * PI * l as f64 / size as f64).cos()).collect();
    (0..volume)
        .map(|k| {
            let mut rest = k;
            let mut m = m2 + 2.0 * dim as f64;
            for _ in 0..dim {
                m -= 2.0 * cosines[rest % size];
                rest /= size;
            }
            m
        })
        .collect()
}

/// `-log ∫ exp(-φᵀKφ) dφ = -(V/2) log π + ½ Σ_k log M_k`.
pub(super) fn free_energy(size: usize, dim: usize, m2: f64) -> f64 {
    let masses = mode_masses(size, dim, m2);
    let v = masses.len() as f64;
    -0.5 * v * PI.ln() + 0.5 * masses.iter().map(|m| m.ln()).sum::<f64>()
}

/// `Var(φ_x) = (1/V) Σ_k 1/(2 M_k)`.
pub(super) fn site_variance(size: usize, dim: usize, m2: f64) -> f64 {
    let masses = mode_masses(size, dim, m2);
    masses.iter().map(|m| 0.5 / m).sum::<f64>() / masses.len() as f64
}

/// Exact sampler for the free theory `ρ ∝ exp(-Σ_x [-2 Σ_μ φ_x φ_{x+μ} + (2D + m²) φ_x²])`.
///
/// Real white noise is transformed to momentum space, scaled by `(2 M_k)^{-1/2}` and
/// transformed back. Because the noise is real its spectrum is already conjugate-symmetric,
/// so the self-conjugate modes need no special treatment and the output is real.
#[derive(Clone)]
pub struct FourierFreeField {
    size: usize,
    dim: usize,
    m2: f64,
    masses: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FourierFreeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierFreeField")
            .field("size", &self.size)
            .field("dim", &self.dim)
            .field("m2", &self.m2)
            .finish()
    }
}

impl FourierFreeField {
    pub fn new(size: usize, dim: usize, m2: f64) -> Result<Self> {
        if !(m2.is_finite() && m2 > 0.0) {
            return Err(NetsError::InvalidParameter(format!(
                "free field needs m2 > 0, got {m2}"
            )));
        }
        if size < 2 || dim == 0 {
            return Err(NetsError::InvalidParameter(format!(
                "lattice needs size >= 2 and dim >= 1, got size {size} dim {dim}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            size,
            dim,
            m2,
            masses: mode_masses(size, dim, m2),
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        })
    }

    pub fn volume(&self) -> usize {
        self.masses.len()
    }

    /// Mode eigenvalues `M_k` in FFT order.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn site_variance(&self) -> f64 {
        self.masses.iter().map(|m| 0.5 / m).sum::<f64>() / self.volume() as f64
    }

    /// Exact `G(r) = <φ_x φ_{x + r μ}>` along one axis.
    pub fn two_point(&self, r: usize) -> f64 {
        let mut g = 0.0;
        let stride = self.size.pow(self.dim as u32 - 1);
        for (k, m) in self.masses.iter().enumerate() {
            // Momentum index along the leading axis.
            let l = k / stride;
            g += (2.0 * PI * (l * r) as f64 / self.size as f64).cos() * 0.5 / m;
        }
        g / self.volume() as f64
    }

    /// `-log Z` of the free theory.
    pub fn free_energy(&self) -> f64 {
        free_energy(self.size, self.dim, self.m2)
    }

    fn transform(&self, buf: &mut [Complex<f64>], fft: &dyn Fft<f64>) {
        let mut line = vec![Complex::new(0.0, 0.0); self.size];
        for axis in 0..self.dim {
            let stride = self.size.pow((self.dim - 1 - axis) as u32);
            for start in 0..buf.len() {
                if !(start / stride).is_multiple_of(self.size) {
                    continue;
                }
                for (j, c) in line.iter_mut().enumerate() {
                    *c = buf[start + j * stride];
                }
                fft.process(&mut line);
                for (j, c) in line.iter().enumerate() {
                    buf[start + j * stride] = *c;
                }
            }
        }
    }

    /// Draws one field into `out`; returns the largest imaginary residue before it was dropped.
    pub fn sample_with_residue(&self, rng: &mut WalkerRng, out: &mut [f64]) -> Result<f64> {
        let v = self.volume();
        if out.len() != v {
            return Err(NetsError::DimensionMismatch {
                expected: v,
                got: out.len(),
            });
        }
        fill_normal(rng, out);
        let mut buf: Vec<Complex<f64>> = out.iter().map(|&z| Complex::new(z, 0.0)).collect();
        self.transform(&mut buf, self.forward.as_ref());
        for (c, m) in buf.iter_mut().zip(&self.masses) {
            *c *= (0.5 / m).sqrt();
        }
        self.transform(&mut buf, self.inverse.as_ref());
        let mut residue: f64 = 0.0;
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re / v as f64;
            residue = residue.max((c.im / v as f64).abs());
        }
        Ok(residue)
    }

    pub fn sample(&self, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        self.sample_with_residue(rng, out).map(|_| ())
    }
}

/// `n` independent draws from the free base `t = 0` of `spec`, one field per row.
pub fn sample_free_field(spec: &LatticeSpec, rng: &mut WalkerRng, n: usize) -> Result<Array2<f64>> {
    spec.validate()?;
    let field = FourierFreeField::new(spec.size, spec.dim, spec.m2_0)?;
    let mut out = Array2::zeros((n, spec.volume()));
    for mut row in out.rows_mut() {
        field.sample(rng, row.as_slice_mut().expect("rows of a standard array are contiguous"))?;
    }
    Ok(out)
}
