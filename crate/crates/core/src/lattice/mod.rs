//! Scalar φ⁴ field theory on a periodic hypercubic lattice.
//!
//! The annealed action is
//! `U_t(φ) = Σ_x [-2 Σ_μ φ_x φ_{x+μ} + (2D + m²_t) φ_x² + λ_t φ_x⁴]`
//! with `m²_t = (1-t) m²_0 + t m²_1` and `λ_t = t λ_1`, so the base `t = 0` is a free
//! (Gaussian) theory that [`FourierFreeField`] samples exactly.
//!
//! Fields are flattened row-major: site `(c_0, .., c_{D-1})` lives at `Σ_a c_a L^{D-1-a}`.

mod fourier;
mod hmc;

use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

pub use fourier::{sample_free_field, FourierFreeField};
pub use hmc::{hmc_chain, hmc_oracle, thermodynamic_integration, HmcChain, HmcConfig, TiEstimate};

use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::WalkerRng;

const MAX_SITES: usize = 1 << 20;

fn default_dim() -> usize {
    2
}

fn default_m2_0() -> f64 {
    1.0
}

/// Lattice geometry and the endpoints of the coupling path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// Extent `L` along every axis.
    pub size: usize,
    /// Number of axes `D`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_m2_0")]
    pub m2_0: f64,
    pub m2_1: f64,
    pub lambda_1: f64,
}

impl LatticeSpec {
    pub fn new(size: usize, dim: usize, m2_0: f64, m2_1: f64, lambda_1: f64) -> Result<Self> {
        let spec = Self {
            size,
            dim,
            m2_0,
            m2_1,
            lambda_1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-dimensional lattice with the default free base `m²_0 = 1`.
    pub fn square(size: usize, m2_1: f64, lambda_1: f64) -> Result<Self> {
        Self::new(size, 2, default_m2_0(), m2_1, lambda_1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.dim == 0 {
            return Err(NetsError::InvalidParameter(format!(
                "lattice needs size >= 2 and dim >= 1, got size {} dim {}",
                self.size, self.dim
            )));
        }
        let volume = (0..self.dim).try_fold(1usize, |v, _| v.checked_mul(self.size));
        if volume.is_none_or(|v| v > MAX_SITES) {
            return Err(NetsError::InvalidParameter(format!(
                "lattice {}^{} exceeds {MAX_SITES} sites",
                self.size, self.dim
            )));
        }
        if !(self.m2_0.is_finite() && self.m2_0 > 0.0) {
            return Err(NetsError::InvalidParameter(format!(
                "free base needs m2_0 > 0, got {}",
                self.m2_0
            )));
        }
        if !self.m2_1.is_finite() {
            return Err(NetsError::InvalidParameter(format!("m2_1 = {}", self.m2_1)));
        }
        if !(self.lambda_1.is_finite() && self.lambda_1 >= 0.0) {
            return Err(NetsError::InvalidParameter(format!(
                "lambda_1 must be >= 0, got {}",
                self.lambda_1
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> usize {
        self.size.pow(self.dim as u32)
    }

    pub fn m2(&self, t: f64) -> f64 {
        (1.0 - t) * self.m2_0 + t * self.m2_1
    }

    pub fn lambda(&self, t: f64) -> f64 {
        t * self.lambda_1
    }
}

/// The interpolating φ⁴ action as a [`TimePotential`] on `L^D` real variables.
#[derive(Debug, Clone)]
pub struct Phi4Potential {
    spec: LatticeSpec,
    /// `fwd[x * D + μ]` is the site one step forward of `x` along `μ`.
    fwd: Vec<usize>,
    bwd: Vec<usize>,
    base: FourierFreeField,
}

impl Phi4Potential {
    pub fn new(spec: LatticeSpec) -> Result<Self> {
        spec.validate()?;
        let (fwd, bwd) = neighbour_tables(spec.size, spec.dim);
        let base = FourierFreeField::new(spec.size, spec.dim, spec.m2_0)?;
        Ok(Self {
            spec,
            fwd,
            bwd,
            base,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    /// Index of the neighbour of `site` one step forward along `axis`.
    pub fn forward(&self, site: usize, axis: usize) -> usize {
        self.fwd[site * self.spec.dim + axis]
    }

    pub fn backward(&self, site: usize, axis: usize) -> usize {
        self.bwd[site * self.spec.dim + axis]
    }

    /// Energy with a size check.
    pub fn checked_energy(&self, t: f64, field: &[f64]) -> Result<f64> {
        self.check(field)?;
        Ok(self.energy(t, field))
    }

    fn check(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.spec.volume() {
            return Err(NetsError::DimensionMismatch {
                expected: self.spec.volume(),
                got: field.len(),
            });
        }
        Ok(())
    }

    /// `Σ_x Σ_μ φ_x φ_{x+μ}`, each forward bond once.
    pub fn hopping(&self, field: &[f64]) -> f64 {
        let d = self.spec.dim;
        let mut s = 0.0;
        for (x, phi) in field.iter().enumerate() {
            let nb: f64 = self.fwd[x * d..(x + 1) * d].iter().map(|&y| field[y]).sum();
            s += phi * nb;
        }
        s
    }
}

fn neighbour_tables(size: usize, dim: usize) -> (Vec<usize>, Vec<usize>) {
    let volume = size.pow(dim as u32);
    let mut fwd = vec![0; volume * dim];
    let mut bwd = vec![0; volume * dim];
    for x in 0..volume {
        for mu in 0..dim {
            let stride = size.pow((dim - 1 - mu) as u32);
            let c = (x / stride) % size;
            let base = x - c * stride;
            fwd[x * dim + mu] = base + ((c + 1) % size) * stride;
            bwd[x * dim + mu] = base + ((c + size - 1) % size) * stride;
        }
    }
    (fwd, bwd)
}

fn moments(field: &[f64]) -> (f64, f64) {
    field.iter().fold((0.0, 0.0), |(s2, s4), p| {
        let p2 = p * p;
        (s2 + p2, s4 + p2 * p2)
    })
}

impl TimePotential for Phi4Potential {
    fn dim(&self) -> usize {
        self.spec.volume()
    }

    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        let (s2, s4) = moments(x);
        let mass = 2.0 * self.spec.dim as f64 + self.spec.m2(t);
        -2.0 * self.hopping(x) + mass * s2 + self.spec.lambda(t) * s4
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.spec.dim;
        let mass = 2.0 * (2.0 * d as f64 + self.spec.m2(t));
        let lambda = 4.0 * self.spec.lambda(t);
        for (i, o) in out.iter_mut().enumerate() {
            let nb: f64 = (0..d)
                .map(|mu| x[self.fwd[i * d + mu]] + x[self.bwd[i * d + mu]])
                .sum();
            let p = x[i];
            *o = -2.0 * nb + mass * p + lambda * p * p * p;
        }
    }

    fn dt_energy(&self, _t: f64, x: &[f64]) -> f64 {
        let (s2, s4) = moments(x);
        (self.spec.m2_1 - self.spec.m2_0) * s2 + self.spec.lambda_1 * s4
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        if self.spec.lambda(t) != 0.0 {
            return None;
        }
        let m2 = self.spec.m2(t);
        (m2 > 0.0).then(|| fourier::free_energy(self.spec.size, self.spec.dim, m2))
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        if self.spec.lambda_1 != 0.0 {
            return None;
        }
        let m2 = self.spec.m2(t);
        if m2 <= 0.0 {
            return None;
        }
        // dF/dt = E[∂_t U] = Δm² Σ_x E[φ_x²].
        let var = fourier::site_variance(self.spec.size, self.spec.dim, m2);
        Some((self.spec.m2_1 - self.spec.m2_0) * self.spec.volume() as f64 * var)
    }

    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        if t == 0.0 {
            return self.base.sample(rng, out);
        }
        if self.spec.lambda(t) == 0.0 {
            return FourierFreeField::new(self.spec.size, self.spec.dim, self.spec.m2(t))?
                .sample(rng, out);
        }
        Err(NetsError::Unsupported(format!(
            "interacting lattice theory has no exact sampler (t = {t})"
        )))
    }
}

/// `U_t(φ)` for a single field.
pub fn phi4_energy(spec: &LatticeSpec, t: f64, field: &[f64]) -> Result<f64> {
    Phi4Potential::new(spec.clone())?.checked_energy(t, field)
}

/// `M[φ] = Σ_x φ_x`.
pub fn magnetization(field: &[f64]) -> f64 {
    field.iter().sum()
}

/// Per-field estimates of `G(r) = <φ_x φ_{x + r μ}>`, averaged over sites and axes.
pub fn two_point(potential: &Phi4Potential, fields: ArrayView2<'_, f64>, r: usize) -> Result<Vec<f64>> {
    let spec = potential.spec();
    let v = spec.volume();
    if fields.ncols() != v {
        return Err(NetsError::DimensionMismatch {
            expected: v,
            got: fields.ncols(),
        });
    }
    let d = spec.dim;
    let mut shifted = vec![0usize; v * d];
    for x in 0..v {
        for mu in 0..d {
            let mut y = x;
            for _ in 0..r % spec.size {
                y = potential.forward(y, mu);
            }
            shifted[x * d + mu] = y;
        }
    }
    let norm = (v * d) as f64;
    Ok(fields
        .rows()
        .into_iter()
        .map(|row| {
            let mut s = 0.0;
            for x in 0..v {
                for mu in 0..d {
                    s += row[x] * row[shifted[x * d + mu]];
                }
            }
            s / norm
        })
        .collect())
}

/// Writes one field per row.
pub fn write_fields_csv<W: Write>(fields: ArrayView2<'_, f64>, mut w: W) -> Result<()> {
    let header: Vec<String> = (0..fields.ncols()).map(|i| format!("site{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in fields.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Normalized histogram of `values` on `bins` equal cells over `[lo, hi)`, with optional weights.
/// Returns `(left edge, density)` pairs.
pub fn histogram(values: &[f64], weights: Option<&[f64]>, lo: f64, hi: f64, bins: usize) -> Result<Vec<(f64, f64)>> {
    if bins == 0 || !(hi > lo) {
        return Err(NetsError::InvalidParameter(format!(
            "histogram needs bins > 0 and hi > lo, got {bins} bins on [{lo}, {hi})"
        )));
    }
    if let Some(w) = weights {
        if w.len() != values.len() {
            return Err(NetsError::DimensionMismatch {
                expected: values.len(),
                got: w.len(),
            });
        }
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    let mut total = 0.0;
    for (i, v) in values.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        total += w;
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += w;
        }
    }
    if total <= 0.0 {
        return Err(NetsError::Empty("histogram weights"));
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, c / (total * width)))
        .collect())
}
