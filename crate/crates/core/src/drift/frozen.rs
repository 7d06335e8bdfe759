use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::nets::{ModelKind, ParametricDrift, RateSource, SliceInputs};
use super::{hutchinson_divergence_batch, DivergenceMode, DriftModel};
use crate::error::{NetsError, Result};
use crate::rng::walker_streams;

/// A fixed drift seen as a model with no parameters, so the training losses can
/// score analytic or hand-built drifts. Gradients are empty.
#[derive(Clone, Debug)]
pub struct Frozen<M>(pub M);

impl<M: DriftModel> DriftModel for Frozen<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, out: ArrayViewMut2<'_, f64>) {
        self.0.drift(t, x, out)
    }
    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        self.0.exact_divergence(t, x, out)
    }
    fn drift_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        drift: ArrayViewMut2<'_, f64>,
        div: &mut [f64],
    ) -> bool {
        self.0.drift_and_divergence(t, x, drift, div)
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        self.0.scalar_potential(t, x, out)
    }
    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        self.0.dt_scalar_potential(t, x, out)
    }
    fn has_scalar_potential(&self) -> bool {
        self.0.has_scalar_potential()
    }
    fn free_energy(&self, t: f64) -> Option<f64> {
        self.0.free_energy(t)
    }
    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        self.0.free_energy_rate(t)
    }
}

impl<M: DriftModel> ParametricDrift for Frozen<M> {
    fn kind(&self) -> ModelKind {
        if self.0.has_scalar_potential() {
            ModelKind::Scalar
        } else {
            ModelKind::Vector
        }
    }

    fn n_params(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(NetsError::DimensionMismatch { expected: 0, got: params.len() })
        }
    }

    fn pinn_accumulate<R: Rng + ?Sized>(
        &self,
        slice: &SliceInputs<'_>,
        mode: DivergenceMode,
        rate: RateSource,
        rng: &mut R,
        _grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let (n, d) = slice.x.dim();
        let mut b = Array2::zeros((n, d));
        let mut div = vec![0.0; n];
        let exact = matches!(mode, DivergenceMode::Exact)
            && self.0.drift_and_divergence(slice.t, slice.x, b.view_mut(), &mut div);
        let sets = if exact {
            vec![div]
        } else {
            let (delta, probes) = match mode {
                DivergenceMode::Hutchinson { delta, probes } => (delta, probes),
                DivergenceMode::Exact => (1e-3, 1),
            };
            self.0.drift(slice.t, slice.x, b.view_mut());
            (0..2)
                .map(|_| {
                    let mut rngs = walker_streams(rng.random(), n);
                    let mut out = vec![0.0; n];
                    hutchinson_divergence_batch(&self.0, slice.t, slice.x, delta, probes, &mut rngs, &mut out);
                    out
                })
                .collect()
        };
        let r0: Vec<Vec<f64>> = sets
            .iter()
            .map(|div| {
                (0..n)
                    .map(|i| div[i] - slice.grad_u.row(i).dot(&b.row(i)) - slice.dt_u[i])
                    .collect()
            })
            .collect();
        let sw: f64 = slice.weights.iter().sum();
        let c = match rate {
            RateSource::Head => self
                .0
                .free_energy_rate(slice.t)
                .ok_or_else(|| NetsError::Unsupported("drift has no free-energy rate".into()))?,
            RateSource::Fixed(v) => v,
            RateSource::SliceOptimal if sw > 0.0 => {
                let s: f64 = (0..n)
                    .map(|i| slice.weights[i] * r0.iter().map(|r| r[i]).sum::<f64>() / r0.len() as f64)
                    .sum();
                -s / sw
            }
            RateSource::SliceOptimal => 0.0,
        };
        let loss: f64 = (0..n)
            .filter(|&i| slice.weights[i] != 0.0)
            .map(|i| {
                let prod = if r0.len() == 2 { (r0[0][i] + c) * (r0[1][i] + c) } else { (r0[0][i] + c).powi(2) };
                slice.weights[i] * prod
            })
            .sum();
        if !loss.is_finite() {
            return Err(NetsError::NonFinite(format!("pinn loss at t = {}", slice.t)));
        }
        Ok((loss, c))
    }

    fn am_interior_accumulate(&self, slice: &SliceInputs<'_>, _grad: &mut [f64]) -> Result<f64> {
        let (n, d) = slice.x.dim();
        let mut b = Array2::zeros((n, d));
        let mut dphi = vec![0.0; n];
        self.0.dt_scalar_potential(slice.t, slice.x, &mut dphi)?;
        self.0.drift(slice.t, slice.x, b.view_mut());
        let loss: f64 = (0..n)
            .filter(|&i| slice.weights[i] != 0.0)
            .map(|i| slice.weights[i] * (0.5 * b.row(i).dot(&b.row(i)) + dphi[i]))
            .sum();
        if !loss.is_finite() {
            return Err(NetsError::NonFinite(format!("action matching loss at t = {}", slice.t)));
        }
        Ok(loss)
    }

    fn potential_accumulate(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        weights: &[f64],
        sign: f64,
        _grad: &mut [f64],
    ) -> Result<f64> {
        let mut phi = vec![0.0; x.nrows()];
        self.0.scalar_potential(t, x, &mut phi)?;
        let loss: f64 = phi
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(p, w)| sign * w * p)
            .sum();
        if !loss.is_finite() {
            return Err(NetsError::NonFinite(format!("boundary potential at t = {t}")));
        }
        Ok(loss)
    }
}
