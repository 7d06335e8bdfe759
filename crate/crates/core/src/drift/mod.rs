//! Drift models `b̂_t(x)`, divergence estimation and drift oracles.
//!
//! A [`DriftModel`] evaluates a batch of points (rows of an `n × d` array) at one time.
//! Models that are gradients of a scalar potential `φ̂` expose it through
//! [`DriftModel::scalar_potential`]; models with a free-energy head expose `F̂_t` and `∂_t F̂_t`.

mod analytic;
mod checkpoint;
mod frozen;
mod mlp;
mod nets;
mod oracle;

pub use analytic::{AnalyticGaussianDrift, MixtureDrift, QuadraticPotentialDrift, ZeroDrift};
pub use checkpoint::{config_hash, Checkpoint, TrainedNet, CHECKPOINT_VERSION};
pub use frozen::Frozen;
pub use mlp::{Activation, Mlp, TimeEmbedding};
pub use nets::{
    ModelKind, NetConfig, ParametricDrift, RateSource, ScalarPotentialNet, SliceInputs, VectorFieldNet,
};
pub use oracle::{feynman_kac_phi_difference, feynman_kac_phi_oracle, FeynmanKacConfig};

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{fill_normal, WalkerRng};

/// Time step for finite-difference `∂_t φ̂` when a model does not supply it.
pub const DT_PHI_STEP: f64 = 1e-4;

/// How `∇·b̂` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DivergenceMode {
    /// Exact divergence from the model; falls back to one Hutchinson probe if unavailable.
    #[default]
    Exact,
    /// `mean_k η_k·(b(x+δη_k) - b(x-δη_k)) / 2δ` with `δ = delta · (1 + |x|)`.
    Hutchinson { delta: f64, probes: usize },
}

impl DivergenceMode {
    pub const TRAINING: DivergenceMode = DivergenceMode::Hutchinson { delta: 1e-3, probes: 1 };
    pub const EVALUATION: DivergenceMode = DivergenceMode::Hutchinson { delta: 1e-3, probes: 64 };
}

pub trait DriftModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `b̂_t` at every row of `x`.
    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, out: ArrayViewMut2<'_, f64>);

    /// Writes the exact `∇·b̂_t` per row. Returns `false` when the model cannot.
    fn exact_divergence(&self, _t: f64, _x: ArrayView2<'_, f64>, _out: &mut [f64]) -> bool {
        false
    }

    /// Drift and exact divergence together; models override this when it shares work.
    /// The drift is written even when the divergence is unavailable.
    fn drift_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        drift: ArrayViewMut2<'_, f64>,
        div: &mut [f64],
    ) -> bool {
        self.drift(t, x, drift);
        self.exact_divergence(t, x, div)
    }

    /// `true` for the identically zero drift, which lets integrators skip model work.
    fn is_zero(&self) -> bool {
        false
    }

    /// `φ̂_t` per row for gradient-field models.
    fn scalar_potential(&self, _t: f64, _x: ArrayView2<'_, f64>, _out: &mut [f64]) -> Result<()> {
        Err(NetsError::Unsupported("drift has no scalar potential".into()))
    }

    /// `∂_t φ̂_t` per row; central difference in `t` unless overridden.
    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        let n = x.nrows();
        let mut lo = vec![0.0; n];
        self.scalar_potential(t - DT_PHI_STEP, x, &mut lo)?;
        self.scalar_potential(t + DT_PHI_STEP, x, out)?;
        for (o, l) in out.iter_mut().zip(&lo) {
            *o = (*o - l) / (2.0 * DT_PHI_STEP);
        }
        Ok(())
    }

    fn has_scalar_potential(&self) -> bool {
        false
    }

    /// Learned or exact `F̂_t`, normalized so `F̂_0 = 0`.
    fn free_energy(&self, _t: f64) -> Option<f64> {
        None
    }

    fn free_energy_rate(&self, _t: f64) -> Option<f64> {
        None
    }
}

impl<M: DriftModel + ?Sized> DriftModel for Box<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, out: ArrayViewMut2<'_, f64>) {
        (**self).drift(t, x, out)
    }
    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        (**self).exact_divergence(t, x, out)
    }
    fn drift_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        drift: ArrayViewMut2<'_, f64>,
        div: &mut [f64],
    ) -> bool {
        (**self).drift_and_divergence(t, x, drift, div)
    }
    fn is_zero(&self) -> bool {
        (**self).is_zero()
    }
    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        (**self).scalar_potential(t, x, out)
    }
    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        (**self).dt_scalar_potential(t, x, out)
    }
    fn has_scalar_potential(&self) -> bool {
        (**self).has_scalar_potential()
    }
    fn free_energy(&self, t: f64) -> Option<f64> {
        (**self).free_energy(t)
    }
    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        (**self).free_energy_rate(t)
    }
}

/// Hutchinson estimate of `∇·b(x)` at a single point, with its probe standard error.
pub fn hutchinson_divergence<F, R>(
    mut drift_fn: F,
    x: &[f64],
    delta: f64,
    probes: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    if !(delta > 0.0) {
        return Err(NetsError::InvalidParameter(format!("delta must be > 0, got {delta}")));
    }
    if probes == 0 {
        return Err(NetsError::InvalidParameter("need at least one probe".into()));
    }
    let d = x.len();
    let mut eta = vec![0.0; d];
    let mut xp = vec![0.0; d];
    let mut xm = vec![0.0; d];
    let mut vals = Vec::with_capacity(probes);
    for _ in 0..probes {
        fill_normal(rng, &mut eta);
        for i in 0..d {
            xp[i] = x[i] + delta * eta[i];
            xm[i] = x[i] - delta * eta[i];
        }
        let bp = drift_fn(&xp);
        let bm = drift_fn(&xm);
        let v: f64 = (0..d).map(|i| eta[i] * (bp[i] - bm[i])).sum::<f64>() / (2.0 * delta);
        if !v.is_finite() {
            return Err(NetsError::NonFinite("drift evaluation in divergence probe".into()));
        }
        vals.push(v);
    }
    let (m, se) = crate::stats::mean_and_se(&vals);
    Ok((m, if probes > 1 { se } else { f64::NAN }))
}

/// Batched Hutchinson divergence. Probe `k` of row `i` is drawn from `rngs[i]`.
pub fn hutchinson_divergence_batch<M: DriftModel + ?Sized>(
    model: &M,
    t: f64,
    x: ArrayView2<'_, f64>,
    delta: f64,
    probes: usize,
    rngs: &mut [WalkerRng],
    out: &mut [f64],
) {
    let (n, d) = x.dim();
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut eta = Array2::<f64>::zeros((n, d));
    let mut xp = Array2::<f64>::zeros((n, d));
    let mut xm = Array2::<f64>::zeros((n, d));
    let mut bp = Array2::<f64>::zeros((n, d));
    let mut bm = Array2::<f64>::zeros((n, d));
    let mut steps = Array1::<f64>::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        steps[i] = delta * (1.0 + row.dot(&row).sqrt());
    }
    for _ in 0..probes.max(1) {
        for (mut e, rng) in eta.rows_mut().into_iter().zip(rngs.iter_mut()) {
            fill_normal(rng, e.as_slice_mut().expect("standard layout"));
        }
        for i in 0..n {
            for j in 0..d {
                xp[[i, j]] = x[[i, j]] + steps[i] * eta[[i, j]];
                xm[[i, j]] = x[[i, j]] - steps[i] * eta[[i, j]];
            }
        }
        model.drift(t, xp.view(), bp.view_mut());
        model.drift(t, xm.view(), bm.view_mut());
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..d {
                s += eta[[i, j]] * (bp[[i, j]] - bm[[i, j]]);
            }
            out[i] += s / (2.0 * steps[i]);
        }
    }
    let k = probes.max(1) as f64;
    out.iter_mut().for_each(|o| *o /= k);
}

/// Drift and divergence under `mode`, falling back to one Hutchinson probe when exact is unavailable.
pub fn drift_with_divergence<M: DriftModel + ?Sized>(
    model: &M,
    t: f64,
    x: ArrayView2<'_, f64>,
    mode: DivergenceMode,
    rngs: &mut [WalkerRng],
    drift: ArrayViewMut2<'_, f64>,
    div: &mut [f64],
) {
    match mode {
        DivergenceMode::Exact => {
            if !model.drift_and_divergence(t, x, drift, div) {
                hutchinson_divergence_batch(model, t, x, 1e-3, 1, rngs, div);
            }
        }
        DivergenceMode::Hutchinson { delta, probes } => {
            model.drift(t, x, drift);
            hutchinson_divergence_batch(model, t, x, delta, probes, rngs, div);
        }
    }
}

/// `∇·b̂ - ∇U·b̂ - ∂_tU + ∂_tF̂` at a single point.
///
/// `dt_free_energy` overrides the model's free-energy head when given.
pub fn pinn_residual<M, P>(
    model: &M,
    potential: &P,
    t: f64,
    x: &[f64],
    mode: DivergenceMode,
    dt_free_energy: Option<f64>,
    rng: &mut WalkerRng,
) -> Result<f64>
where
    M: DriftModel + ?Sized,
    P: TimePotential + ?Sized,
{
    let d = x.len();
    if d != model.dim() || d != potential.dim() {
        return Err(NetsError::DimensionMismatch { expected: model.dim(), got: d });
    }
    let df = dt_free_energy
        .or_else(|| model.free_energy_rate(t))
        .ok_or_else(|| NetsError::Unsupported("no free-energy head and no analytic ∂_tF".into()))?;
    let xv = ArrayView2::from_shape((1, d), x).expect("row");
    let mut b = Array2::zeros((1, d));
    let mut div = [0.0];
    drift_with_divergence(model, t, xv, mode, std::slice::from_mut(rng), b.view_mut(), &mut div);
    let mut g = vec![0.0; d];
    let dtu = potential.grad_and_dt(t, x, &mut g);
    let gb: f64 = g.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
    let r = div[0] - gb - dtu + df;
    if !r.is_finite() {
        return Err(NetsError::NonFinite(format!("pinn residual at t = {t}")));
    }
    Ok(r)
}
