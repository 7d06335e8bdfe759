use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::{DivergenceMode, ParametricDrift, RateSource, SliceInputs};
use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{derive_seed, stream};
use crate::sde::SliceRecord;

/// Where `∂_t F̂` in the PINN residual comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateChoice {
    /// The model's learned free-energy head.
    #[default]
    Head,
    /// The potential's closed-form `∂_t F_t`.
    Exact,
    /// The per-slice constant minimizing the loss.
    SliceOptimal,
}

/// Loss value, parameter gradient and diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `∂_t F̂` used at each slice (PINN only).
    pub rates: Vec<f64>,
    /// Walkers whose log-weight hit the clip bound.
    pub clipped: usize,
}

/// Self-normalized weights `e^{A_i} / Σ e^{A_j}` with `A_i - mean(A)` clipped to `±clip`.
///
/// Returns the weights and how many were clipped. Quarantined walkers get weight 0.
pub fn slice_weights(log_w: &[f64], clip: f64) -> Result<(Vec<f64>, usize)> {
    let live: Vec<f64> = log_w.iter().copied().filter(|a| a.is_finite()).collect();
    if live.is_empty() {
        return Err(NetsError::DegenerateWeights);
    }
    let centre = live.iter().sum::<f64>() / live.len() as f64;
    let mut clipped = 0;
    let l: Vec<f64> = log_w
        .iter()
        .map(|a| {
            if !a.is_finite() {
                return f64::NEG_INFINITY;
            }
            let c = a - centre;
            if c.abs() > clip {
                clipped += 1;
            }
            c.clamp(-clip, clip)
        })
        .collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok((w, clipped))
}

/// `∇U_t` and `∂_tU_t` for every row.
pub(crate) fn potential_rows<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    x: ArrayView2<'_, f64>,
) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mut g = Array2::zeros((n, d));
    let mut dtu = vec![0.0; n];
    for (i, (xr, mut gr)) in x.rows().into_iter().zip(g.rows_mut()).enumerate() {
        let xs = xr.to_vec();
        dtu[i] = potential.grad_and_dt(t, &xs, gr.as_slice_mut().expect("row"));
    }
    (g, dtu)
}

fn rate_source<P: TimePotential + ?Sized>(choice: RateChoice, potential: &P, t: f64) -> Result<RateSource> {
    Ok(match choice {
        RateChoice::Head => RateSource::Head,
        RateChoice::SliceOptimal => RateSource::SliceOptimal,
        RateChoice::Exact => RateSource::Fixed(
            potential
                .free_energy_rate(t)
                .ok_or_else(|| NetsError::Unsupported("potential has no closed-form ∂_tF".into()))?,
        ),
    })
}

fn check_dims<M, P>(model: &M, potential: &P, x: ArrayView2<'_, f64>) -> Result<()>
where
    M: ParametricDrift + ?Sized,
    P: TimePotential + ?Sized,
{
    for got in [potential.dim(), x.ncols()] {
        if got != model.dim() {
            return Err(NetsError::DimensionMismatch { expected: model.dim(), got });
        }
    }
    Ok(())
}

/// One PINN slice term: points, per-point weights (already scaled) and a probe seed.
struct PinnTerm<'a> {
    t: f64,
    x: ArrayView2<'a, f64>,
    weights: Vec<f64>,
    seed: u64,
}

fn pinn_terms<M, P>(
    model: &M,
    potential: &P,
    terms: &[PinnTerm<'_>],
    mode: DivergenceMode,
    rate: RateChoice,
) -> Result<LossOutput>
where
    M: ParametricDrift,
    P: TimePotential + ?Sized,
{
    let np = model.n_params();
    let parts: Vec<Result<(f64, f64, Vec<f64>)>> = terms
        .par_iter()
        .map(|term| {
            check_dims(model, potential, term.x)?;
            let (g, dtu) = potential_rows(potential, term.t, term.x);
            let slice = SliceInputs {
                t: term.t,
                x: term.x,
                weights: &term.weights,
                grad_u: g.view(),
                dt_u: &dtu,
            };
            let mut grad = vec![0.0; np];
            let source = rate_source(rate, potential, term.t)?;
            let (loss, c) = model.pinn_accumulate(&slice, mode, source, &mut stream(term.seed, 0), &mut grad)?;
            Ok((loss, c, grad))
        })
        .collect();
    let mut out = LossOutput { loss: 0.0, grad: vec![0.0; np], rates: Vec::new(), clipped: 0 };
    for p in parts {
        let (loss, c, grad) = p?;
        out.loss += loss;
        out.rates.push(c);
        out.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

fn check_slices(slices: &[SliceRecord], t_max: f64) -> Result<()> {
    if slices.is_empty() {
        return Err(NetsError::Empty("trajectory slices"));
    }
    if !(t_max > 0.0 && t_max <= 1.0) {
        return Err(NetsError::InvalidParameter(format!("horizon must be in (0, 1], got {t_max}")));
    }
    if let Some(s) = slices.iter().find(|s| s.t < 0.0 || s.t > t_max) {
        return Err(NetsError::InvalidParameter(format!("slice at t = {} outside [0, {t_max}]", s.t)));
    }
    Ok(())
}

/// On-policy PINN loss `T · mean_k Σ_i w_{k,i} R_{k,i}²`, with self-normalized weights per slice.
///
/// The slices are treated as constants: only the model parameters carry gradient.
/// Hutchinson probes for slice `k` come from a stream keyed by `(seed, k)`.
pub fn pinn_loss_on_policy<M, P>(
    model: &M,
    potential: &P,
    slices: &[SliceRecord],
    t_max: f64,
    mode: DivergenceMode,
    rate: RateChoice,
    clip: f64,
    seed: u64,
) -> Result<LossOutput>
where
    M: ParametricDrift,
    P: TimePotential + ?Sized,
{
    check_slices(slices, t_max)?;
    let scale = t_max / slices.len() as f64;
    let mut clipped = 0;
    let mut terms = Vec::with_capacity(slices.len());
    for (k, s) in slices.iter().enumerate() {
        let (mut w, c) = slice_weights(&s.log_weights, clip)?;
        clipped += c;
        w.iter_mut().for_each(|v| *v *= scale);
        terms.push(PinnTerm { t: s.t, x: s.positions.view(), weights: w, seed: derive_seed(seed, 0x50494E4E, k as u64) });
    }
    let mut out = pinn_terms(model, potential, &terms, mode, rate)?;
    out.clipped = clipped;
    Ok(out)
}

/// Off-policy PINN loss: the unweighted mean of squared residuals over arbitrary points.
pub fn pinn_loss_off_policy<M, P>(
    model: &M,
    potential: &P,
    samples: &[(f64, Array2<f64>)],
    mode: DivergenceMode,
    rate: RateChoice,
    seed: u64,
) -> Result<LossOutput>
where
    M: ParametricDrift,
    P: TimePotential + ?Sized,
{
    let total: usize = samples.iter().map(|(_, x)| x.nrows()).sum();
    if total == 0 {
        return Err(NetsError::Empty("off-policy samples"));
    }
    let w = 1.0 / total as f64;
    let terms: Vec<PinnTerm<'_>> = samples
        .iter()
        .enumerate()
        .map(|(k, (t, x))| PinnTerm {
            t: *t,
            x: x.view(),
            weights: vec![w; x.nrows()],
            seed: derive_seed(seed, 0x4F464650, k as u64),
        })
        .collect();
    pinn_terms(model, potential, &terms, mode, rate)
}

/// Weighted action-matching loss
/// `T · mean_k E_k[½|∇φ̂|² + ∂_tφ̂] + E_0[φ̂_0] - E_T[φ̂_T]`.
///
/// The first slice must be at `t = 0` and the last at `t = t_max`.
pub fn am_loss<M>(model: &M, slices: &[SliceRecord], t_max: f64, clip: f64) -> Result<LossOutput>
where
    M: ParametricDrift,
{
    check_slices(slices, t_max)?;
    let (first, last) = (&slices[0], &slices[slices.len() - 1]);
    if slices.len() < 2 || first.t != 0.0 || (last.t - t_max).abs() > 1e-12 {
        return Err(NetsError::InvalidParameter("action matching needs slices at t = 0 and t = T".into()));
    }
    let np = model.n_params();
    let scale = t_max / slices.len() as f64;
    let parts: Vec<Result<(f64, usize, Vec<f64>)>> = slices
        .par_iter()
        .map(|s| {
            let (mut w, c) = slice_weights(&s.log_weights, clip)?;
            w.iter_mut().for_each(|v| *v *= scale);
            let (n, d) = s.positions.dim();
            let dummy = Array2::zeros((n, d));
            let dtu = vec![0.0; n];
            let slice = SliceInputs { t: s.t, x: s.positions.view(), weights: &w, grad_u: dummy.view(), dt_u: &dtu };
            let mut grad = vec![0.0; np];
            let loss = model.am_interior_accumulate(&slice, &mut grad)?;
            Ok((loss, c, grad))
        })
        .collect();
    let mut out = LossOutput { loss: 0.0, grad: vec![0.0; np], rates: Vec::new(), clipped: 0 };
    for p in parts {
        let (loss, c, grad) = p?;
        out.loss += loss;
        out.clipped += c;
        out.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
    }
    for (s, sign) in [(first, 1.0), (last, -1.0)] {
        let (w, _) = slice_weights(&s.log_weights, clip)?;
        out.loss += model.potential_accumulate(s.t, s.positions.view(), &w, sign, &mut out.grad)?;
    }
    Ok(out)
}
