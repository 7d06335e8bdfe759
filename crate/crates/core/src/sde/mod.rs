//! Integrators for the coupled position and log-weight dynamics.
//!
//! Every step evaluates drift and potential at the left endpoint. Walkers are updated
//! in parallel, each drawing noise from its own stream, so results do not depend on
//! the thread count. A walker whose update would produce a non-finite value keeps its
//! pre-step position and is quarantined with log-weight `-inf`.

mod grid;
mod rollout;

pub use grid::{DiffusionSchedule, GridMode, TimeGrid};
pub use rollout::{rollout, Dynamics, RolloutConfig, RolloutOutput, SliceRecord, WeightScheme};

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::drift::{drift_with_divergence, DivergenceMode, DriftModel};
use crate::ensemble::{QuarantineRecord, WalkerEnsemble};
use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{normal, WalkerRng};

/// Rows per parallel task when calling batched drift models.
const CHUNK: usize = 64;

/// Momenta `R` of the inertial dynamics and the mobility `μ`.
#[derive(Clone, Debug)]
pub struct InertialState {
    pub momenta: Array2<f64>,
    pub mobility: f64,
}

impl InertialState {
    /// `R_0 ~ N(0, μ I)`, drawn from the walkers' own streams. No draws when `μ = 0`.
    pub fn sample(ens: &mut WalkerEnsemble, mobility: f64) -> Result<Self> {
        if !(mobility >= 0.0 && mobility.is_finite()) {
            return Err(NetsError::InvalidParameter(format!("mobility must be >= 0, got {mobility}")));
        }
        let (n, d) = (ens.len(), ens.dim());
        let mut momenta = Array2::zeros((n, d));
        if mobility > 0.0 {
            let s = mobility.sqrt();
            for (mut row, rng) in momenta.rows_mut().into_iter().zip(ens.rngs_mut()) {
                row.iter_mut().for_each(|r| *r = s * normal(rng));
            }
        }
        Ok(Self { momenta, mobility })
    }

    /// Reorders momenta after resampling, `ancestors[i]` being the parent of walker `i`.
    pub fn reorder(&mut self, ancestors: &[usize]) {
        self.momenta = self.momenta.select(ndarray::Axis(0), ancestors);
    }
}

fn check_step<P, M>(ens: &WalkerEnsemble, potential: &P, drift: &M, dt: f64) -> Result<(f64, f64)>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    let d = ens.dim();
    if potential.dim() != d {
        return Err(NetsError::DimensionMismatch { expected: d, got: potential.dim() });
    }
    if drift.dim() != d {
        return Err(NetsError::DimensionMismatch { expected: d, got: drift.dim() });
    }
    let t = ens.time();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NetsError::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if t + dt > 1.0 + 1e-12 {
        return Err(NetsError::InvalidParameter(format!("step {t} + {dt} runs past t = 1")));
    }
    Ok((t, (t + dt).min(1.0)))
}

fn diffusion_at(eps: &DiffusionSchedule, t: f64) -> Result<f64> {
    let e = eps.at(t);
    if !(e >= 0.0 && e.is_finite()) {
        return Err(NetsError::InvalidParameter(format!("eps must be finite and >= 0, got {e}")));
    }
    Ok(e)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `∇U_t` per row, plus `∂_tU_t` and optionally `U_t`.
fn potential_terms<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    x: &[f64],
    d: usize,
    grad: &mut [f64],
    dtu: &mut [f64],
) {
    x.par_chunks(d)
        .zip(grad.par_chunks_mut(d))
        .zip(dtu.par_iter_mut())
        .for_each(|((xi, gi), di)| *di = potential.grad_and_dt(t, xi, gi));
}

fn energies<P: TimePotential + ?Sized>(potential: &P, t: f64, x: &[f64], d: usize, out: &mut [f64]) {
    x.par_chunks(d)
        .zip(out.par_iter_mut())
        .for_each(|(xi, u)| *u = potential.energy(t, xi));
}

fn gradients<P: TimePotential + ?Sized>(potential: &P, t: f64, x: &[f64], d: usize, out: &mut [f64]) {
    x.par_chunks(d)
        .zip(out.par_chunks_mut(d))
        .for_each(|(xi, gi)| potential.grad(t, xi, gi));
}

/// Drift of every row, evaluated in parallel row blocks.
pub(crate) fn eval_drift<M: DriftModel + ?Sized>(model: &M, t: f64, x: &[f64], d: usize, out: &mut [f64]) {
    if model.is_zero() {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    x.par_chunks(CHUNK * d)
        .zip(out.par_chunks_mut(CHUNK * d))
        .for_each(|(xc, oc)| {
            let rows = xc.len() / d;
            let xv = ArrayView2::from_shape((rows, d), xc).expect("row block");
            let ov = ArrayViewMut2::from_shape((rows, d), oc).expect("row block");
            model.drift(t, xv, ov);
        });
}

/// Drift and divergence of every row; Hutchinson probes come from the walker streams.
pub(crate) fn eval_drift_div<M: DriftModel + ?Sized>(
    model: &M,
    t: f64,
    x: &[f64],
    d: usize,
    mode: DivergenceMode,
    rngs: &mut [WalkerRng],
    drift: &mut [f64],
    div: &mut [f64],
) {
    if model.is_zero() {
        drift.iter_mut().for_each(|v| *v = 0.0);
        div.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    x.par_chunks(CHUNK * d)
        .zip(drift.par_chunks_mut(CHUNK * d))
        .zip(div.par_chunks_mut(CHUNK))
        .zip(rngs.par_chunks_mut(CHUNK))
        .for_each(|(((xc, bc), dc), rc)| {
            let rows = xc.len() / d;
            let xv = ArrayView2::from_shape((rows, d), xc).expect("row block");
            let bv = ArrayViewMut2::from_shape((rows, d), bc).expect("row block");
            drift_with_divergence(model, t, xv, mode, rc, bv, dc);
        });
}

fn record_quarantines(ens: &mut WalkerEnsemble, time: f64, reasons: Vec<Option<String>>) {
    for (walker, r) in reasons.into_iter().enumerate() {
        if let Some(reason) = r {
            ens.push_quarantine(QuarantineRecord { walker, time, reason });
        }
    }
}

/// Positions as a contiguous slice; the ensemble always stores rows contiguously.
fn flat<'a>(x: &'a ArrayViewMut2<'_, f64>) -> &'a [f64] {
    x.as_slice().expect("standard layout")
}

/// Scratch buffers of the common left-endpoint quantities.
struct LeftTerms {
    grad: Vec<f64>,
    dtu: Vec<f64>,
    drift: Vec<f64>,
    div: Vec<f64>,
}

impl LeftTerms {
    fn compute<P, M>(
        potential: &P,
        drift: &M,
        t: f64,
        x: &[f64],
        d: usize,
        mode: DivergenceMode,
        rngs: &mut [WalkerRng],
    ) -> Self
    where
        P: TimePotential + ?Sized,
        M: DriftModel + ?Sized,
    {
        let n = x.len() / d;
        let mut out = Self {
            grad: vec![0.0; n * d],
            dtu: vec![0.0; n],
            drift: vec![0.0; n * d],
            div: vec![0.0; n],
        };
        potential_terms(potential, t, x, d, &mut out.grad, &mut out.dtu);
        eval_drift_div(drift, t, x, d, mode, rngs, &mut out.drift, &mut out.div);
        out
    }

    /// `(∇·b̂ - ∇U·b̂ - ∂_tU) dt` for walker `i`, or `None` if any input is non-finite.
    fn weight_increment(&self, i: usize, d: usize, dt: f64) -> Option<f64> {
        let g = &self.grad[i * d..(i + 1) * d];
        let b = &self.drift[i * d..(i + 1) * d];
        if !(all_finite(g) && all_finite(b) && self.div[i].is_finite() && self.dtu[i].is_finite()) {
            return None;
        }
        let inc = (self.div[i] - dot(g, b) - self.dtu[i]) * dt;
        inc.is_finite().then_some(inc)
    }
}

/// Euler-Maruyama move `x ← x + (-ε∇U + b̂) dt + √(2ε dt) ξ` with noise from `rng`.
///
/// Writes the noise into `xi`. Returns `false`, leaving `x` untouched, if the result is non-finite.
fn overdamped_move(
    x: &mut [f64],
    g: &[f64],
    b: &[f64],
    e: f64,
    dt: f64,
    rng: &mut WalkerRng,
    xi: &mut [f64],
    new: &mut [f64],
) -> bool {
    let s = (2.0 * e * dt).sqrt();
    for k in 0..x.len() {
        xi[k] = if e > 0.0 { normal(rng) } else { 0.0 };
        new[k] = x[k] + (-e * g[k] + b[k]) * dt + s * xi[k];
    }
    if !all_finite(new) {
        return false;
    }
    x.copy_from_slice(new);
    true
}

/// One step of the overdamped dynamics with the continuous-time weight update
/// `A ← A + (∇·b̂ - ∇U·b̂ - ∂_tU) dt`.
///
/// With `ε = 0` no noise is drawn. The divergence uses `mode` (exact when the model
/// provides it, otherwise Hutchinson probes from the walker streams).
pub fn step_overdamped<P, M>(
    ens: &mut WalkerEnsemble,
    potential: &P,
    drift: &M,
    eps: &DiffusionSchedule,
    dt: f64,
    mode: DivergenceMode,
) -> Result<()>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    let (t, t1) = check_step(ens, potential, drift, dt)?;
    let e = diffusion_at(eps, t)?;
    let d = ens.dim();
    let (mut pos, logw, rngs) = ens.parts_mut();
    let left = LeftTerms::compute(potential, drift, t, flat(&pos), d, mode, rngs);
    let x = pos.as_slice_mut().expect("standard layout");
    let reasons: Vec<Option<String>> = x
        .par_chunks_mut(d)
        .zip(logw.par_iter_mut())
        .zip(rngs.par_iter_mut())
        .enumerate()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(xi, new), (i, ((xr, a), rng))| {
                if *a == f64::NEG_INFINITY {
                    return None;
                }
                let Some(inc) = left.weight_increment(i, d, dt) else {
                    return Some(format!("non-finite drift, divergence or gradient at t = {t}"));
                };
                let g = &left.grad[i * d..(i + 1) * d];
                let b = &left.drift[i * d..(i + 1) * d];
                if !overdamped_move(xr, g, b, e, dt, rng, xi, new) {
                    return Some(format!("non-finite position after step at t = {t}"));
                }
                *a += inc;
                None
            },
        )
        .collect();
    ens.set_time(t1);
    record_quarantines(ens, t, reasons);
    Ok(())
}

/// Overdamped move with the discrete-time weight update
/// `A ← A + U_{t_k}(x) - U_{t_{k+1}}(x') + R⁺(x, x') - R⁻(x', x)`,
/// which is unbiased at any step size. Requires `ε > 0`.
pub fn step_discrete_weights<P, M>(
    ens: &mut WalkerEnsemble,
    potential: &P,
    drift: &M,
    eps: &DiffusionSchedule,
    dt: f64,
) -> Result<()>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    let (t, t1) = check_step(ens, potential, drift, dt)?;
    let e = diffusion_at(eps, t)?;
    if e == 0.0 {
        return Err(NetsError::ZeroDiffusion(t));
    }
    let (n, d) = (ens.len(), ens.dim());
    let (mut pos, logw, rngs) = ens.parts_mut();
    let x0 = flat(&pos).to_vec();
    let mut g0 = vec![0.0; n * d];
    let mut dtu = vec![0.0; n];
    let mut b0 = vec![0.0; n * d];
    let mut u0 = vec![0.0; n];
    potential_terms(potential, t, &x0, d, &mut g0, &mut dtu);
    energies(potential, t, &x0, d, &mut u0);
    eval_drift(drift, t, &x0, d, &mut b0);

    let x = pos.as_slice_mut().expect("standard layout");
    let mut moved = vec![false; n];
    x.par_chunks_mut(d)
        .zip(logw.par_iter())
        .zip(rngs.par_iter_mut())
        .zip(moved.par_iter_mut())
        .enumerate()
        .for_each_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(xi, new), (i, (((xr, a), rng), ok))| {
                let g = &g0[i * d..(i + 1) * d];
                let b = &b0[i * d..(i + 1) * d];
                if *a == f64::NEG_INFINITY || !all_finite(g) || !all_finite(b) || !u0[i].is_finite() {
                    return;
                }
                *ok = overdamped_move(xr, g, b, e, dt, rng, xi, new);
            },
        );

    // Backward-kernel terms at the new points.
    let mut u1 = vec![0.0; n];
    let mut g1 = vec![0.0; n * d];
    let mut b1 = vec![0.0; n * d];
    energies(potential, t1, x, d, &mut u1);
    gradients(potential, t, x, d, &mut g1);
    eval_drift(drift, t, x, d, &mut b1);

    let scale = 1.0 / (4.0 * e * dt);
    let reasons: Vec<Option<String>> = x
        .par_chunks_mut(d)
        .zip(logw.par_iter_mut())
        .enumerate()
        .map(|(i, (xr, a))| {
            if *a == f64::NEG_INFINITY {
                return None;
            }
            let r = i * d..(i + 1) * d;
            if !moved[i] {
                xr.copy_from_slice(&x0[r]);
                return Some(format!("non-finite drift, gradient or position at t = {t}"));
            }
            let (xa, ga, ba) = (&x0[r.clone()], &g0[r.clone()], &b0[r.clone()]);
            let (gb, bb) = (&g1[r.clone()], &b1[r]);
            let mut rp = 0.0;
            let mut rm = 0.0;
            for k in 0..d {
                let fwd = xr[k] - xa[k] + dt * (e * ga[k] - ba[k]);
                let bwd = xa[k] - xr[k] + dt * (e * gb[k] + bb[k]);
                rp += fwd * fwd;
                rm += bwd * bwd;
            }
            let inc = u0[i] - u1[i] + scale * (rp - rm);
            if !inc.is_finite() {
                xr.copy_from_slice(xa);
                return Some(format!("non-finite discrete weight increment at t = {t}"));
            }
            *a += inc;
            None
        })
        .collect();
    ens.set_time(t1);
    record_quarantines(ens, t, reasons);
    Ok(())
}

/// One step of the inertial dynamics
/// `dX = (b̂ + R) dt`, `dR = -μ∇U dt - (μ/ε) R dt + μ√(2/ε) dW`,
/// with the same weight integrand as [`step_overdamped`]. With `μ = 0` no noise is
/// drawn and the positions follow `dX = b̂ dt`.
pub fn step_inertial<P, M>(
    ens: &mut WalkerEnsemble,
    state: &mut InertialState,
    potential: &P,
    drift: &M,
    eps: &DiffusionSchedule,
    dt: f64,
    mode: DivergenceMode,
) -> Result<()>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    let (t, t1) = check_step(ens, potential, drift, dt)?;
    let e = diffusion_at(eps, t)?;
    if e == 0.0 {
        return Err(NetsError::ZeroDiffusion(t));
    }
    let (n, d) = (ens.len(), ens.dim());
    if state.momenta.dim() != (n, d) {
        return Err(NetsError::DimensionMismatch { expected: n * d, got: state.momenta.len() });
    }
    let mu = state.mobility;
    let (mut pos, logw, rngs) = ens.parts_mut();
    let left = LeftTerms::compute(potential, drift, t, flat(&pos), d, mode, rngs);
    let x = pos.as_slice_mut().expect("standard layout");
    let mom = state.momenta.as_slice_mut().expect("standard layout");
    let noise = mu * (2.0 * dt / e).sqrt();
    let friction = mu / e * dt;
    let reasons: Vec<Option<String>> = x
        .par_chunks_mut(d)
        .zip(mom.par_chunks_mut(d))
        .zip(logw.par_iter_mut())
        .zip(rngs.par_iter_mut())
        .enumerate()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(nx, nr), (i, (((xr, rr), a), rng))| {
                if *a == f64::NEG_INFINITY {
                    return None;
                }
                let Some(inc) = left.weight_increment(i, d, dt) else {
                    return Some(format!("non-finite drift, divergence or gradient at t = {t}"));
                };
                let g = &left.grad[i * d..(i + 1) * d];
                let b = &left.drift[i * d..(i + 1) * d];
                for k in 0..d {
                    nx[k] = xr[k] + (b[k] + rr[k]) * dt;
                    nr[k] = if mu > 0.0 {
                        rr[k] - mu * g[k] * dt - friction * rr[k] + noise * normal(rng)
                    } else {
                        rr[k]
                    };
                }
                if !(all_finite(nx) && all_finite(nr)) {
                    return Some(format!("non-finite position or momentum after step at t = {t}"));
                }
                xr.copy_from_slice(nx);
                rr.copy_from_slice(nr);
                *a += inc;
                None
            },
        )
        .collect();
    ens.set_time(t1);
    record_quarantines(ens, t, reasons);
    Ok(())
}

/// Overdamped move for a gradient-field drift `b̂ = ∇φ̂`, with the Laplacian-free weight
///
/// `A ← A + ε⁻¹(φ̂_{t+dt}(x') - φ̂_t(x)) - [∂_tU dt + ε⁻¹∂_tφ̂ dt + ε⁻¹|∇φ̂|² dt + √(2/ε) ∇φ̂·√dt ξ]`
///
/// using the same `ξ` as the position update. `ε` is held at its left-endpoint value
/// over the step. Requires `ε > 0`.
pub fn step_phi_form<P, M>(
    ens: &mut WalkerEnsemble,
    potential: &P,
    phi: &M,
    eps: &DiffusionSchedule,
    dt: f64,
) -> Result<()>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    let (t, t1) = check_step(ens, potential, phi, dt)?;
    let e = diffusion_at(eps, t)?;
    if e == 0.0 {
        return Err(NetsError::ZeroDiffusion(t));
    }
    if !phi.has_scalar_potential() {
        return Err(NetsError::Unsupported("φ-form weights need a scalar-potential drift".into()));
    }
    let (n, d) = (ens.len(), ens.dim());
    let (mut pos, logw, rngs) = ens.parts_mut();
    let x0 = flat(&pos).to_vec();
    let mut g = vec![0.0; n * d];
    let mut dtu = vec![0.0; n];
    let mut b = vec![0.0; n * d];
    let mut p0 = vec![0.0; n];
    let mut dtp = vec![0.0; n];
    potential_terms(potential, t, &x0, d, &mut g, &mut dtu);
    eval_drift(phi, t, &x0, d, &mut b);
    let x0v = ArrayView2::from_shape((n, d), &x0[..]).expect("shape");
    phi.scalar_potential(t, x0v, &mut p0)?;
    phi.dt_scalar_potential(t, x0v, &mut dtp)?;

    // Noise-driven part of the weight, kept per walker until φ̂ at the new point is known.
    let x = pos.as_slice_mut().expect("standard layout");
    let sqdt = dt.sqrt();
    let partial: Vec<Option<f64>> = x
        .par_chunks_mut(d)
        .zip(logw.par_iter())
        .zip(rngs.par_iter_mut())
        .enumerate()
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(xi, new), (i, ((xr, a), rng))| {
                let r = i * d..(i + 1) * d;
                let (gi, bi) = (&g[r.clone()], &b[r]);
                if *a == f64::NEG_INFINITY
                    || !(all_finite(gi) && all_finite(bi) && dtu[i].is_finite())
                    || !(p0[i].is_finite() && dtp[i].is_finite())
                {
                    return None;
                }
                if !overdamped_move(xr, gi, bi, e, dt, rng, xi, new) {
                    return None;
                }
                let bb = dot(bi, bi);
                let bxi = dot(bi, xi);
                Some(dtu[i] * dt + dtp[i] * dt / e + bb * dt / e + (2.0 / e).sqrt() * bxi * sqdt)
            },
        )
        .collect();

    let xv = ArrayView2::from_shape((n, d), &x[..]).expect("shape");
    let mut p1 = vec![0.0; n];
    phi.scalar_potential(t1, xv, &mut p1)?;
    let reasons: Vec<Option<String>> = x
        .par_chunks_mut(d)
        .zip(logw.par_iter_mut())
        .enumerate()
        .map(|(i, (xr, a))| {
            if *a == f64::NEG_INFINITY {
                return None;
            }
            let xa = &x0[i * d..(i + 1) * d];
            let inc = partial[i].map(|rest| (p1[i] - p0[i]) / e - rest);
            match inc {
                Some(v) if v.is_finite() => {
                    *a += v;
                    None
                }
                _ => {
                    xr.copy_from_slice(xa);
                    Some(format!("non-finite φ-form weight increment at t = {t}"))
                }
            }
        })
        .collect();
    ens.set_time(t1);
    record_quarantines(ens, t, reasons);
    Ok(())
}

#[cfg(test)]
mod tests;
