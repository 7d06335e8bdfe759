//! Evaluation metrics: ESS trajectory, log-partition estimate, 2-Wasserstein distance,
//! kernel MMD and the PINN-loss bound on the terminal KL divergence.

mod assignment;

use std::io::Write;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ess, log_partition_ratio_with_se};
use crate::error::{NetsError, Result};

/// Largest equal-size problem solved by exact assignment.
pub const EXACT_W2_MAX: usize = 4096;
/// Entropic regularization, relative to the mean squared distance.
pub const SINKHORN_REL_EPS: f64 = 1e-3;
/// Stop when the worst marginal violation (relative to `1/n`) drops below this.
pub const SINKHORN_TOL: f64 = 1e-6;
pub const SINKHORN_MAX_ITERS: usize = 5000;

/// A 2-Wasserstein value and whether it came from the regularized solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2 {
    pub value: f64,
    pub approximate: bool,
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, min: usize) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(NetsError::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    if a.nrows() < min || b.nrows() < min {
        return Err(NetsError::InvalidParameter(format!(
            "need at least {min} samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn cost_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Vec<f64> {
    let m = b.nrows();
    let mut c = vec![0.0; a.nrows() * m];
    c.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sq_dist(a.row(i), b.row(j));
        }
    });
    c
}

/// Empirical 2-Wasserstein distance between uniform point clouds.
///
/// Equal sizes up to [`EXACT_W2_MAX`] use an exact assignment. Otherwise a log-domain
/// Sinkhorn solver with `ε = SINKHORN_REL_EPS · mean |a_i - b_j|²` is used and the
/// result is flagged approximate.
pub fn w2_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<W2> {
    check_pair(a, b, 1)?;
    let (n, m) = (a.nrows(), b.nrows());
    let cost = cost_matrix(a, b);
    if n == m && n <= EXACT_W2_MAX {
        let assign = assignment::solve(&cost, n);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(W2 { value: (total / n as f64).max(0.0).sqrt(), approximate: false });
    }
    Ok(W2 { value: sinkhorn_cost(&cost, n, m).max(0.0).sqrt(), approximate: true })
}

fn log_sum_exp_iter<I: Iterator<Item = f64>>(it: I) -> f64 {
    let v: Vec<f64> = it.collect();
    crate::stats::log_sum_exp(&v)
}

/// Transport cost of the entropic plan between uniform marginals.
fn sinkhorn_cost(cost: &[f64], n: usize, m: usize) -> f64 {
    let mean = cost.iter().sum::<f64>() / cost.len() as f64;
    let eps = (SINKHORN_REL_EPS * mean).max(1e-300);
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..SINKHORN_MAX_ITERS {
        f.par_iter_mut().enumerate().for_each(|(i, fi)| {
            let row = &cost[i * m..(i + 1) * m];
            *fi = -eps * log_sum_exp_iter((0..m).map(|j| (g[j] - row[j]) / eps + lb));
        });
        g.par_iter_mut().enumerate().for_each(|(j, gj)| {
            *gj = -eps * log_sum_exp_iter((0..n).map(|i| (f[i] - cost[i * m + j]) / eps + la));
        });
        // After the g-update column marginals are exact; check the rows.
        let worst = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &cost[i * m..(i + 1) * m];
                let s = log_sum_exp_iter((0..m).map(|j| (f[i] + g[j] - row[j]) / eps + la + lb)).exp();
                ((s - 1.0 / n as f64) * n as f64).abs()
            })
            .reduce(|| 0.0, f64::max);
        if worst < SINKHORN_TOL {
            break;
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let c = cost[i * m + j];
                    ((f[i] + g[j] - c) / eps + la + lb).exp() * c
                })
                .sum::<f64>()
        })
        .sum()
}

/// Unbiased squared MMD with the unit-bandwidth Gaussian kernel `exp(-|x-y|²/2)`.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    mmd_rbf_with_bandwidth(a, b, 1.0)
}

/// `1/(n(n-1)) Σ_{i≠j} k(a_i,a_j) + 1/(m(m-1)) Σ_{i≠j} k(b_i,b_j) - 2/(nm) Σ_{i,j} k(a_i,b_j)`.
pub fn mmd_rbf_with_bandwidth(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, h: f64) -> Result<f64> {
    check_pair(a, b, 2)?;
    if !(h > 0.0) {
        return Err(NetsError::InvalidParameter(format!("bandwidth must be > 0, got {h}")));
    }
    let k = |x: ndarray::ArrayView1<'_, f64>, y: ndarray::ArrayView1<'_, f64>| (-sq_dist(x, y) / (2.0 * h * h)).exp();
    let within = |s: ArrayView2<'_, f64>| {
        let n = s.nrows();
        let sum: f64 = (0..n)
            .into_par_iter()
            .map(|i| (0..n).filter(|&j| j != i).map(|j| k(s.row(i), s.row(j))).sum::<f64>())
            .sum();
        sum / (n * (n - 1)) as f64
    };
    let (n, m) = (a.nrows(), b.nrows());
    let cross: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..m).map(|j| k(a.row(i), b.row(j))).sum::<f64>())
        .sum();
    Ok(within(a) + within(b) - 2.0 * cross / (n * m) as f64)
}

/// `√L`, the bound on the terminal KL divergence implied by a PINN loss value `L`.
pub fn kl_bound_estimate(pinn_loss: f64) -> Result<f64> {
    if !(pinn_loss >= 0.0) || !pinn_loss.is_finite() {
        return Err(NetsError::InvalidParameter(format!("pinn loss must be finite and >= 0, got {pinn_loss}")));
    }
    Ok(pinn_loss.sqrt())
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ess_trajectory: Vec<(f64, f64)>,
    pub terminal_ess: f64,
    pub log_z: f64,
    pub log_z_se: f64,
    pub w2: Option<W2>,
    pub mmd: Option<f64>,
    pub kl_bound: Option<f64>,
}

impl MetricReport {
    /// ESS and `log Z` (delta-method standard error) from terminal log-weights.
    pub fn from_weights(ess_trajectory: Vec<(f64, f64)>, terminal_log_weights: &[f64]) -> Result<Self> {
        let terminal_ess = ess(terminal_log_weights)?;
        let (log_z, log_z_se) = log_partition_ratio_with_se(terminal_log_weights)?;
        Ok(Self { ess_trajectory, terminal_ess, log_z, log_z_se, w2: None, mmd: None, kl_bound: None })
    }

    pub fn validate(&self) -> Result<()> {
        let ess_ok = |e: f64| e > 0.0 && e <= 1.0 + 1e-12;
        if !ess_ok(self.terminal_ess) || self.ess_trajectory.iter().any(|(_, e)| !ess_ok(*e)) {
            return Err(NetsError::InvalidParameter("ESS outside (0, 1]".into()));
        }
        // The standard error is undefined (NaN) for a single live walker.
        let finite = self.log_z.is_finite()
            && !self.log_z_se.is_infinite()
            && self.w2.map(|w| w.value).into_iter().chain(self.mmd).chain(self.kl_bound).all(f64::is_finite);
        if !finite {
            return Err(NetsError::NonFinite("metric report".into()));
        }
        Ok(())
    }

    /// Writes the report as one JSON line.
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self).map_err(|e| NetsError::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }
}

/// CSV comparison table, one row per named run.
pub fn write_table<W: Write>(rows: &[(String, MetricReport)], mut w: W) -> Result<()> {
    writeln!(w, "run,terminal_ess,log_z,log_z_se,w2,w2_approximate,mmd,kl_bound")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for (name, r) in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            name,
            r.terminal_ess,
            r.log_z,
            r.log_z_se,
            opt(r.w2.map(|x| x.value)),
            r.w2.map(|x| x.approximate.to_string()).unwrap_or_default(),
            opt(r.mmd),
            opt(r.kl_bound)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
