use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LatticeSpec, Phi4Potential};
use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{derive_seed, fill_normal, stream, WalkerRng};
use crate::stats::{batch_means_se, gauss_legendre};

const TI_TAG: u64 = 0x7469;

/// Leapfrog settings. The defaults keep acceptance above 0.6 on an 8×8 lattice near criticality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Each trajectory draws its step uniformly from `step_size · [1 - jitter, 1 + jitter]`,
    /// which avoids resonant trajectories on near-harmonic modes.
    pub jitter: f64,
    pub burn_in: usize,
    /// Trajectories between stored samples.
    pub thin: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            n_leapfrog: 10,
            jitter: 0.2,
            burn_in: 200,
            thin: 1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0)
            || !(0.0..1.0).contains(&self.jitter)
            || self.n_leapfrog == 0
            || self.thin == 0
        {
            return Err(NetsError::InvalidParameter(format!("bad HMC settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HmcChain {
    /// One stored state per row.
    pub fields: Array2<f64>,
    /// `U_t` of each stored state.
    pub energies: Vec<f64>,
    pub acceptance: f64,
    /// Proposals rejected because the trajectory went non-finite.
    pub non_finite: usize,
}

/// Metropolis-corrected HMC on `ρ_t ∝ e^{-U_t}` with unit mass, started from `init`.
pub fn hmc_chain<P: TimePotential + ?Sized>(
    potential: &P,
    t: f64,
    init: &[f64],
    n_samples: usize,
    cfg: &HmcConfig,
    rng: &mut WalkerRng,
) -> Result<HmcChain> {
    cfg.validate()?;
    let d = potential.dim();
    if init.len() != d {
        return Err(NetsError::DimensionMismatch {
            expected: d,
            got: init.len(),
        });
    }
    let mut x = init.to_vec();
    let mut u = potential.energy(t, &x);
    if !u.is_finite() {
        return Err(NetsError::NonFinite(format!("initial energy {u}")));
    }
    let mut g = vec![0.0; d];
    potential.grad(t, &x, &mut g);

    let (mut xn, mut gn, mut p) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let total = cfg.burn_in + n_samples * cfg.thin;
    let mut fields = Array2::zeros((n_samples, d));
    let mut energies = Vec::with_capacity(n_samples);
    let (mut accepted, mut non_finite) = (0usize, 0usize);

    for iter in 0..total {
        let h = cfg.step_size * (1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0));
        fill_normal(rng, &mut p);
        let k0 = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        xn.copy_from_slice(&x);
        gn.copy_from_slice(&g);
        for _ in 0..cfg.n_leapfrog {
            for i in 0..d {
                p[i] -= 0.5 * h * gn[i];
                xn[i] += h * p[i];
            }
            potential.grad(t, &xn, &mut gn);
            for i in 0..d {
                p[i] -= 0.5 * h * gn[i];
            }
        }
        let un = potential.energy(t, &xn);
        let k1 = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let dh = un + k1 - u - k0;
        if !dh.is_finite() || gn.iter().any(|v| !v.is_finite()) {
            non_finite += 1;
        } else if dh <= 0.0 || rng.random::<f64>() < (-dh).exp() {
            std::mem::swap(&mut x, &mut xn);
            std::mem::swap(&mut g, &mut gn);
            u = un;
            accepted += 1;
        }
        if iter >= cfg.burn_in && (iter - cfg.burn_in + 1).is_multiple_of(cfg.thin) {
            let row = (iter - cfg.burn_in) / cfg.thin;
            fields.row_mut(row).assign(&ndarray::ArrayView1::from(&x));
            energies.push(u);
        }
    }
    Ok(HmcChain {
        fields,
        energies,
        acceptance: accepted as f64 / total.max(1) as f64,
        non_finite,
    })
}

/// HMC on the lattice action at time `t`, started from a free-field draw.
pub fn hmc_oracle(spec: &LatticeSpec, t: f64, n_samples: usize, cfg: &HmcConfig, rng: &mut WalkerRng) -> Result<HmcChain> {
    let potential = Phi4Potential::new(spec.clone())?;
    let mut init = vec![0.0; spec.volume()];
    potential.sample(0.0, rng, &mut init)?;
    hmc_chain(&potential, t, &init, n_samples, cfg, rng)
}

#[derive(Debug, Clone, Serialize)]
pub struct TiEstimate {
    /// Estimate of `log(Z_1 / Z_0)`.
    pub log_z: f64,
    pub se: f64,
    /// `(t, E_t[∂_t U], standard error)` at each quadrature node.
    pub nodes: Vec<(f64, f64, f64)>,
}

/// `log(Z_1/Z_0) = -∫_0^1 E_t[∂_t U_t] dt` by Gauss-Legendre quadrature with HMC expectations.
///
/// Standard errors come from batch means over each chain and ignore the quadrature error.
pub fn thermodynamic_integration<P: TimePotential + ?Sized>(
    potential: &P,
    nodes: usize,
    n_samples: usize,
    cfg: &HmcConfig,
    batches: usize,
    seed: u64,
) -> Result<TiEstimate> {
    if nodes == 0 || batches < 2 || n_samples < batches {
        return Err(NetsError::InvalidParameter(format!(
            "thermodynamic integration needs nodes >= 1 and n_samples >= batches >= 2, got {nodes}, {n_samples}, {batches}"
        )));
    }
    let (ts, ws) = gauss_legendre(nodes);
    let mut log_z = 0.0;
    let mut var = 0.0;
    let mut out = Vec::with_capacity(nodes);
    for (j, (&t, &w)) in ts.iter().zip(&ws).enumerate() {
        let mut rng = stream(derive_seed(seed, TI_TAG, j as u64), 0);
        let mut init = vec![0.0; potential.dim()];
        if potential.sample(0.0, &mut rng, &mut init).is_err() {
            init.fill(0.0);
        }
        let chain = hmc_chain(potential, t, &init, n_samples, cfg, &mut rng)?;
        let dt: Vec<f64> = chain.fields.rows().into_iter().map(|r| {
            potential.dt_energy(t, r.as_slice().expect("contiguous row"))
        }).collect();
        let (m, se) = batch_means_se(&dt, batches);
        log_z -= w * m;
        var += w * w * se * se;
        out.push((t, m, se));
    }
    Ok(TiEstimate {
        log_z,
        se: var.sqrt(),
        nodes: out,
    })
}
