use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{step_discrete_weights, step_inertial, step_overdamped, step_phi_form};
use super::{DiffusionSchedule, InertialState, TimeGrid};
use crate::drift::{DivergenceMode, DriftModel};
use crate::ensemble::WalkerEnsemble;
use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;

/// Which log-weight update accompanies the position update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `(∇·b̂ - ∇U·b̂ - ∂_tU) dt`.
    #[default]
    Continuous,
    /// Forward/backward kernel ratio, unbiased at any step size.
    Discrete,
    /// Laplacian-free update for gradient-field drifts.
    PhiForm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dynamics {
    #[default]
    Overdamped,
    Inertial { mobility: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub eps: DiffusionSchedule,
    pub scheme: WeightScheme,
    pub dynamics: Dynamics,
    pub divergence: DivergenceMode,
    /// Resample when the normalized ESS drops below this value.
    pub resample_threshold: Option<f64>,
    /// Keep positions and log-weights at every knot.
    pub record_slices: bool,
    /// Seed of the coordinator stream used for resampling offsets.
    pub resample_seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            eps: DiffusionSchedule::constant(0.0),
            scheme: WeightScheme::Continuous,
            dynamics: Dynamics::Overdamped,
            divergence: DivergenceMode::Exact,
            resample_threshold: None,
            record_slices: false,
            resample_seed: 0,
        }
    }
}

/// Ensemble state at one grid knot, before any resampling at that knot.
#[derive(Clone, Debug)]
pub struct SliceRecord {
    pub t: f64,
    pub positions: Array2<f64>,
    pub log_weights: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOutput {
    /// `(t, ESS/n)` at every knot, including `t_0`.
    pub ess: Vec<(f64, f64)>,
    /// `(t, log Ẑ_t/Z_0)` at every knot.
    pub log_z: Vec<(f64, f64)>,
    pub resample_times: Vec<f64>,
    pub slices: Vec<SliceRecord>,
    /// Final momenta for inertial runs.
    pub inertial: Option<InertialState>,
}

/// Propagates `ens` over `grid`, resampling when the ESS falls below the threshold.
///
/// The ensemble must start at `t = 0`. Fails with [`NetsError::DegenerateWeights`]
/// if every walker ends up quarantined.
pub fn rollout<P, M>(
    ens: &mut WalkerEnsemble,
    potential: &P,
    drift: &M,
    grid: &TimeGrid,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput>
where
    P: TimePotential + ?Sized,
    M: DriftModel + ?Sized,
{
    cfg.eps.validate()?;
    if ens.time() != grid.knots()[0] {
        return Err(NetsError::InvalidParameter(format!(
            "ensemble at t = {} but grid starts at {}",
            ens.time(),
            grid.knots()[0]
        )));
    }
    if let Some(th) = cfg.resample_threshold {
        if !(0.0..=1.0).contains(&th) {
            return Err(NetsError::InvalidParameter(format!("resample threshold {th} not in [0, 1]")));
        }
    }
    let mut inertial = match cfg.dynamics {
        Dynamics::Overdamped => None,
        Dynamics::Inertial { mobility } => {
            if cfg.scheme != WeightScheme::Continuous {
                return Err(NetsError::Unsupported("inertial dynamics use the continuous weight scheme".into()));
            }
            Some(InertialState::sample(ens, mobility)?)
        }
    };
    let mut out = RolloutOutput::default();
    let mut events = 0u64;
    observe(ens, cfg, &mut out)?;
    for w in grid.knots().windows(2) {
        let dt = w[1] - w[0];
        match (&mut inertial, cfg.scheme) {
            (Some(state), _) => step_inertial(ens, state, potential, drift, &cfg.eps, dt, cfg.divergence)?,
            (None, WeightScheme::Continuous) => {
                step_overdamped(ens, potential, drift, &cfg.eps, dt, cfg.divergence)?
            }
            (None, WeightScheme::Discrete) => step_discrete_weights(ens, potential, drift, &cfg.eps, dt)?,
            (None, WeightScheme::PhiForm) => step_phi_form(ens, potential, drift, &cfg.eps, dt)?,
        }
        ens.set_time(w[1]);
        let ess = observe(ens, cfg, &mut out)?;
        let last = w[1] == grid.t_max();
        if let Some(th) = cfg.resample_threshold {
            if ess < th && !last {
                let ancestors = ens.systematic_resample_seeded(cfg.resample_seed, events)?;
                events += 1;
                if let Some(state) = inertial.as_mut() {
                    state.reorder(&ancestors);
                }
                out.resample_times.push(w[1]);
            }
        }
    }
    out.inertial = inertial;
    Ok(out)
}

fn observe(ens: &WalkerEnsemble, cfg: &RolloutConfig, out: &mut RolloutOutput) -> Result<f64> {
    let t = ens.time();
    let ess = ens.ess()?;
    out.ess.push((t, ess));
    out.log_z.push((t, ens.log_partition_ratio()?));
    if cfg.record_slices {
        out.slices.push(SliceRecord {
            t,
            positions: ens.positions().to_owned(),
            log_weights: ens.log_weights().to_vec(),
        });
    }
    Ok(ess)
}
