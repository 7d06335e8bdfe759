//! Training loops for the PINN and action-matching objectives.
//!
//! Each iteration draws fresh walkers, rolls them out under the current drift on a
//! (by default randomized) grid over `[0, T]`, evaluates the loss on the detached
//! trajectories and takes one optimizer step. The horizon `T` grows from a small
//! value to 1 and stalls while the terminal ESS is below a floor.

mod adam;
mod loss;

pub use adam::{Adam, AdamConfig};
pub use loss::{am_loss, pinn_loss_off_policy, pinn_loss_on_policy, slice_weights, LossOutput, RateChoice};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::drift::{DivergenceMode, ModelKind, ParametricDrift};
use crate::ensemble::WalkerEnsemble;
use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{derive_seed, stream};
use crate::sde::{rollout, DiffusionSchedule, Dynamics, GridMode, RolloutConfig, TimeGrid, WeightScheme};

const GRID_TAG: u64 = 0x4752_4944;
const WALKER_TAG: u64 = 0x5741_4C4B;
const RESAMPLE_TAG: u64 = 0x5253_4D50;
const LOSS_TAG: u64 = 0x4C4F_5353;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Pinn,
    ActionMatching,
}

/// `T` ramps linearly from `start` to 1 over `ramp_fraction` of the iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSchedule {
    pub start: f64,
    pub ramp_fraction: f64,
}

impl Default for HorizonSchedule {
    fn default() -> Self {
        Self { start: 0.1, ramp_fraction: 0.5 }
    }
}

impl HorizonSchedule {
    /// Horizon after `progress` non-stalled iterations out of `iterations`.
    pub fn at(&self, progress: usize, iterations: usize) -> f64 {
        let ramp = (self.ramp_fraction * iterations as f64).ceil();
        if ramp < 1.0 {
            return 1.0;
        }
        let f = (progress as f64 / ramp).min(1.0);
        if f >= 1.0 {
            1.0
        } else {
            (self.start + (1.0 - self.start) * f).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub walkers: usize,
    /// Grid steps `K` per rollout.
    pub steps: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub horizon: HorizonSchedule,
    /// `T` stops growing while the terminal ESS is below this.
    pub ess_floor: f64,
    /// Weighted rollout samples when true, unweighted rollout positions otherwise.
    pub on_policy: bool,
    pub resample_threshold: Option<f64>,
    /// Diffusion used for the training rollouts.
    pub eps: DiffusionSchedule,
    pub divergence: DivergenceMode,
    pub rate: RateChoice,
    pub grid: GridMode,
    /// Bound on `|A - mean(A)|` before per-slice normalization.
    pub weight_clip: f64,
    /// Rescale gradients whose norm exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Pinn,
            walkers: 256,
            steps: 32,
            iterations: 1000,
            optimizer: AdamConfig::default(),
            horizon: HorizonSchedule::default(),
            ess_floor: 0.5,
            on_policy: true,
            resample_threshold: None,
            eps: DiffusionSchedule::constant(0.0),
            divergence: DivergenceMode::TRAINING,
            rate: RateChoice::Head,
            grid: GridMode::UniformRandom,
            weight_clip: 30.0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetsError::InvalidParameter(m));
        if self.walkers == 0 || self.steps == 0 {
            return bad("walkers and steps must be positive".into());
        }
        self.optimizer.validate()?;
        self.eps.validate()?;
        let h = self.horizon;
        if !(h.start > 0.0 && h.start <= 1.0 && (0.0..=1.0).contains(&h.ramp_fraction)) {
            return bad(format!("horizon start must be in (0, 1] and ramp fraction in [0, 1], got {h:?}"));
        }
        if !(0.0..=1.0).contains(&self.ess_floor) {
            return bad(format!("ess floor {} not in [0, 1]", self.ess_floor));
        }
        if !(self.weight_clip > 0.0) {
            return bad(format!("weight clip must be > 0, got {}", self.weight_clip));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return bad(format!("max grad norm must be > 0, got {g}"));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Normalized ESS at the end of the rollout.
    pub ess: f64,
    /// Estimate of `log Z_T / Z_0`.
    pub log_z: f64,
    pub horizon: f64,
    /// `√loss`, which bounds the path-space KL for the PINN objective.
    pub kl_bound: f64,
    pub clipped_weights: usize,
    pub quarantined: usize,
}

/// Everything besides the model parameters needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    /// Iterations at which the horizon was allowed to grow.
    pub progress: usize,
    pub horizon: f64,
    pub adam: Adam,
}

pub struct Trainer<'a, P: ?Sized, M> {
    cfg: TrainConfig,
    potential: &'a P,
    model: &'a mut M,
    seed: u64,
    state: TrainerState,
}

impl<'a, P, M> Trainer<'a, P, M>
where
    P: TimePotential + ?Sized,
    M: ParametricDrift,
{
    pub fn new(cfg: TrainConfig, potential: &'a P, model: &'a mut M, seed: u64) -> Result<Self> {
        let state = TrainerState {
            iteration: 0,
            progress: 0,
            horizon: cfg.horizon.at(0, cfg.iterations),
            adam: Adam::new(cfg.optimizer, model.n_params()),
        };
        Self::resume(cfg, potential, model, seed, state)
    }

    /// Continues from a saved state; `model` must hold the matching parameters.
    pub fn resume(cfg: TrainConfig, potential: &'a P, model: &'a mut M, seed: u64, state: TrainerState) -> Result<Self> {
        cfg.validate()?;
        if potential.dim() != model.dim() {
            return Err(NetsError::DimensionMismatch { expected: model.dim(), got: potential.dim() });
        }
        if cfg.objective == Objective::ActionMatching && model.kind() != ModelKind::Scalar {
            return Err(NetsError::Unsupported("action matching needs a scalar potential model".into()));
        }
        if cfg.rate == RateChoice::Exact && potential.free_energy_rate(0.0).is_none() {
            return Err(NetsError::Unsupported("potential has no closed-form ∂_tF".into()));
        }
        Ok(Self { cfg, potential, model, seed, state })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    fn diverged(&self, detail: impl std::fmt::Display) -> NetsError {
        NetsError::TrainingDiverged {
            iteration: self.state.iteration,
            horizon: self.state.horizon,
            detail: detail.to_string(),
        }
    }

    /// Rollout, loss and one optimizer step.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let it = self.state.iteration as u64;
        let cfg = &self.cfg;
        let t_max = self.state.horizon;
        let grid = match cfg.grid {
            GridMode::Fixed => TimeGrid::uniform(cfg.steps, t_max)?,
            GridMode::UniformRandom => {
                TimeGrid::randomized(cfg.steps, t_max, &mut stream(derive_seed(self.seed, GRID_TAG, it), 0))?
            }
        };
        let mut ens =
            WalkerEnsemble::sample_initial(self.potential, cfg.walkers, derive_seed(self.seed, WALKER_TAG, it))?;
        let rcfg = RolloutConfig {
            eps: cfg.eps.clone(),
            scheme: WeightScheme::Continuous,
            dynamics: Dynamics::Overdamped,
            divergence: cfg.divergence,
            resample_threshold: cfg.resample_threshold,
            record_slices: true,
            resample_seed: derive_seed(self.seed, RESAMPLE_TAG, it),
        };
        let out = rollout(&mut ens, self.potential, &*self.model, &grid, &rcfg).map_err(|e| self.diverged(e))?;
        let loss_seed = derive_seed(self.seed, LOSS_TAG, it);
        let loss = match (cfg.objective, cfg.on_policy) {
            (Objective::Pinn, true) => pinn_loss_on_policy(
                &*self.model,
                self.potential,
                &out.slices,
                t_max,
                cfg.divergence,
                cfg.rate,
                cfg.weight_clip,
                loss_seed,
            ),
            (Objective::Pinn, false) => {
                let samples: Vec<(f64, Array2<f64>)> =
                    out.slices.iter().map(|s| (s.t, s.positions.clone())).collect();
                pinn_loss_off_policy(&*self.model, self.potential, &samples, cfg.divergence, cfg.rate, loss_seed)
            }
            (Objective::ActionMatching, _) => am_loss(&*self.model, &out.slices, t_max, cfg.weight_clip),
        }
        .map_err(|e| self.diverged(e))?;
        if !loss.loss.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
            return Err(self.diverged(format!("non-finite loss {}", loss.loss)));
        }
        let mut grad = loss.grad;
        if let Some(max) = cfg.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        let mut params = self.model.params();
        self.state.adam.step(&mut params, &grad)?;
        self.model.set_params(&params)?;

        let (_, ess) = *out.ess.last().expect("rollout observes every knot");
        let (_, log_z) = *out.log_z.last().expect("rollout observes every knot");
        let record = TrainRecord {
            iteration: self.state.iteration,
            loss: loss.loss,
            ess,
            log_z,
            horizon: t_max,
            kl_bound: loss.loss.max(0.0).sqrt(),
            clipped_weights: loss.clipped,
            quarantined: ens.quarantined().len(),
        };
        if ess >= cfg.ess_floor {
            self.state.progress += 1;
        }
        self.state.horizon = self.state.horizon.max(cfg.horizon.at(self.state.progress, cfg.iterations));
        self.state.iteration += 1;
        Ok(record)
    }

    /// Runs the remaining iterations, handing every record to `observe`.
    pub fn run<F: FnMut(&TrainRecord)>(&mut self, mut observe: F) -> Result<Vec<TrainRecord>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let r = self.step()?;
            observe(&r);
            log.push(r);
        }
        Ok(log)
    }
}

/// Trains `model` in place for `cfg.iterations` iterations and returns the log.
pub fn train<P, M>(cfg: &TrainConfig, potential: &P, model: &mut M, seed: u64) -> Result<Vec<TrainRecord>>
where
    P: TimePotential + ?Sized,
    M: ParametricDrift,
{
    Trainer::new(cfg.clone(), potential, model, seed)?.run(|_| {})
}

#[cfg(test)]
mod tests;
