//! Non-equilibrium transport sampling.
//!
//! Walkers start from a tractable base density and are pushed through an annealed family of
//! potentials `U_t` by Langevin dynamics augmented with an extra drift. Each walker carries a
//! log-weight `A` so that self-normalized averages over `e^A` are unbiased for the target at every
//! time, and `E[e^A]` estimates the partition-function ratio `Z_t / Z_0`. A good drift makes the
//! weights nearly deterministic; the drift is learned with objectives that never differentiate
//! through the simulated trajectories.
//!
//! Module map:
//!
//! - [`potentials`]: the time-dependent potential family and benchmark targets.
//! - [`ensemble`]: walker population, ESS, systematic resampling, snapshot dumps.
//! - [`sde`]: time grids, diffusion schedules and the weight-carrying integrators.
//! - [`drift`]: analytic and neural drifts, divergence estimation, checkpoints.
//! - [`train`]: PINN and action-matching objectives and the training loop.
//! - [`metrics`]: Wasserstein-2, MMD, KL-bound surrogate and run reports.
//! - [`lattice`]: scalar field theory on a periodic lattice, free-field sampler and HMC.

pub mod drift;
pub mod ensemble;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod potentials;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod train;

pub use error::{NetsError, Result};
