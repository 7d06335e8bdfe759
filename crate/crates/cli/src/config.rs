//! Experiment configuration: a TOML tree with strict schema checks and dotted-path overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nets::drift::{DivergenceMode, NetConfig};
use nets::lattice::{HmcConfig, LatticeSpec};
use nets::sde::{DiffusionSchedule, Dynamics, GridMode, RolloutConfig, WeightScheme};
use nets::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

/// Annealing path `U_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialConfig {
    /// Centered Gaussian anneal `N(0, σ₀²) → N(0, σ₁²)` with linearly interpolated precision.
    GaussianAnneal {
        #[serde(default = "one_usize")]
        dim: usize,
        sigma0: f64,
        sigma1: f64,
    },
    /// A time-independent centered Gaussian; every `ρ_t` is the same.
    StaticGaussian {
        #[serde(default = "one_usize")]
        dim: usize,
        #[serde(default = "one_f64")]
        sigma: f64,
    },
    /// `N(t ḃ, A_t⁻¹)` with `A_t = a(t) I`.
    MovingGaussian { dim: usize, a0: f64, a1: f64, mean_rate: Vec<f64> },
    /// Modes on a circle, reached by moving the means out of the origin.
    Gmm {
        #[serde(default = "eight")]
        modes: usize,
        #[serde(default = "ten")]
        radius: f64,
        #[serde(default = "one_f64")]
        sigma: f64,
    },
    /// The 40-mode 2-d mixture.
    Gmm40,
    Funnel {
        #[serde(default = "ten_usize")]
        dim: usize,
        #[serde(default = "three")]
        sigma: f64,
    },
    /// Ten Student-t components with random means.
    StudentT {
        dim: usize,
        #[serde(default)]
        means_seed: u64,
    },
    Phi4(LatticeSpec),
}

fn one_usize() -> usize {
    1
}
fn eight() -> usize {
    8
}
fn ten() -> f64 {
    10.0
}
fn ten_usize() -> usize {
    10
}
fn one_f64() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftConfig {
    /// No transport: plain annealed importance sampling.
    #[default]
    Zero,
    /// Closed-form transport, where the potential has one.
    Exact,
    /// A trainable network, loaded from a checkpoint at sample time.
    Net { net: NetConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: WeightScheme,
    pub steps: usize,
    pub eps: DiffusionSchedule,
    pub dynamics: Dynamics,
    pub divergence: DivergenceMode,
    pub resample_threshold: Option<f64>,
    pub grid: GridMode,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Continuous,
            steps: 100,
            eps: DiffusionSchedule::constant(0.0),
            dynamics: Dynamics::Overdamped,
            divergence: DivergenceMode::Exact,
            resample_threshold: None,
            grid: GridMode::Fixed,
        }
    }
}

impl IntegratorConfig {
    pub fn rollout_config(&self, resample_seed: u64) -> RolloutConfig {
        RolloutConfig {
            eps: self.eps.clone(),
            scheme: self.scheme,
            dynamics: self.dynamics,
            divergence: self.divergence,
            resample_threshold: self.resample_threshold,
            record_slices: false,
            resample_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    W2,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Exact draws from the target.
    Exact,
    /// An HMC chain on the target.
    Hmc,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub walkers: usize,
    /// ESS and log Z are always reported; these are extra.
    pub metrics: Vec<Metric>,
    pub reference: ReferenceSource,
    pub reference_samples: usize,
    pub mmd_bandwidth: Option<f64>,
    pub hmc: HmcConfig,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            walkers: 2000,
            metrics: Vec::new(),
            reference: ReferenceSource::Exact,
            reference_samples: 1000,
            mmd_bandwidth: None,
            hmc: HmcConfig::default(),
            histogram_bins: 40,
        }
    }
}

/// Rows of a benchmark table beyond the trained model at the configured integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Diffusion of the zero-drift baseline.
    pub ais_eps: f64,
    /// Diffusions at which the trained model is sampled.
    pub eps: Vec<f64>,
    /// Step multiplier for runs with `ε > 0`.
    pub fine_factor: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            ais_eps: 1.0,
            eps: vec![0.0, 4.0],
            fine_factor: 4,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `KEY=VALUE` overrides and validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, overrides).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.integrator.eps.validate()?;
        if self.integrator.steps == 0 {
            bail!("integrator.steps must be positive");
        }
        if let Dynamics::Inertial { mobility } = self.integrator.dynamics {
            if !(mobility >= 0.0 && mobility.is_finite()) {
                bail!("integrator.dynamics.mobility must be finite and >= 0");
            }
        }
        if let Some(r) = self.integrator.resample_threshold {
            if !(0.0..=1.0).contains(&r) {
                bail!("integrator.resample_threshold must be in [0, 1]");
            }
        }
        if self.eval.walkers == 0 {
            bail!("eval.walkers must be positive");
        }
        if self.eval.reference_samples < 2 && self.eval.reference != ReferenceSource::None {
            bail!("eval.reference_samples must be at least 2");
        }
        self.eval.hmc.validate()?;
        if self.benchmark.fine_factor == 0 || self.benchmark.eps.iter().any(|e| !(*e >= 0.0)) {
            bail!("benchmark needs fine_factor >= 1 and eps >= 0");
        }
        if let PotentialConfig::Phi4(spec) = &self.potential {
            spec.validate()?;
        }
        Ok(())
    }

    /// Canonical TOML text of the fully resolved config.
    pub fn resolved(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    pub fn hash(&self) -> Result<u64> {
        Ok(nets::drift::config_hash(&self.resolved()?))
    }
}

/// Sets a dotted path in the tree. The value is parsed as TOML and falls back to a bare string.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not KEY=VALUE");
    };
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed table has the key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let next = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match next {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "[potential]\nkind = \"gaussian-anneal\"\nsigma0 = 1.0\nsigma1 = 2.0\n";

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MIN, &[]).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.drift, DriftConfig::Zero);
        assert_eq!(cfg.integrator.steps, 100);
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let err = ExperimentConfig::parse(&format!("{MIN}bogus = 1\n"), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"), "{err:#}");
        let err = ExperimentConfig::parse("seed = 1\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("potential"), "{err:#}");
        let err = ExperimentConfig::parse("[potential]\nkind = \"gaussian-anneal\"\nsigma0 = 1.0\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("sigma1"), "{err:#}");
    }

    #[test]
    fn overrides_set_nested_values() {
        let cfg = ExperimentConfig::parse(
            MIN,
            &[
                "integrator.steps=7".into(),
                "train.optimizer.learning_rate = 0.01".into(),
                "integrator.eps = { kind = \"constant\", eps = 2.0 }".into(),
                "train.objective=action-matching".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.integrator.steps, 7);
        assert_eq!(cfg.train.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.integrator.eps, DiffusionSchedule::constant(2.0));
        assert!(ExperimentConfig::parse(MIN, &["integrator.steps".into()]).is_err());
        assert!(ExperimentConfig::parse(MIN, &["integrator.steps=-1".into()]).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let cfg = ExperimentConfig::parse(
            &format!("{MIN}[drift]\nkind = \"net\"\n[drift.net]\nkind = \"vector\"\nhidden = [8]\n"),
            &["eval.metrics=[\"w2\", \"mmd\"]".into()],
        )
        .unwrap();
        let text = cfg.resolved().unwrap();
        assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap(), ExperimentConfig::parse(&text, &[]).unwrap().hash().unwrap());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse(MIN, &["train.optimizer.learning_rate=-1.0".into()]).is_err());
        let phi = "[potential]\nkind = \"phi4\"\nsize = 4\nm2_1 = -1.0\nlambda_1 = -0.5\n";
        assert!(ExperimentConfig::parse(phi, &[]).is_err());
    }
}
