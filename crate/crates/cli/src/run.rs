//! Train, sample and benchmark pipelines. Each run owns one output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Serialize;

use nets::drift::{Checkpoint, DriftModel, TrainedNet, ZeroDrift};
use nets::ensemble::WalkerEnsemble;
use nets::lattice::magnetization;
use nets::metrics::{mmd_rbf, mmd_rbf_with_bandwidth, w2_distance, write_table, MetricReport, EXACT_W2_MAX};
use nets::potentials::TimePotential;
use nets::rng::{derive_seed, stream};
use nets::sde::{rollout, DiffusionSchedule, GridMode, TimeGrid};
use nets::train::{TrainRecord, Trainer};

use crate::config::{DriftConfig, ExperimentConfig, IntegratorConfig, Metric, PotentialConfig, ReferenceSource};
use crate::targets::{build_potential, exact_drift, reference_samples};

const INIT_TAG: u64 = 1;
const TRAIN_TAG: u64 = 2;
const EVAL_TAG: u64 = 3;
const REFERENCE_TAG: u64 = 4;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAINER_STATE: &str = "trainer_state.json";
pub const METRICS: &str = "metrics.json";
pub const ESS_CURVE: &str = "ess.csv";
pub const ENSEMBLE: &str = "ensemble.csv";
pub const TABLE: &str = "table.csv";

/// Creates `dir`, refusing to reuse one that already holds files.
fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} is not empty", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.resolved()?)?;
    Ok(())
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn json_line<T: Serialize, W: Write>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}

/// Terminal ensemble plus its metric report.
pub struct Evaluation {
    pub report: MetricReport,
    pub ensemble: WalkerEnsemble,
}

/// Rolls `drift` over `[0, 1]` and scores the terminal ensemble.
pub fn evaluate(
    potential: &dyn TimePotential,
    drift: &dyn DriftModel,
    integrator: &IntegratorConfig,
    cfg: &ExperimentConfig,
    reference: Option<&Array2<f64>>,
    seed: u64,
) -> Result<Evaluation> {
    if drift.dim() != potential.dim() {
        bail!("drift has dimension {} but the potential has {}", drift.dim(), potential.dim());
    }
    let mut ens = WalkerEnsemble::sample_initial(potential, cfg.eval.walkers, derive_seed(seed, EVAL_TAG, 0))?;
    let grid = match integrator.grid {
        GridMode::Fixed => TimeGrid::uniform(integrator.steps, 1.0)?,
        GridMode::UniformRandom => {
            TimeGrid::randomized(integrator.steps, 1.0, &mut stream(derive_seed(seed, EVAL_TAG, 1), 0))?
        }
    };
    let out = rollout(&mut ens, potential, drift, &grid, &integrator.rollout_config(derive_seed(seed, EVAL_TAG, 2)))?;
    let mut report = MetricReport::from_weights(out.ess, ens.log_weights())?;
    if let Some(reference) = reference {
        let mut resampled = ens.clone();
        resampled.systematic_resample_seeded(derive_seed(seed, EVAL_TAG, 3), 0)?;
        let n = resampled.len().min(reference.nrows()).min(EXACT_W2_MAX);
        let a = resampled.positions().slice(ndarray::s![..n, ..]).to_owned();
        let b = reference.slice(ndarray::s![..n, ..]);
        if cfg.eval.metrics.contains(&Metric::W2) {
            report.w2 = Some(w2_distance(a.view(), b)?);
        }
        if cfg.eval.metrics.contains(&Metric::Mmd) {
            report.mmd = Some(match cfg.eval.mmd_bandwidth {
                Some(h) => mmd_rbf_with_bandwidth(a.view(), b, h)?,
                None => mmd_rbf(a.view(), b)?,
            });
        }
    }
    Ok(Evaluation { report, ensemble: ens })
}

fn needs_reference(cfg: &ExperimentConfig) -> bool {
    !cfg.eval.metrics.is_empty() && cfg.eval.reference != ReferenceSource::None
}

fn reference_for(potential: &dyn TimePotential, cfg: &ExperimentConfig) -> Result<Option<Array2<f64>>> {
    if !needs_reference(cfg) {
        return Ok(None);
    }
    reference_samples(potential, &cfg.eval, derive_seed(cfg.seed, REFERENCE_TAG, 0))
}

fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    let mut w = create(dir.join(METRICS))?;
    eval.report.write_json(&mut w)?;
    w.flush()?;
    let mut w = create(dir.join(ESS_CURVE))?;
    writeln!(w, "t,ess")?;
    for (t, e) in &eval.report.ess_trajectory {
        writeln!(w, "{t},{e}")?;
    }
    w.flush()?;
    let mut w = create(dir.join(ENSEMBLE))?;
    eval.ensemble.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub checkpoint: Checkpoint,
    pub evaluation: Evaluation,
}

fn trained_net(cfg: &ExperimentConfig, potential: &dyn TimePotential) -> Result<TrainedNet> {
    let DriftConfig::Net { net } = &cfg.drift else {
        bail!("training needs drift.kind = \"net\"");
    };
    Ok(TrainedNet::new(potential.dim(), net, &mut stream(derive_seed(cfg.seed, INIT_TAG, 0), 0))?)
}

/// Trains the configured network and evaluates it at the integrator settings.
///
/// Writes the resolved config, a JSON-lines training log, wall-clock timings in a separate
/// file (so the log itself is reproducible), the checkpoint, the trainer state and metrics.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    prepare_out(out, cfg)?;
    let potential = build_potential(&cfg.potential)?;
    let mut net = trained_net(cfg, potential.as_ref())?;
    let mut log = create(out.join(TRAIN_LOG))?;
    let mut timing = create(out.join(TIMING_LOG))?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.train.iterations);
    let state = {
        let mut trainer = Trainer::new(cfg.train.clone(), potential.as_ref(), &mut net, derive_seed(cfg.seed, TRAIN_TAG, 0))?;
        while !trainer.is_done() {
            let rec = match trainer.step() {
                Ok(r) => r,
                Err(e) => {
                    log.flush()?;
                    return Err(e).context(format!("training aborted; partial log in {}", out.join(TRAIN_LOG).display()));
                }
            };
            json_line(&mut log, &rec)?;
            json_line(&mut timing, &serde_json::json!({ "iteration": rec.iteration, "seconds": start.elapsed().as_secs_f64() }))?;
            records.push(rec);
        }
        trainer.state().clone()
    };
    log.flush()?;
    timing.flush()?;
    fs::write(out.join(TRAINER_STATE), serde_json::to_string(&state)?)?;
    let checkpoint = Checkpoint { net, config_hash: cfg.hash()? };
    checkpoint.save(&out.join(CHECKPOINT))?;

    let reference = reference_for(potential.as_ref(), cfg)?;
    let mut evaluation = evaluate(potential.as_ref(), &checkpoint.net, &cfg.integrator, cfg, reference.as_ref(), cfg.seed)?;
    if let Some(last) = records.last() {
        evaluation.report.kl_bound = Some(last.kl_bound);
    }
    write_evaluation(out, &evaluation)?;
    Ok(TrainOutcome { records, checkpoint, evaluation })
}

/// Sample-time overrides of the integrator.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOverrides {
    pub eps: Option<f64>,
    pub steps: Option<usize>,
}

impl SampleOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(e) = self.eps {
            cfg.integrator.eps = DiffusionSchedule::constant(e);
        }
        if let Some(k) = self.steps {
            cfg.integrator.steps = k;
        }
    }
}

/// Samples with the configured drift, or with the network in `checkpoint`.
pub fn run_sample(cfg: &ExperimentConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let potential = build_potential(&cfg.potential)?;
    let drift: Box<dyn DriftModel> = match (checkpoint, &cfg.drift) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.net.dim() != potential.dim() {
                bail!("checkpoint has dimension {} but the potential has {}", ck.net.dim(), potential.dim());
            }
            Box::new(ck.net)
        }
        (None, DriftConfig::Zero) => Box::new(ZeroDrift::new(potential.dim())),
        (None, DriftConfig::Exact) => exact_drift(&cfg.potential)?,
        (None, DriftConfig::Net { .. }) => bail!("drift.kind = \"net\" needs --checkpoint"),
    };
    let reference = reference_for(potential.as_ref(), cfg)?;
    let evaluation = evaluate(potential.as_ref(), drift.as_ref(), &cfg.integrator, cfg, reference.as_ref(), cfg.seed)?;
    write_evaluation(out, &evaluation)?;
    Ok(evaluation)
}

const SUITES: [(&str, &str); 5] = [
    ("gmm", include_str!("../../../configs/gmm.toml")),
    ("funnel", include_str!("../../../configs/funnel.toml")),
    ("mos", include_str!("../../../configs/mos.toml")),
    ("phi4-free", include_str!("../../../configs/phi4-free.toml")),
    ("phi4-critical", include_str!("../../../configs/phi4-critical.toml")),
];

/// Built-in config text of a benchmark suite.
pub fn suite_config(name: &str) -> Result<&'static str> {
    SUITES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .with_context(|| {
            let names: Vec<&str> = SUITES.iter().map(|(n, _)| *n).collect();
            format!("unknown suite `{name}`; expected one of {}", names.join(", "))
        })
}

fn magnetization_histogram(path: PathBuf, fields: &Array2<f64>, weights: Option<&[f64]>, bins: usize, range: f64) -> Result<()> {
    let m: Vec<f64> = fields.rows().into_iter().map(|r| magnetization(r.as_slice().expect("contiguous row"))).collect();
    let hist = nets::lattice::histogram(&m, weights, -range, range, bins)?;
    let mut w = create(path)?;
    writeln!(w, "magnetization,density")?;
    for (x, d) in hist {
        writeln!(w, "{x},{d}")?;
    }
    w.flush()?;
    Ok(())
}

fn normalized_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log_w.iter().map(|a| (a - max).exp()).collect()
}

/// Runs the zero-drift baseline and the trained model at each benchmark diffusion and writes a
/// CSV table. Lattice suites also write magnetization histograms against an HMC reference.
pub fn run_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, MetricReport)>> {
    prepare_out(out, cfg)?;
    let potential = build_potential(&cfg.potential)?;
    let reference = reference_for(potential.as_ref(), cfg)?;
    let k = cfg.integrator.steps;
    let fine = k * cfg.benchmark.fine_factor;
    let mut rows = Vec::new();
    let mut ensembles = Vec::new();

    let mut ais = cfg.integrator.clone();
    ais.eps = DiffusionSchedule::constant(cfg.benchmark.ais_eps);
    ais.steps = if cfg.benchmark.ais_eps > 0.0 { fine } else { k };
    let zero = ZeroDrift::new(potential.dim());
    let e = evaluate(potential.as_ref(), &zero, &ais, cfg, reference.as_ref(), cfg.seed)?;
    rows.push(("ais".to_string(), e.report));
    ensembles.push(e.ensemble);

    let (drift, label): (Box<dyn DriftModel>, String) = match &cfg.drift {
        DriftConfig::Net { .. } => {
            let outcome = run_train(cfg, &out.join("train"))?;
            (Box::new(outcome.checkpoint.net), format!("nets-{}", objective_label(cfg)))
        }
        DriftConfig::Exact => (exact_drift(&cfg.potential)?, "exact".into()),
        DriftConfig::Zero => bail!("benchmark needs a net or exact drift"),
    };
    for &eps in &cfg.benchmark.eps {
        let mut integ = cfg.integrator.clone();
        integ.eps = DiffusionSchedule::constant(eps);
        integ.steps = if eps > 0.0 { fine } else { k };
        let e = evaluate(potential.as_ref(), drift.as_ref(), &integ, cfg, reference.as_ref(), cfg.seed)?;
        rows.push((format!("{label}-eps{eps}"), e.report));
        ensembles.push(e.ensemble);
    }

    let mut w = create(out.join(TABLE))?;
    write_table(&rows, &mut w)?;
    w.flush()?;
    let mut w = create(out.join("reports.jsonl"))?;
    for (name, r) in &rows {
        json_line(&mut w, &serde_json::json!({ "run": name, "report": r }))?;
    }
    w.flush()?;

    if let PotentialConfig::Phi4(spec) = &cfg.potential {
        let bins = cfg.eval.histogram_bins;
        let range = 2.0 * spec.volume() as f64;
        let hmc = match (&reference, cfg.eval.reference) {
            (Some(r), ReferenceSource::Hmc) => r.clone(),
            _ => {
                let mut eval = cfg.eval.clone();
                eval.reference = ReferenceSource::Hmc;
                reference_samples(potential.as_ref(), &eval, derive_seed(cfg.seed, REFERENCE_TAG, 1))?
                    .expect("hmc reference requested")
            }
        };
        magnetization_histogram(out.join("magnetization_hmc.csv"), &hmc, None, bins, range)?;
        for ((name, _), ens) in rows.iter().zip(&ensembles) {
            let w = normalized_weights(ens.log_weights());
            let fields = ens.positions().to_owned();
            magnetization_histogram(out.join(format!("magnetization_{name}.csv")), &fields, Some(&w), bins, range)?;
        }
    }
    Ok(rows)
}

fn objective_label(cfg: &ExperimentConfig) -> &'static str {
    match cfg.train.objective {
        nets::train::Objective::Pinn => "pinn",
        nets::train::Objective::ActionMatching => "am",
    }
}
