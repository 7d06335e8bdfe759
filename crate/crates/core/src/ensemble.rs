//! Walker population: positions, log-weights, time and per-walker random streams.
//!
//! Weights are kept in the log domain. A walker whose state becomes non-finite is
//! quarantined: its log-weight is set to `-inf` and a [`QuarantineRecord`] is kept.
//!
//! # Snapshot formats
//!
//! Binary (`.bin`), all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `NETSENS1` |
//! | 8 | `n` as u64 |
//! | 8 | `d` as u64 |
//! | 8 | time as f64 |
//! | 8·n·d | positions, row-major f64 |
//! | 8·n | log-weights f64 |
//!
//! CSV: a `# time=<t>` comment line, then a header `log_weight,x0,...,x{d-1}` and one row per walker.

use std::io::{BufRead, Read, Write};

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::Serialize;

use crate::error::{NetsError, Result};
use crate::potentials::TimePotential;
use crate::rng::{derive_seed, walker_streams, WalkerRng};
use crate::stats::log_sum_exp;

const SNAPSHOT_MAGIC: &[u8; 8] = b"NETSENS1";

/// Why a walker was removed from the population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuarantineRecord {
    pub walker: usize,
    pub time: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct WalkerEnsemble {
    positions: Array2<f64>,
    log_weights: Vec<f64>,
    time: f64,
    rngs: Vec<WalkerRng>,
    quarantined: Vec<QuarantineRecord>,
}

impl WalkerEnsemble {
    /// Walkers at the given positions, time 0, zero log-weights.
    pub fn from_positions(positions: Array2<f64>, seed: u64) -> Result<Self> {
        let n = positions.nrows();
        if n == 0 {
            return Err(NetsError::Empty("ensemble"));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(NetsError::NonFinite("initial positions".into()));
        }
        Ok(Self {
            positions,
            log_weights: vec![0.0; n],
            time: 0.0,
            rngs: walker_streams(seed, n),
            quarantined: Vec::new(),
        })
    }

    /// `n` exact draws from `ρ_0` of `potential`, one per walker stream.
    pub fn sample_initial<P: TimePotential + ?Sized>(potential: &P, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(NetsError::Empty("ensemble"));
        }
        let d = potential.dim();
        let mut rngs = walker_streams(seed, n);
        let mut positions = Array2::zeros((n, d));
        for (mut row, rng) in positions.rows_mut().into_iter().zip(rngs.iter_mut()) {
            potential.sample(0.0, rng, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(Self {
            positions,
            log_weights: vec![0.0; n],
            time: 0.0,
            rngs,
            quarantined: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    pub fn positions(&self) -> ArrayView2<'_, f64> {
        self.positions.view()
    }

    pub fn positions_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.positions.view_mut()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    /// Mutable access to positions, log-weights and streams at once, for stepping.
    pub fn parts_mut(&mut self) -> (ArrayViewMut2<'_, f64>, &mut [f64], &mut [WalkerRng]) {
        (self.positions.view_mut(), &mut self.log_weights, &mut self.rngs)
    }

    pub fn rngs_mut(&mut self) -> &mut [WalkerRng] {
        &mut self.rngs
    }

    pub fn quarantined(&self) -> &[QuarantineRecord] {
        &self.quarantined
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.log_weights[i] > f64::NEG_INFINITY
    }

    pub fn quarantine(&mut self, walker: usize, reason: impl Into<String>) {
        self.log_weights[walker] = f64::NEG_INFINITY;
        self.quarantined.push(QuarantineRecord {
            walker,
            time: self.time,
            reason: reason.into(),
        });
    }

    pub(crate) fn push_quarantine(&mut self, record: QuarantineRecord) {
        self.log_weights[record.walker] = f64::NEG_INFINITY;
        self.quarantined.push(record);
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// `log mean e^{A}`, the estimate of `log Z_t / Z_0`.
    pub fn log_partition_ratio(&self) -> Result<f64> {
        log_mean_exp(&self.log_weights)
    }

    /// Estimate of `log Z_t / Z_0` with its delta-method standard error.
    pub fn log_partition_ratio_with_se(&self) -> Result<(f64, f64)> {
        log_partition_ratio_with_se(&self.log_weights)
    }

    /// Self-normalized estimate of `E_{ρ_t}[f]` and its delta-method standard error.
    pub fn weighted_expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<(f64, f64)> {
        let values: Vec<f64> = self
            .positions
            .rows()
            .into_iter()
            .map(|r| f(r.as_slice().expect("standard layout")))
            .collect();
        weighted_mean(&values, &self.log_weights)
    }

    /// Systematic resampling with offset drawn from `rng`.
    ///
    /// Positions follow their ancestors; streams stay with their slots. All
    /// log-weights become the pre-resampling log-mean-exp, so the `Z` estimate is
    /// unchanged. Returns the ancestor index of every slot.
    pub fn systematic_resample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<usize>> {
        let lme = log_mean_exp(&self.log_weights)?;
        let ancestors = systematic_indices(&self.log_weights, rng.random::<f64>())?;
        let old = self.positions.clone();
        for (mut row, &a) in self.positions.rows_mut().into_iter().zip(&ancestors) {
            row.assign(&old.row(a));
        }
        self.log_weights.iter_mut().for_each(|a| *a = lme);
        Ok(ancestors)
    }

    /// Resamples with an offset drawn from a stream keyed by `(seed, event)`.
    pub fn systematic_resample_seeded(&mut self, seed: u64, event: u64) -> Result<Vec<usize>> {
        let mut rng = crate::rng::stream(derive_seed(seed, 0x5245_5341, event), 0);
        self.systematic_resample(&mut rng)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&self.time.to_le_bytes())?;
        for v in self.positions.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.log_weights {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# time={}", self.time)?;
        let header: Vec<String> = std::iter::once("log_weight".to_string())
            .chain((0..self.dim()).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (row, a) in self.positions.rows().into_iter().zip(&self.log_weights) {
            let mut line = format!("{a}");
            for v in row.iter() {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Contents of an ensemble snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub positions: Array2<f64>,
    pub log_weights: Vec<f64>,
    pub time: f64,
}

impl Snapshot {
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(NetsError::Format("not an ensemble snapshot".into()));
        }
        let mut buf = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let d = u64::from_le_bytes(next(&mut r)?) as usize;
        let time = f64::from_le_bytes(next(&mut r)?);
        let mut pos = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            pos.push(f64::from_le_bytes(next(&mut r)?));
        }
        let mut log_weights = Vec::with_capacity(n);
        for _ in 0..n {
            log_weights.push(f64::from_le_bytes(next(&mut r)?));
        }
        let positions = Array2::from_shape_vec((n, d), pos)
            .map_err(|e| NetsError::Format(e.to_string()))?;
        Ok(Self { positions, log_weights, time })
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut time = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut header_seen = false;
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# time=") {
                time = Some(rest.parse::<f64>().map_err(|e| NetsError::Format(e.to_string()))?);
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|e| NetsError::Format(format!("{s}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let time = time.ok_or_else(|| NetsError::Format("missing time line".into()))?;
        let width = rows.first().map_or(1, |r| r.len());
        if width < 1 || rows.iter().any(|r| r.len() != width) {
            return Err(NetsError::Format("ragged rows".into()));
        }
        let n = rows.len();
        let log_weights = rows.iter().map(|r| r[0]).collect();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
        let positions = Array2::from_shape_vec((n, width - 1), flat)
            .map_err(|e| NetsError::Format(e.to_string()))?;
        Ok(Self { positions, log_weights, time })
    }
}

fn check_weights(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(NetsError::Empty("log-weights"));
    }
    if log_weights.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
        return Err(NetsError::NonFinite("log-weight".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NetsError::DegenerateWeights);
    }
    Ok(max)
}

/// `(Σ e^{A})² / (n Σ e^{2A})`, in `(0, 1]`.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let max = check_weights(log_weights)?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for a in log_weights {
        let w = (a - max).exp();
        s1 += w;
        s2 += w * w;
    }
    Ok((s1 * s1 / (log_weights.len() as f64 * s2)).min(1.0))
}

/// `log( (1/n) Σ e^{A_i} )`.
pub fn log_mean_exp(log_weights: &[f64]) -> Result<f64> {
    check_weights(log_weights)?;
    Ok(log_sum_exp(log_weights) - (log_weights.len() as f64).ln())
}

/// Log-mean-exp and its delta-method standard error `s_w / (√n w̄)`.
pub fn log_partition_ratio_with_se(log_weights: &[f64]) -> Result<(f64, f64)> {
    let max = check_weights(log_weights)?;
    let w: Vec<f64> = log_weights.iter().map(|a| (a - max).exp()).collect();
    let (mean, se_mean) = crate::stats::mean_and_se(&w);
    Ok((max + mean.ln(), se_mean / mean))
}

/// Self-normalized weighted mean with delta-method standard error.
pub fn weighted_mean(values: &[f64], log_weights: &[f64]) -> Result<(f64, f64)> {
    if values.len() != log_weights.len() {
        return Err(NetsError::DimensionMismatch {
            expected: log_weights.len(),
            got: values.len(),
        });
    }
    let max = check_weights(log_weights)?;
    let w: Vec<f64> = log_weights.iter().map(|a| (a - max).exp()).collect();
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(values).map(|(wi, v)| wi * v).sum::<f64>() / sw;
    let var = w
        .iter()
        .zip(values)
        .map(|(wi, v)| (wi * (v - mean)).powi(2))
        .sum::<f64>()
        / (sw * sw);
    Ok((mean, var.sqrt()))
}

/// Normalized weights `e^{A_i} / Σ e^{A_j}`.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = check_weights(log_weights)?;
    let w: Vec<f64> = log_weights.iter().map(|a| (a - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Systematic resampling ancestors for pointers `(u + k) / n`, `u ∈ [0, 1)`.
pub fn systematic_indices(log_weights: &[f64], u: f64) -> Result<Vec<usize>> {
    let w = normalized_weights(log_weights)?;
    let n = w.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = w[0];
    let mut i = 0;
    for k in 0..n {
        let p = (u + k as f64) / n as f64;
        while p >= cum && i + 1 < n {
            i += 1;
            cum += w[i];
        }
        out.push(i);
    }
    Ok(out)
}
