use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetsError, Result};

/// Sorted knots `0 = t_0 < t_1 < … < t_K = T ≤ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(NetsError::InvalidParameter("time grid needs at least two knots".into()));
        }
        if knots[0] != 0.0 {
            return Err(NetsError::InvalidParameter(format!("grid must start at 0, got {}", knots[0])));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NetsError::InvalidParameter("grid must be strictly increasing".into()));
        }
        let last = *knots.last().expect("len >= 2");
        if last > 1.0 {
            return Err(NetsError::InvalidParameter(format!("grid ends at {last} > 1")));
        }
        Ok(Self { knots })
    }

    /// `K` equal steps on `[0, t_max]`.
    pub fn uniform(steps: usize, t_max: f64) -> Result<Self> {
        check_horizon(steps, t_max)?;
        let mut knots: Vec<f64> = (0..=steps).map(|k| t_max * k as f64 / steps as f64).collect();
        knots[steps] = t_max;
        Self::from_knots(knots)
    }

    /// `t_0 = 0`, `t_K = t_max`, and `K - 1` sorted uniform draws in between.
    pub fn randomized<R: Rng + ?Sized>(steps: usize, t_max: f64, rng: &mut R) -> Result<Self> {
        check_horizon(steps, t_max)?;
        loop {
            let mut inner: Vec<f64> = (0..steps - 1).map(|_| rng.random::<f64>() * t_max).collect();
            inner.sort_by(f64::total_cmp);
            let mut knots = Vec::with_capacity(steps + 1);
            knots.push(0.0);
            knots.extend(inner);
            knots.push(t_max);
            if let Ok(g) = Self::from_knots(knots) {
                return Ok(g);
            }
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        *self.knots.last().expect("non-empty")
    }
}

fn check_horizon(steps: usize, t_max: f64) -> Result<()> {
    if steps == 0 {
        return Err(NetsError::InvalidParameter("need at least one step".into()));
    }
    if !(t_max > 0.0 && t_max <= 1.0) {
        return Err(NetsError::InvalidParameter(format!("horizon must be in (0, 1], got {t_max}")));
    }
    Ok(())
}

/// How the time grid is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    #[default]
    Fixed,
    UniformRandom,
}

/// Diffusion coefficient `ε_t ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DiffusionSchedule {
    Constant { eps: f64 },
    /// `values[i]` on `[knots[i], knots[i+1])`; the last value extends to `t = 1`.
    Piecewise { knots: Vec<f64>, values: Vec<f64> },
    /// Linear ramps from 0 over `width` at both ends, `eps` in between.
    Ramp { eps: f64, width: f64 },
}

impl DiffusionSchedule {
    pub fn constant(eps: f64) -> Self {
        DiffusionSchedule::Constant { eps }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NetsError::InvalidParameter(msg));
        match self {
            DiffusionSchedule::Constant { eps } => {
                if !(*eps >= 0.0 && eps.is_finite()) {
                    return bad(format!("eps must be finite and >= 0, got {eps}"));
                }
            }
            DiffusionSchedule::Piecewise { knots, values } => {
                if knots.is_empty() || knots.len() != values.len() {
                    return bad("piecewise schedule needs one value per knot".into());
                }
                if knots[0] != 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
                    return bad("piecewise knots must start at 0 and increase".into());
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("piecewise values must be finite and >= 0".into());
                }
            }
            DiffusionSchedule::Ramp { eps, width } => {
                if !(*eps >= 0.0 && eps.is_finite() && *width > 0.0 && *width <= 0.5) {
                    return bad(format!("ramp needs eps >= 0 and width in (0, 0.5], got {eps}, {width}"));
                }
            }
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            DiffusionSchedule::Constant { eps } => *eps,
            DiffusionSchedule::Piecewise { knots, values } => {
                let i = knots.partition_point(|k| *k <= t).saturating_sub(1);
                values[i]
            }
            DiffusionSchedule::Ramp { eps, width } => eps * (t.min(1.0 - t) / width).clamp(0.0, 1.0),
        }
    }
}
