//! Trainable drift networks.
//!
//! Both networks read `[x, embed(t)]`. [`VectorFieldNet`] outputs `b̂ ∈ R^d` directly;
//! [`ScalarPotentialNet`] outputs `φ̂` and uses `b̂ = ∇φ̂`. Both carry a free-energy head
//! `F̂_t = g(embed(t)) - g(embed(0))`, so `F̂_0 = 0` by construction.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp, Tape, TimeEmbedding};
use super::{DivergenceMode, DriftModel};
use crate::error::{NetsError, Result};
use crate::rng::fill_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Direct vector field `b̂`.
    Vector,
    /// Scalar potential `φ̂` with `b̂ = ∇φ̂`.
    Scalar,
}

/// Architecture of a trainable drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub kind: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_freqs")]
    pub time_freqs: usize,
    #[serde(default = "default_head")]
    pub head_hidden: usize,
    /// Scale of the initial output layer; small values start close to zero drift.
    #[serde(default = "default_out_scale")]
    pub out_scale: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Silu
}
fn default_freqs() -> usize {
    3
}
fn default_head() -> usize {
    16
}
fn default_out_scale() -> f64 {
    0.1
}

impl NetConfig {
    pub fn new(kind: ModelKind, hidden: Vec<usize>) -> Self {
        Self {
            kind,
            hidden,
            activation: default_activation(),
            time_freqs: default_freqs(),
            head_hidden: default_head(),
            out_scale: default_out_scale(),
        }
    }
}

/// How `∂_t F̂` enters the PINN residual of one time slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateSource {
    /// The model's free-energy head, trained jointly.
    Head,
    /// A fixed value, e.g. an exact or weighted estimate.
    Fixed(f64),
    /// The constant minimizing the slice loss.
    SliceOptimal,
}

/// Per-slice inputs shared by the loss functions.
pub struct SliceInputs<'a> {
    pub t: f64,
    pub x: ArrayView2<'a, f64>,
    /// Non-negative sample weights for this slice (already normalized and scaled).
    pub weights: &'a [f64],
    /// `∇U_t` per row.
    pub grad_u: ArrayView2<'a, f64>,
    /// `∂_t U_t` per row.
    pub dt_u: &'a [f64],
}

/// A trainable drift: flat parameters plus loss-gradient kernels.
pub trait ParametricDrift: DriftModel {
    fn kind(&self) -> ModelKind;
    fn n_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Adds `Σ_i w_i R_i R'_i` for one slice to the return value and its parameter gradient to
    /// `grad`, where `R = ∇·b̂ - ∇U·b̂ - ∂_tU + ∂_tF̂`. With exact divergence `R' = R`; with
    /// Hutchinson probes `R` and `R'` use independent probe sets. Returns the loss and the
    /// `∂_tF̂` value used.
    fn pinn_accumulate<R: Rng + ?Sized>(
        &self,
        slice: &SliceInputs<'_>,
        mode: DivergenceMode,
        rate: RateSource,
        rng: &mut R,
        grad: &mut [f64],
    ) -> Result<(f64, f64)>;

    /// `Σ_i w_i (½|∇φ̂|² + ∂_tφ̂)` and its gradient. Scalar models only.
    fn am_interior_accumulate(&self, _slice: &SliceInputs<'_>, _grad: &mut [f64]) -> Result<f64> {
        Err(NetsError::Unsupported("action matching needs a scalar potential model".into()))
    }

    /// `sign · Σ_i w_i φ̂_t(x_i)` and its gradient. Scalar models only.
    fn potential_accumulate(
        &self,
        _t: f64,
        _x: ArrayView2<'_, f64>,
        _weights: &[f64],
        _sign: f64,
        _grad: &mut [f64],
    ) -> Result<f64> {
        Err(NetsError::Unsupported("action matching needs a scalar potential model".into()))
    }
}

/// Scalar network of time only.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FreeEnergyHead {
    pub(crate) mlp: Mlp,
    pub(crate) emb: TimeEmbedding,
}

impl FreeEnergyHead {
    fn input(&self, t: f64) -> (Array2<f64>, Array2<f64>) {
        let w = self.emb.width();
        let mut x = Array2::zeros((1, w));
        let mut dx = Array2::zeros((1, w));
        self.emb.features(t, x.as_slice_mut().expect("row"));
        self.emb.derivative(t, dx.as_slice_mut().expect("row"));
        (x, dx)
    }

    fn raw(&self, t: f64) -> f64 {
        let (x, _) = self.input(t);
        self.mlp.forward(x.view())[[0, 0]]
    }

    fn value(&self, t: f64) -> f64 {
        self.raw(t) - self.raw(0.0)
    }

    fn rate(&self, t: f64) -> f64 {
        let (x, dx) = self.input(t);
        self.mlp.forward_tape(x.view(), dx).output_tangents()[[0, 0]]
    }

    /// Adds `coef · ∂θ (∂_t F̂_t)` to `grad`.
    fn rate_backward(&self, t: f64, coef: f64, grad: &mut [f64]) {
        let (x, dx) = self.input(t);
        let tape = self.mlp.forward_tape(x.view(), dx);
        let zero = Array2::zeros((1, 1));
        let cot = Array2::from_elem((1, 1), coef);
        self.mlp.backward(&tape, &zero, &cot, grad);
    }
}

/// State shared by both network kinds.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NetCore {
    pub(crate) dim: usize,
    pub(crate) mlp: Mlp,
    pub(crate) head: FreeEnergyHead,
    pub(crate) emb: TimeEmbedding,
}

impl NetCore {
    fn new<R: Rng + ?Sized>(dim: usize, cfg: &NetConfig, out: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(NetsError::InvalidParameter("dimension must be positive".into()));
        }
        if cfg.hidden.is_empty() {
            return Err(NetsError::InvalidParameter("need at least one hidden layer".into()));
        }
        let emb = TimeEmbedding { n_freq: cfg.time_freqs };
        let mut widths = vec![dim + emb.width()];
        widths.extend(&cfg.hidden);
        widths.push(out);
        let mlp = Mlp::new(widths, cfg.activation, cfg.out_scale, rng)?;
        let head = FreeEnergyHead {
            mlp: Mlp::new(vec![emb.width(), cfg.head_hidden.max(1), 1], Activation::Tanh, 1.0, rng)?,
            emb,
        };
        Ok(Self { dim, mlp, head, emb })
    }

    fn input(&self, t: f64, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (n, d) = x.dim();
        let w = self.emb.width();
        let mut feats = vec![0.0; w];
        self.emb.features(t, &mut feats);
        let mut inp = Array2::zeros((n, d + w));
        for (mut row, xr) in inp.rows_mut().into_iter().zip(x.rows()) {
            for j in 0..d {
                row[j] = xr[j];
            }
            for j in 0..w {
                row[d + j] = feats[j];
            }
        }
        inp
    }

    /// `J` unit tangents `e_0 … e_{J-1}` on the spatial inputs, stacked.
    fn unit_tangents(&self, n: usize, dirs: usize) -> Array2<f64> {
        let w = self.mlp.input_dim();
        let mut tan = Array2::zeros((dirs * n, w));
        for j in 0..dirs {
            for i in 0..n {
                tan[[j * n + i, j]] = 1.0;
            }
        }
        tan
    }

    /// Tangent of the input along `t`.
    fn time_tangent(&self, t: f64, n: usize) -> Array2<f64> {
        let w = self.emb.width();
        let mut de = vec![0.0; w];
        self.emb.derivative(t, &mut de);
        let mut tan = Array2::zeros((n, self.mlp.input_dim()));
        for i in 0..n {
            for j in 0..w {
                tan[[i, self.dim + j]] = de[j];
            }
        }
        tan
    }

    fn n_params(&self) -> usize {
        self.mlp.n_params() + self.head.mlp.n_params()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.mlp.params().to_vec();
        p.extend_from_slice(self.head.mlp.params());
        p
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(NetsError::DimensionMismatch { expected: self.n_params(), got: params.len() });
        }
        let k = self.mlp.n_params();
        self.mlp.params_mut().copy_from_slice(&params[..k]);
        self.head.mlp.params_mut().copy_from_slice(&params[k..]);
        Ok(())
    }

    fn split_grad<'g>(&self, grad: &'g mut [f64]) -> (&'g mut [f64], &'g mut [f64]) {
        grad.split_at_mut(self.mlp.n_params())
    }
}

/// One term of a divergence estimate: `div_i += scale_i Σ readout ⊙ V`, where `V` is the
/// network output at `input` (no tangents) or its tangent output.
struct Probe {
    input: Array2<f64>,
    tangents: Option<Array2<f64>>,
    readout: Array2<f64>,
    scale: Vec<f64>,
}

impl Probe {
    fn eval(&self, mlp: &Mlp, n: usize, div: &mut [f64]) -> Tape {
        let tan = self
            .tangents
            .clone()
            .unwrap_or_else(|| Array2::zeros((0, mlp.input_dim())));
        let tape = mlp.forward_tape(self.input.view(), tan);
        let v = if self.tangents.is_some() { tape.output_tangents() } else { tape.output() };
        for (r, (vr, rr)) in v.rows().into_iter().zip(self.readout.rows()).enumerate() {
            let i = r % n;
            div[i] += self.scale[i] * vr.dot(&rr);
        }
        tape
    }

    fn backward(&self, mlp: &Mlp, tape: &Tape, n: usize, g: &[f64], grad: &mut [f64]) {
        let mut cot = self.readout.clone();
        for (r, mut row) in cot.rows_mut().into_iter().enumerate() {
            let i = r % n;
            row *= g[i] * self.scale[i];
        }
        let out = mlp.output_dim();
        if self.tangents.is_some() {
            mlp.backward(tape, &Array2::zeros((n, out)), &cot, grad);
        } else {
            mlp.backward(tape, &cot, &Array2::zeros((0, out)), grad);
        }
    }
}

fn row_norms(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Gaussian probe directions, one per row.
fn gaussian_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut eta = Array2::zeros((n, d));
    fill_normal(rng, eta.as_slice_mut().expect("standard layout"));
    eta
}

/// Shared PINN kernel. `drift_fn` returns `b̂` and a backward closure for it; `probe_sets`
/// returns one probe set (exact) or two independent sets (Hutchinson).
fn pinn_kernel(
    core: &NetCore,
    slice: &SliceInputs<'_>,
    b: &Array2<f64>,
    probe_sets: &[Vec<Probe>],
    rate: RateSource,
    grad: &mut [f64],
    drift_backward: &dyn Fn(&Array2<f64>, &mut [f64]),
) -> Result<(f64, f64)> {
    let n = slice.x.nrows();
    let mut base = vec![0.0; n];
    for i in 0..n {
        base[i] = -slice.grad_u.row(i).dot(&b.row(i)) - slice.dt_u[i];
    }
    let mut divs = Vec::with_capacity(probe_sets.len());
    let mut tapes = Vec::with_capacity(probe_sets.len());
    for set in probe_sets {
        let mut div = vec![0.0; n];
        let ts: Vec<Tape> = set.iter().map(|p| p.eval(&core.mlp, n, &mut div)).collect();
        divs.push(div);
        tapes.push(ts);
    }
    let two = divs.len() == 2;
    let r0 = |s: usize, i: usize| divs[s][i] + base[i];
    let sw: f64 = slice.weights.iter().sum();
    let c = match rate {
        RateSource::Head => core.head.rate(slice.t),
        RateSource::Fixed(v) => v,
        RateSource::SliceOptimal => {
            if sw <= 0.0 {
                0.0
            } else {
                let s: f64 = (0..n)
                    .map(|i| slice.weights[i] * if two { 0.5 * (r0(0, i) + r0(1, i)) } else { r0(0, i) })
                    .sum();
                -s / sw
            }
        }
    };
    let mut loss = 0.0;
    // Cotangents: on b̂ (per row, times -∇U), on each divergence set, and on ∂_tF̂.
    let mut g_b = vec![0.0; n];
    let mut g_div = vec![vec![0.0; n]; divs.len()];
    let mut g_rate = 0.0;
    for i in 0..n {
        let w = slice.weights[i];
        if w == 0.0 {
            continue;
        }
        if two {
            let (ra, rb) = (r0(0, i) + c, r0(1, i) + c);
            loss += w * ra * rb;
            g_b[i] = w * (ra + rb);
            g_div[0][i] = w * rb;
            g_div[1][i] = w * ra;
            g_rate += w * (ra + rb);
        } else {
            let r = r0(0, i) + c;
            loss += w * r * r;
            g_b[i] = 2.0 * w * r;
            g_div[0][i] = 2.0 * w * r;
            g_rate += 2.0 * w * r;
        }
    }
    if !loss.is_finite() {
        return Err(NetsError::NonFinite(format!("pinn loss at t = {}", slice.t)));
    }
    let (g_main, g_head) = core.split_grad(grad);
    let mut b_bar = slice.grad_u.to_owned();
    for (mut row, gb) in b_bar.rows_mut().into_iter().zip(&g_b) {
        row *= -gb;
    }
    drift_backward(&b_bar, g_main);
    for ((set, ts), g) in probe_sets.iter().zip(&tapes).zip(&g_div) {
        for (p, tape) in set.iter().zip(ts) {
            p.backward(&core.mlp, tape, n, g, g_main);
        }
    }
    if matches!(rate, RateSource::Head) {
        core.head.rate_backward(slice.t, g_rate, g_head);
    }
    Ok((loss, c))
}

/// Vector-field drift network with a free-energy head.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldNet {
    pub(crate) core: NetCore,
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self { core: NetCore::new(dim, cfg, dim, rng)? })
    }

    fn probes<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        mode: DivergenceMode,
        rng: &mut R,
    ) -> Vec<Vec<Probe>> {
        let (n, d) = x.dim();
        let inp = self.core.input(t, x);
        match mode {
            DivergenceMode::Exact => {
                let mut readout = Array2::zeros((d * n, d));
                for j in 0..d {
                    for i in 0..n {
                        readout[[j * n + i, j]] = 1.0;
                    }
                }
                vec![vec![Probe {
                    input: inp,
                    tangents: Some(self.core.unit_tangents(n, d)),
                    readout,
                    scale: vec![1.0; n],
                }]]
            }
            DivergenceMode::Hutchinson { delta, probes } => {
                let k = probes.max(1);
                let norms = row_norms(x);
                (0..2)
                    .map(|_| {
                        let mut set = Vec::with_capacity(2 * k);
                        for _ in 0..k {
                            let eta = gaussian_rows(n, d, rng);
                            let steps: Vec<f64> = norms.iter().map(|r| delta * (1.0 + r)).collect();
                            for sign in [1.0, -1.0] {
                                let mut input = inp.clone();
                                for i in 0..n {
                                    for j in 0..d {
                                        input[[i, j]] += sign * steps[i] * eta[[i, j]];
                                    }
                                }
                                set.push(Probe {
                                    input,
                                    tangents: None,
                                    readout: eta.clone(),
                                    scale: steps.iter().map(|s| sign / (2.0 * s * k as f64)).collect(),
                                });
                            }
                        }
                        set
                    })
                    .collect()
            }
        }
    }
}

impl DriftModel for VectorFieldNet {
    fn dim(&self) -> usize {
        self.core.dim
    }

    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        out.assign(&self.core.mlp.forward(self.core.input(t, x).view()));
    }

    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        let mut b = Array2::zeros(x.dim());
        self.drift_and_divergence(t, x, b.view_mut(), out)
    }

    fn drift_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        mut drift: ArrayViewMut2<'_, f64>,
        div: &mut [f64],
    ) -> bool {
        let (n, d) = x.dim();
        let tape = self
            .core
            .mlp
            .forward_tape(self.core.input(t, x).view(), self.core.unit_tangents(n, d));
        drift.assign(tape.output());
        let td = tape.output_tangents();
        for i in 0..n {
            div[i] = (0..d).map(|j| td[[j * n + i, j]]).sum();
        }
        true
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        Some(self.core.head.value(t))
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        Some(self.core.head.rate(t))
    }
}

impl ParametricDrift for VectorFieldNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Vector
    }

    fn n_params(&self) -> usize {
        self.core.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.core.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.core.set_params(params)
    }

    fn pinn_accumulate<R: Rng + ?Sized>(
        &self,
        slice: &SliceInputs<'_>,
        mode: DivergenceMode,
        rate: RateSource,
        rng: &mut R,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let inp = self.core.input(slice.t, slice.x);
        let tape = self.core.mlp.forward_tape(inp.view(), Array2::zeros((0, inp.ncols())));
        let b = tape.output().clone();
        let probes = self.probes(slice.t, slice.x, mode, rng);
        let mlp = &self.core.mlp;
        let d = self.core.dim;
        let back = |b_bar: &Array2<f64>, g: &mut [f64]| {
            mlp.backward(&tape, b_bar, &Array2::zeros((0, d)), g);
        };
        pinn_kernel(&self.core, slice, &b, &probes, rate, grad, &back)
    }
}

/// Scalar-potential drift network `b̂ = ∇φ̂` with a free-energy head.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarPotentialNet {
    pub(crate) core: NetCore,
}

/// Relative finite-difference step for the Laplacian of `φ̂` inside the PINN loss.
const LAPLACIAN_FD_STEP: f64 = 1e-4;

impl ScalarPotentialNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self { core: NetCore::new(dim, cfg, 1, rng)? })
    }

    /// `∇φ̂` and its tape (tangents `e_0 … e_{d-1}`).
    fn gradient_tape(&self, t: f64, x: ArrayView2<'_, f64>) -> (Array2<f64>, Tape) {
        let (n, d) = x.dim();
        let tape = self
            .core
            .mlp
            .forward_tape(self.core.input(t, x).view(), self.core.unit_tangents(n, d));
        let td = tape.output_tangents();
        let g = Array2::from_shape_fn((n, d), |(i, j)| td[[j * n + i, 0]]);
        (g, tape)
    }

    /// Probes estimating `Δφ̂` from differences of directional derivatives.
    fn probes<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        mode: DivergenceMode,
        rng: &mut R,
    ) -> Vec<Vec<Probe>> {
        let (n, d) = x.dim();
        let inp = self.core.input(t, x);
        let w = inp.ncols();
        let norms = row_norms(x);
        let make = |dirs: &Array2<f64>, step: f64, k: usize, set: &mut Vec<Probe>| {
            let steps: Vec<f64> = norms.iter().map(|r| step * (1.0 + r)).collect();
            let mut tan = Array2::zeros((n, w));
            for i in 0..n {
                for j in 0..d {
                    tan[[i, j]] = dirs[[i, j]];
                }
            }
            for sign in [1.0, -1.0] {
                let mut input = inp.clone();
                for i in 0..n {
                    for j in 0..d {
                        input[[i, j]] += sign * steps[i] * dirs[[i, j]];
                    }
                }
                set.push(Probe {
                    input,
                    tangents: Some(tan.clone()),
                    readout: Array2::ones((n, 1)),
                    scale: steps.iter().map(|s| sign / (2.0 * s * k as f64)).collect(),
                });
            }
        };
        match mode {
            DivergenceMode::Exact => {
                let mut set = Vec::with_capacity(2 * d);
                for j in 0..d {
                    let mut e = Array2::zeros((n, d));
                    e.column_mut(j).fill(1.0);
                    make(&e, LAPLACIAN_FD_STEP, 1, &mut set);
                }
                vec![set]
            }
            DivergenceMode::Hutchinson { delta, probes } => {
                let k = probes.max(1);
                (0..2)
                    .map(|_| {
                        let mut set = Vec::with_capacity(2 * k);
                        for _ in 0..k {
                            let eta = gaussian_rows(n, d, rng);
                            make(&eta, delta, k, &mut set);
                        }
                        set
                    })
                    .collect()
            }
        }
    }
}

impl DriftModel for ScalarPotentialNet {
    fn dim(&self) -> usize {
        self.core.dim
    }

    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        out.assign(&self.gradient_tape(t, x).0);
    }

    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        let d = self.core.dim;
        let dirs: Vec<usize> = (0..d).collect();
        let lap = self.core.mlp.second_directional_sum(self.core.input(t, x).view(), &dirs);
        for (o, v) in out.iter_mut().zip(lap.column(0)) {
            *o = *v;
        }
        true
    }

    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        let y = self.core.mlp.forward(self.core.input(t, x).view());
        for (o, v) in out.iter_mut().zip(y.column(0)) {
            *o = *v;
        }
        Ok(())
    }

    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        let n = x.nrows();
        let tape = self
            .core
            .mlp
            .forward_tape(self.core.input(t, x).view(), self.core.time_tangent(t, n));
        for (o, v) in out.iter_mut().zip(tape.output_tangents().column(0)) {
            *o = *v;
        }
        Ok(())
    }

    fn has_scalar_potential(&self) -> bool {
        true
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        Some(self.core.head.value(t))
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        Some(self.core.head.rate(t))
    }
}

impl ParametricDrift for ScalarPotentialNet {
    fn kind(&self) -> ModelKind {
        ModelKind::Scalar
    }

    fn n_params(&self) -> usize {
        self.core.n_params()
    }

    fn params(&self) -> Vec<f64> {
        self.core.params()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.core.set_params(params)
    }

    fn pinn_accumulate<R: Rng + ?Sized>(
        &self,
        slice: &SliceInputs<'_>,
        mode: DivergenceMode,
        rate: RateSource,
        rng: &mut R,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let (n, d) = slice.x.dim();
        let (b, tape) = self.gradient_tape(slice.t, slice.x);
        let probes = self.probes(slice.t, slice.x, mode, rng);
        let mlp = &self.core.mlp;
        let back = |b_bar: &Array2<f64>, g: &mut [f64]| {
            let mut cot = Array2::zeros((d * n, 1));
            for i in 0..n {
                for j in 0..d {
                    cot[[j * n + i, 0]] = b_bar[[i, j]];
                }
            }
            mlp.backward(&tape, &Array2::zeros((n, 1)), &cot, g);
        };
        pinn_kernel(&self.core, slice, &b, &probes, rate, grad, &back)
    }

    fn am_interior_accumulate(&self, slice: &SliceInputs<'_>, grad: &mut [f64]) -> Result<f64> {
        let (n, d) = slice.x.dim();
        let tan = super::mlp::stack_tangents(&[
            self.core.unit_tangents(n, d),
            self.core.time_tangent(slice.t, n),
        ]);
        let tape = self.core.mlp.forward_tape(self.core.input(slice.t, slice.x).view(), tan);
        let td = tape.output_tangents();
        let mut loss = 0.0;
        let mut cot = Array2::zeros(((d + 1) * n, 1));
        for i in 0..n {
            let w = slice.weights[i];
            let mut sq = 0.0;
            for j in 0..d {
                let g = td[[j * n + i, 0]];
                sq += g * g;
                cot[[j * n + i, 0]] = w * g;
            }
            let dphi = td[[d * n + i, 0]];
            cot[[d * n + i, 0]] = w;
            loss += w * (0.5 * sq + dphi);
        }
        if !loss.is_finite() {
            return Err(NetsError::NonFinite(format!("action matching loss at t = {}", slice.t)));
        }
        let (g_main, _) = self.core.split_grad(grad);
        self.core.mlp.backward(&tape, &Array2::zeros((n, 1)), &cot, g_main);
        Ok(loss)
    }

    fn potential_accumulate(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        weights: &[f64],
        sign: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let n = x.nrows();
        let inp = self.core.input(t, x);
        let tape = self.core.mlp.forward_tape(inp.view(), Array2::zeros((0, inp.ncols())));
        let y = tape.output();
        let loss: f64 = (0..n).map(|i| sign * weights[i] * y[[i, 0]]).sum();
        if !loss.is_finite() {
            return Err(NetsError::NonFinite(format!("boundary potential at t = {t}")));
        }
        let cot = Array2::from_shape_fn((n, 1), |(i, _)| sign * weights[i]);
        let (g_main, _) = self.core.split_grad(grad);
        self.core.mlp.backward(&tape, &cot, &Array2::zeros((0, 1)), g_main);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::hutchinson_divergence;
    use crate::potentials::{MovingGaussianPotential, TimePotential};
    use crate::rng::stream;

    fn cfg(kind: ModelKind) -> NetConfig {
        let mut c = NetConfig::new(kind, vec![8, 8]);
        c.out_scale = 1.0;
        c.head_hidden = 4;
        c
    }

    fn slice_data(d: usize, n: usize) -> (Array2<f64>, Vec<f64>, Array2<f64>, Vec<f64>) {
        let p = MovingGaussianPotential::isotropic(d, 1.0, 2.0, vec![0.5; d]).unwrap();
        let mut rng = stream(8, 0);
        let x = Array2::from_shape_fn((n, d), |_| crate::rng::normal(&mut rng));
        let w: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut g = Array2::zeros((n, d));
        let mut dt = vec![0.0; n];
        for i in 0..n {
            let xi = x.row(i).to_vec();
            dt[i] = p.grad_and_dt(0.4, &xi, g.row_mut(i).as_slice_mut().unwrap());
        }
        (x, w, g, dt)
    }

    /// Loss as a function of parameters with a fixed probe seed, for finite differences.
    fn pinn_loss<M: ParametricDrift>(m: &M, mode: DivergenceMode, rate: RateSource) -> (f64, Vec<f64>) {
        let (x, w, g, dt) = slice_data(m.dim(), 5);
        let s = SliceInputs { t: 0.4, x: x.view(), weights: &w, grad_u: g.view(), dt_u: &dt };
        let mut grad = vec![0.0; m.n_params()];
        let (l, _) = m.pinn_accumulate(&s, mode, rate, &mut stream(77, 0), &mut grad).unwrap();
        (l, grad)
    }

    fn check<M: ParametricDrift + Clone, F: Fn(&M) -> (f64, Vec<f64>)>(m: &M, f: F) {
        let (_, grad) = f(m);
        let mut rng = stream(9, 0);
        let p0 = m.params();
        let mut m2 = m.clone();
        for _ in 0..20 {
            let k = rng.random_range(0..p0.len());
            let h = 1e-5 * (1.0 + p0[k].abs());
            let mut p = p0.clone();
            p[k] += h;
            m2.set_params(&p).unwrap();
            let lp = f(&m2).0;
            p[k] -= 2.0 * h;
            m2.set_params(&p).unwrap();
            let lm = f(&m2).0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / (1e-7 + grad[k].abs().max(fd.abs()));
            assert!(rel < 1e-4, "param {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn vector_pinn_gradients() {
        let m = VectorFieldNet::new(3, &cfg(ModelKind::Vector), &mut stream(1, 0)).unwrap();
        check(&m, |m| pinn_loss(m, DivergenceMode::Exact, RateSource::Head));
        check(&m, |m| pinn_loss(m, DivergenceMode::Hutchinson { delta: 1e-2, probes: 2 }, RateSource::Head));
        check(&m, |m| pinn_loss(m, DivergenceMode::Exact, RateSource::SliceOptimal));
    }

    #[test]
    fn scalar_pinn_gradients() {
        let m = ScalarPotentialNet::new(2, &cfg(ModelKind::Scalar), &mut stream(2, 0)).unwrap();
        check(&m, |m| pinn_loss(m, DivergenceMode::Exact, RateSource::Fixed(0.3)));
        check(&m, |m| pinn_loss(m, DivergenceMode::Hutchinson { delta: 1e-2, probes: 1 }, RateSource::Head));
    }

    #[test]
    fn am_gradients() {
        let m = ScalarPotentialNet::new(2, &cfg(ModelKind::Scalar), &mut stream(3, 0)).unwrap();
        check(&m, |m| {
            let (x, w, g, dt) = slice_data(2, 6);
            let s = SliceInputs { t: 0.4, x: x.view(), weights: &w, grad_u: g.view(), dt_u: &dt };
            let mut grad = vec![0.0; m.n_params()];
            let a = m.am_interior_accumulate(&s, &mut grad).unwrap();
            let b = m.potential_accumulate(0.7, x.view(), &w, -1.0, &mut grad).unwrap();
            (a + b, grad)
        });
    }

    #[test]
    fn vector_divergence_matches_hutchinson() {
        let m = VectorFieldNet::new(3, &cfg(ModelKind::Vector), &mut stream(1, 0)).unwrap();
        let x = [0.2, -0.5, 1.0];
        let xv = ArrayView2::from_shape((1, 3), &x).unwrap();
        let mut div = [0.0];
        assert!(m.exact_divergence(0.3, xv, &mut div));
        let f = |y: &[f64]| {
            let mut b = Array2::zeros((1, 3));
            m.drift(0.3, ArrayView2::from_shape((1, 3), y).unwrap(), b.view_mut());
            b.into_raw_vec_and_offset().0
        };
        let (est, se) = hutchinson_divergence(f, &x, 1e-3, 10_000, &mut stream(5, 0)).unwrap();
        assert!((est - div[0]).abs() < 3.0 * se + 1e-5, "{est} {} {se}", div[0]);
    }

    #[test]
    fn scalar_drift_is_gradient() {
        let m = ScalarPotentialNet::new(3, &cfg(ModelKind::Scalar), &mut stream(4, 0)).unwrap();
        let x = [0.2, -0.5, 1.0];
        let mut b = Array2::zeros((1, 3));
        m.drift(0.6, ArrayView2::from_shape((1, 3), &x).unwrap(), b.view_mut());
        for j in 0..3 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (mut a, mut c) = ([0.0], [0.0]);
            m.scalar_potential(0.6, ArrayView2::from_shape((1, 3), &xp).unwrap(), &mut a).unwrap();
            m.scalar_potential(0.6, ArrayView2::from_shape((1, 3), &xm).unwrap(), &mut c).unwrap();
            let fd = (a[0] - c[0]) / (2.0 * h);
            assert!((b[[0, j]] - fd).abs() < 1e-4 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn laplacian_hutchinson_vs_exact_on_tiny_net() {
        let mut c = cfg(ModelKind::Scalar);
        c.hidden = vec![6];
        let m = ScalarPotentialNet::new(2, &c, &mut stream(6, 0)).unwrap();
        let x = [0.4, -0.3];
        let mut lap = [0.0];
        m.exact_divergence(0.5, ArrayView2::from_shape((1, 2), &x).unwrap(), &mut lap);
        let f = |y: &[f64]| {
            let mut b = Array2::zeros((1, 2));
            m.drift(0.5, ArrayView2::from_shape((1, 2), y).unwrap(), b.view_mut());
            b.into_raw_vec_and_offset().0
        };
        let (est, se) = hutchinson_divergence(f, &x, 1e-3, 200_000, &mut stream(7, 0)).unwrap();
        assert!((est - lap[0]).abs() < 1e-3 * lap[0].abs().max(1.0) + 3.0 * se, "{est} {} {se}", lap[0]);
    }

    #[test]
    fn dt_phi_is_exact_time_derivative() {
        let m = ScalarPotentialNet::new(2, &cfg(ModelKind::Scalar), &mut stream(4, 0)).unwrap();
        let x = [0.7, 0.1];
        let xv = ArrayView2::from_shape((1, 2), &x).unwrap();
        let mut d = [0.0];
        m.dt_scalar_potential(0.3, xv, &mut d).unwrap();
        let (mut a, mut b) = ([0.0], [0.0]);
        let h = 1e-5;
        m.scalar_potential(0.3 + h, xv, &mut a).unwrap();
        m.scalar_potential(0.3 - h, xv, &mut b).unwrap();
        assert!((d[0] - (a[0] - b[0]) / (2.0 * h)).abs() < 1e-7);
    }

    #[test]
    fn head_pins_zero_at_origin() {
        let m = VectorFieldNet::new(2, &cfg(ModelKind::Vector), &mut stream(4, 0)).unwrap();
        assert_eq!(m.free_energy(0.0), Some(0.0));
        let h = 1e-5;
        let fd = (m.free_energy(0.5 + h).unwrap() - m.free_energy(0.5 - h).unwrap()) / (2.0 * h);
        assert!((m.free_energy_rate(0.5).unwrap() - fd).abs() < 1e-7);
    }
}
