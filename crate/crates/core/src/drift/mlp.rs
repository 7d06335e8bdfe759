//! Batched feed-forward network with forward-mode input tangents and reverse-mode
//! parameter gradients through both primal and tangent outputs.
//!
//! Inputs are rows of an `n × in` array. `J` input tangents are stacked tangent-major
//! into a `(J·n) × in` array, so row `j·n + i` is tangent `j` of sample `i`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NetsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    /// `(σ, σ', σ'')` at `z`.
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let h = z * s;
                let d1 = s + z * s * (1.0 - s);
                let d2 = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
                (h, d1, d2)
            }
            Activation::Tanh => {
                let h = z.tanh();
                let d1 = 1.0 - h * h;
                (h, d1, -2.0 * h * d1)
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            _ => Err(NetsError::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Time features `[t, sin(πkt), cos(πkt)]` for `k = 1..=n_freq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub n_freq: usize,
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        1 + 2 * self.n_freq
    }

    pub fn features(&self, t: f64, out: &mut [f64]) {
        out[0] = t;
        for k in 1..=self.n_freq {
            let w = std::f64::consts::PI * k as f64;
            out[2 * k - 1] = (w * t).sin();
            out[2 * k] = (w * t).cos();
        }
    }

    /// `d/dt` of [`TimeEmbedding::features`].
    pub fn derivative(&self, t: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for k in 1..=self.n_freq {
            let w = std::f64::consts::PI * k as f64;
            out[2 * k - 1] = w * (w * t).cos();
            out[2 * k] = -w * (w * t).sin();
        }
    }
}

/// Values recorded by a forward pass, needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    n: usize,
    n_tangents: usize,
    /// Per layer: input `H_{l-1}`, its tangents, pre-activation `Z_l`, its tangents.
    inputs: Vec<Array2<f64>>,
    input_dots: Vec<Array2<f64>>,
    zs: Vec<Array2<f64>>,
    z_dots: Vec<Array2<f64>>,
}

impl Tape {
    /// Network output, `n × out`.
    pub fn output(&self) -> &Array2<f64> {
        self.zs.last().expect("at least one layer")
    }

    /// Output tangents, `(J·n) × out`.
    pub fn output_tangents(&self) -> &Array2<f64> {
        self.z_dots.last().expect("at least one layer")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_tangents(&self) -> usize {
        self.n_tangents
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl Mlp {
    /// Network with layer widths `widths[0] → … → widths[L]`; hidden layers use `activation`,
    /// the output layer is linear. Weights are drawn `N(0, 1/fan_in)`, the output layer scaled
    /// by `out_scale`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        widths: Vec<usize>,
        activation: Activation,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetsError::InvalidParameter(format!("bad layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(Self::count(&widths));
        let last = widths.len() - 2;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (1.0 / fan_in as f64).sqrt() * if l == last { out_scale } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { widths, activation, params })
    }

    pub fn from_parts(widths: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NetsError::InvalidParameter(format!("bad layer widths {widths:?}")));
        }
        let want = Self::count(&widths);
        if params.len() != want {
            return Err(NetsError::DimensionMismatch { expected: want, got: params.len() });
        }
        Ok(Self { widths, activation, params })
    }

    fn count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l`'s weights in the parameter vector.
    fn offset(&self, l: usize) -> usize {
        self.widths[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let o = self.offset(l);
        let (fi, fo) = (self.widths[l], self.widths[l + 1]);
        ArrayView2::from_shape((fo, fi), &self.params[o..o + fi * fo]).expect("layout")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let o = self.offset(l) + self.widths[l] * self.widths[l + 1];
        &self.params[o..o + self.widths[l + 1]]
    }

    /// Plain forward pass.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in 0..self.n_layers() {
            let mut z = h.dot(&self.weight(l).t());
            z += &ndarray::ArrayView1::from(self.bias(l));
            if l + 1 < self.n_layers() {
                z.mapv_inplace(|v| self.activation.eval(v).0);
            }
            h = z;
        }
        h
    }

    /// Forward pass carrying `tangents` (`(J·n) × in`), recorded for [`Mlp::backward`].
    pub fn forward_tape(&self, x: ArrayView2<'_, f64>, tangents: Array2<f64>) -> Tape {
        let n = x.nrows();
        let j = tangents.nrows().checked_div(n).unwrap_or(0);
        debug_assert_eq!(tangents.nrows(), j * n);
        let layers = self.n_layers();
        let mut tape = Tape {
            n,
            n_tangents: j,
            inputs: Vec::with_capacity(layers),
            input_dots: Vec::with_capacity(layers),
            zs: Vec::with_capacity(layers),
            z_dots: Vec::with_capacity(layers),
        };
        let mut h = x.to_owned();
        let mut h_dot = tangents;
        for l in 0..layers {
            let w = self.weight(l);
            let mut z = h.dot(&w.t());
            z += &ndarray::ArrayView1::from(self.bias(l));
            let z_dot = h_dot.dot(&w.t());
            tape.inputs.push(h);
            tape.input_dots.push(h_dot);
            if l + 1 < layers {
                let (nh, nhd) = self.activate(&z, &z_dot, n);
                h = nh;
                h_dot = nhd;
            } else {
                h = Array2::zeros((0, 0));
                h_dot = Array2::zeros((0, 0));
            }
            tape.zs.push(z);
            tape.z_dots.push(z_dot);
        }
        tape
    }

    fn activate(&self, z: &Array2<f64>, z_dot: &Array2<f64>, n: usize) -> (Array2<f64>, Array2<f64>) {
        let mut h = z.clone();
        let mut d1 = z.clone();
        for (hv, dv) in h.iter_mut().zip(d1.iter_mut()) {
            let (a, b, _) = self.activation.eval(*hv);
            *hv = a;
            *dv = b;
        }
        let mut h_dot = z_dot.clone();
        if n > 0 {
            for (r, mut row) in h_dot.rows_mut().into_iter().enumerate() {
                row *= &d1.row(r % n);
            }
        }
        (h, h_dot)
    }

    /// Accumulates into `grad` the parameter gradient of a loss with cotangents
    /// `out_bar` (`n × out`) on the output and `tangent_bar` (`(J·n) × out`) on the output tangents.
    pub fn backward(&self, tape: &Tape, out_bar: &Array2<f64>, tangent_bar: &Array2<f64>, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n = tape.n;
        let layers = self.n_layers();
        let mut z_bar = out_bar.clone();
        let mut z_dot_bar = tangent_bar.clone();
        for l in (0..layers).rev() {
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let o = self.offset(l);
            let h_prev = &tape.inputs[l];
            let h_prev_dot = &tape.input_dots[l];
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape((fo, fi), &mut grad[o..o + fi * fo])
                    .expect("layout");
                gw += &z_bar.t().dot(h_prev);
                if tape.n_tangents > 0 {
                    gw += &z_dot_bar.t().dot(h_prev_dot);
                }
            }
            let col = z_bar.sum_axis(Axis(0));
            for (g, c) in grad[o + fi * fo..o + fi * fo + fo].iter_mut().zip(col.iter()) {
                *g += c;
            }
            if l == 0 {
                break;
            }
            let w = self.weight(l);
            let h_bar = z_bar.dot(&w);
            let h_dot_bar = z_dot_bar.dot(&w);
            // Back through the activation of layer l-1.
            let z_prev = &tape.zs[l - 1];
            let z_prev_dot = &tape.z_dots[l - 1];
            let mut d1 = z_prev.clone();
            let mut d2 = z_prev.clone();
            for ((a, b), z) in d1.iter_mut().zip(d2.iter_mut()).zip(z_prev.iter()) {
                let (_, s1, s2) = self.activation.eval(*z);
                *a = s1;
                *b = s2;
            }
            let mut nz_bar = &h_bar * &d1;
            let mut nz_dot_bar = h_dot_bar;
            if n > 0 && tape.n_tangents > 0 {
                for (r, (mut zd_bar, zd)) in nz_dot_bar
                    .rows_mut()
                    .into_iter()
                    .zip(z_prev_dot.rows())
                    .enumerate()
                {
                    let i = r % n;
                    let s1 = d1.row(i);
                    let s2 = d2.row(i);
                    let mut acc = nz_bar.row_mut(i);
                    for k in 0..zd_bar.len() {
                        acc[k] += s2[k] * zd[k] * zd_bar[k];
                        zd_bar[k] *= s1[k];
                    }
                }
            }
            z_bar = nz_bar;
            z_dot_bar = nz_dot_bar;
        }
    }

    /// Second directional derivative `Σ_k ∂²y/∂(e_{dirs[k]})²` of every output, via a
    /// second-order forward pass per direction. Returns `n × out`.
    pub fn second_directional_sum(&self, x: ArrayView2<'_, f64>, dirs: &[usize]) -> Array2<f64> {
        let (n, fi) = x.dim();
        let mut acc = Array2::zeros((n, self.output_dim()));
        for &dir in dirs {
            let mut h = x.to_owned();
            let mut hd = Array2::<f64>::zeros((n, fi));
            hd.column_mut(dir).fill(1.0);
            let mut hdd = Array2::<f64>::zeros((n, fi));
            for l in 0..self.n_layers() {
                let w = self.weight(l);
                let mut z = h.dot(&w.t());
                z += &ndarray::ArrayView1::from(self.bias(l));
                let zd = hd.dot(&w.t());
                let zdd = hdd.dot(&w.t());
                if l + 1 < self.n_layers() {
                    let mut nh = z.clone();
                    let mut nhd = zd.clone();
                    let mut nhdd = zdd.clone();
                    for (((a, b), c), (zv, (zdv, zddv))) in nh
                        .iter_mut()
                        .zip(nhd.iter_mut())
                        .zip(nhdd.iter_mut())
                        .zip(z.iter().zip(zd.iter().zip(zdd.iter())))
                    {
                        let (s0, s1, s2) = self.activation.eval(*zv);
                        *a = s0;
                        *b = s1 * zdv;
                        *c = s2 * zdv * zdv + s1 * zddv;
                    }
                    h = nh;
                    hd = nhd;
                    hdd = nhdd;
                } else {
                    hdd = zdd;
                }
            }
            acc += &hdd;
        }
        acc
    }
}

/// Stacks `J` tangent blocks of size `n × in` into one `(J·n) × in` array.
pub(crate) fn stack_tangents(blocks: &[Array2<f64>]) -> Array2<f64> {
    if blocks.is_empty() {
        return Array2::zeros((0, 0));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal block shapes")
}
