//! Versioned binary checkpoints for trained drift networks.
//!
//! Layout (little-endian):
//!
//! | field | type |
//! |-------|------|
//! | magic `NETSCKPT` | 8 bytes |
//! | version | u32 |
//! | model kind (0 vector, 1 scalar) | u8 |
//! | dimension `d` | u32 |
//! | time-embedding frequencies | u32 |
//! | config hash | u64 |
//! | main network: activation u8, layer count u32, widths u32…, parameter count u64, parameters f64… | |
//! | free-energy head: same block as the main network | |
//!
//! Saving and loading round-trips every parameter bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::mlp::{Activation, Mlp, TimeEmbedding};
use super::nets::{FreeEnergyHead, ModelKind, NetConfig, NetCore, ScalarPotentialNet, VectorFieldNet};
use super::{DivergenceMode, DriftModel, ParametricDrift, RateSource, SliceInputs};
use crate::error::{NetsError, Result};

const MAGIC: &[u8; 8] = b"NETSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a hash of a configuration's canonical text.
pub fn config_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Either kind of trainable network.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedNet {
    Vector(VectorFieldNet),
    Scalar(ScalarPotentialNet),
}

impl TrainedNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::Vector => TrainedNet::Vector(VectorFieldNet::new(dim, cfg, rng)?),
            ModelKind::Scalar => TrainedNet::Scalar(ScalarPotentialNet::new(dim, cfg, rng)?),
        })
    }

    fn core(&self) -> &NetCore {
        match self {
            TrainedNet::Vector(m) => &m.core,
            TrainedNet::Scalar(m) => &m.core,
        }
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            TrainedNet::Vector($m) => $e,
            TrainedNet::Scalar($m) => $e,
        }
    };
}

impl DriftModel for TrainedNet {
    fn dim(&self) -> usize {
        delegate!(self, m => m.dim())
    }
    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, out: ArrayViewMut2<'_, f64>) {
        delegate!(self, m => m.drift(t, x, out))
    }
    fn exact_divergence(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        delegate!(self, m => m.exact_divergence(t, x, out))
    }
    fn drift_and_divergence(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        drift: ArrayViewMut2<'_, f64>,
        div: &mut [f64],
    ) -> bool {
        delegate!(self, m => m.drift_and_divergence(t, x, drift, div))
    }
    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        delegate!(self, m => m.scalar_potential(t, x, out))
    }
    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        delegate!(self, m => m.dt_scalar_potential(t, x, out))
    }
    fn has_scalar_potential(&self) -> bool {
        delegate!(self, m => m.has_scalar_potential())
    }
    fn free_energy(&self, t: f64) -> Option<f64> {
        delegate!(self, m => m.free_energy(t))
    }
    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        delegate!(self, m => m.free_energy_rate(t))
    }
}

impl ParametricDrift for TrainedNet {
    fn kind(&self) -> ModelKind {
        delegate!(self, m => m.kind())
    }
    fn n_params(&self) -> usize {
        delegate!(self, m => m.n_params())
    }
    fn params(&self) -> Vec<f64> {
        delegate!(self, m => m.params())
    }
    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        delegate!(self, m => m.set_params(params))
    }
    fn pinn_accumulate<R: Rng + ?Sized>(
        &self,
        slice: &SliceInputs<'_>,
        mode: DivergenceMode,
        rate: RateSource,
        rng: &mut R,
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        delegate!(self, m => m.pinn_accumulate(slice, mode, rate, rng, grad))
    }
    fn am_interior_accumulate(&self, slice: &SliceInputs<'_>, grad: &mut [f64]) -> Result<f64> {
        delegate!(self, m => m.am_interior_accumulate(slice, grad))
    }
    fn potential_accumulate(
        &self,
        t: f64,
        x: ArrayView2<'_, f64>,
        weights: &[f64],
        sign: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        delegate!(self, m => m.potential_accumulate(t, x, weights, sign, grad))
    }
}

/// A network together with the hash of the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: TrainedNet,
    pub config_hash: u64,
}

fn write_mlp<W: Write>(w: &mut W, m: &Mlp) -> Result<()> {
    w.write_all(&[m.activation().code()])?;
    w.write_all(&(m.widths().len() as u32).to_le_bytes())?;
    for v in m.widths() {
        w.write_all(&(*v as u32).to_le_bytes())?;
    }
    w.write_all(&(m.n_params() as u64).to_le_bytes())?;
    for p in m.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array::<R, 4>(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array::<R, 8>(r)?))
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let act = Activation::from_code(read_array::<R, 1>(r)?[0])?;
    let layers = read_u32(r)? as usize;
    if layers > 1024 {
        return Err(NetsError::Format(format!("implausible layer count {layers}")));
    }
    let widths = (0..layers)
        .map(|_| read_u32(r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = read_u64(r)? as usize;
    let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if count != expected {
        return Err(NetsError::Format(format!("parameter count {count} does not match widths {widths:?}")));
    }
    let params = (0..count)
        .map(|_| read_array::<R, 8>(r).map(f64::from_le_bytes))
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_parts(widths, act, params)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let core = self.net.core();
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let kind = match self.net {
            TrainedNet::Vector(_) => 0u8,
            TrainedNet::Scalar(_) => 1u8,
        };
        w.write_all(&[kind])?;
        w.write_all(&(core.dim as u32).to_le_bytes())?;
        w.write_all(&(core.emb.n_freq as u32).to_le_bytes())?;
        w.write_all(&self.config_hash.to_le_bytes())?;
        write_mlp(&mut w, &core.mlp)?;
        write_mlp(&mut w, &core.head.mlp)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 8] = read_array(&mut r)?;
        if &magic != MAGIC {
            return Err(NetsError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NetsError::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = read_array::<_, 1>(&mut r)?[0];
        let dim = read_u32(&mut r)? as usize;
        let n_freq = read_u32(&mut r)? as usize;
        let config_hash = read_u64(&mut r)?;
        let mlp = read_mlp(&mut r)?;
        let head_mlp = read_mlp(&mut r)?;
        let emb = TimeEmbedding { n_freq };
        let out = match kind {
            0 => dim,
            1 => 1,
            k => return Err(NetsError::Format(format!("unknown model kind {k}"))),
        };
        if mlp.input_dim() != dim + emb.width() || mlp.output_dim() != out {
            return Err(NetsError::Format("network shape does not match dimension".into()));
        }
        if head_mlp.input_dim() != emb.width() || head_mlp.output_dim() != 1 {
            return Err(NetsError::Format("free-energy head has the wrong shape".into()));
        }
        let core = NetCore { dim, mlp, head: FreeEnergyHead { mlp: head_mlp, emb }, emb };
        let net = if kind == 0 {
            TrainedNet::Vector(VectorFieldNet { core })
        } else {
            TrainedNet::Scalar(ScalarPotentialNet { core })
        };
        Ok(Self { net, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
