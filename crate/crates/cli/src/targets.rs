//! Turns config blocks into potentials, drifts and reference samples.

use anyhow::{bail, Context, Result};
use ndarray::Array2;

use nets::drift::{AnalyticGaussianDrift, DriftModel, MixtureDrift, ZeroDrift};
use nets::lattice::{hmc_chain, Phi4Potential};
use nets::potentials::{
    circle_means, fab_gmm40_means, FunnelPotential, IsotropicGaussian, MixturePath, MovingGaussianPotential,
    StaticPotential, TimePotential, GMM40_SCALE,
};
use nets::rng::{stream, walker_streams};

use crate::config::{EvalConfig, PotentialConfig, ReferenceSource};

fn gaussian_anneal(dim: usize, sigma0: f64, sigma1: f64) -> Result<MovingGaussianPotential> {
    if !(sigma0 > 0.0 && sigma1 > 0.0) {
        bail!("gaussian-anneal needs sigma0, sigma1 > 0");
    }
    // Linear interpolation of the two energies is a linear path in the precision.
    Ok(MovingGaussianPotential::isotropic(dim, sigma0.powi(-2), sigma1.powi(-2), vec![0.0; dim])?)
}

fn moving_gaussian(cfg: &PotentialConfig) -> Result<Option<MovingGaussianPotential>> {
    Ok(match cfg {
        PotentialConfig::GaussianAnneal { dim, sigma0, sigma1 } => Some(gaussian_anneal(*dim, *sigma0, *sigma1)?),
        PotentialConfig::MovingGaussian { dim, a0, a1, mean_rate } => {
            Some(MovingGaussianPotential::isotropic(*dim, *a0, *a1, mean_rate.clone())?)
        }
        _ => None,
    })
}

pub fn build_potential(cfg: &PotentialConfig) -> Result<Box<dyn TimePotential>> {
    if let Some(p) = moving_gaussian(cfg)? {
        return Ok(Box::new(p));
    }
    Ok(match cfg {
        PotentialConfig::StaticGaussian { dim, sigma } => {
            Box::new(StaticPotential(IsotropicGaussian::centered(*dim, *sigma)?))
        }
        PotentialConfig::Gmm { modes, radius, sigma } => {
            Box::new(MixturePath::gaussian(circle_means(*modes, *radius), *sigma)?)
        }
        PotentialConfig::Gmm40 => Box::new(MixturePath::gaussian(fab_gmm40_means(), GMM40_SCALE)?),
        PotentialConfig::Funnel { dim, sigma } => Box::new(FunnelPotential::new(*dim, *sigma)?),
        PotentialConfig::StudentT { dim, means_seed } => {
            Box::new(MixturePath::mixture_of_student_t(*dim, *means_seed)?)
        }
        PotentialConfig::Phi4(spec) => Box::new(Phi4Potential::new(spec.clone())?),
        PotentialConfig::GaussianAnneal { .. } | PotentialConfig::MovingGaussian { .. } => unreachable!(),
    })
}

/// The closed-form transport of `cfg`, where one exists.
pub fn exact_drift(cfg: &PotentialConfig) -> Result<Box<dyn DriftModel>> {
    if let Some(p) = moving_gaussian(cfg)? {
        return Ok(Box::new(AnalyticGaussianDrift::new(p)));
    }
    Ok(match cfg {
        PotentialConfig::StaticGaussian { dim, .. } => Box::new(ZeroDrift::new(*dim)),
        PotentialConfig::Gmm { modes, radius, sigma } => {
            Box::new(MixtureDrift::new(MixturePath::gaussian(circle_means(*modes, *radius), *sigma)?)?)
        }
        PotentialConfig::Gmm40 => Box::new(MixtureDrift::new(MixturePath::gaussian(fab_gmm40_means(), GMM40_SCALE)?)?),
        other => bail!("no closed-form drift for potential {other:?}"),
    })
}

/// Unweighted samples of the target `ρ_1` for distance metrics.
pub fn reference_samples(potential: &dyn TimePotential, eval: &EvalConfig, seed: u64) -> Result<Option<Array2<f64>>> {
    let n = eval.reference_samples;
    let d = potential.dim();
    match eval.reference {
        ReferenceSource::None => Ok(None),
        ReferenceSource::Exact => {
            let mut out = Array2::zeros((n, d));
            for (mut row, mut rng) in out.rows_mut().into_iter().zip(walker_streams(seed, n)) {
                potential
                    .sample(1.0, &mut rng, row.as_slice_mut().expect("contiguous row"))
                    .context("target has no exact sampler; set eval.reference = \"hmc\"")?;
            }
            Ok(Some(out))
        }
        ReferenceSource::Hmc => {
            let mut rng = stream(seed, 0);
            let mut init = vec![0.0; d];
            potential.sample(0.0, &mut rng, &mut init)?;
            let chain = hmc_chain(potential, 1.0, &init, n, &eval.hmc, &mut rng)?;
            Ok(Some(chain.fields))
        }
    }
}
