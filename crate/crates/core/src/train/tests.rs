use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::*;
use crate::drift::{
    pinn_residual, AnalyticGaussianDrift, DriftModel, Frozen, NetConfig, QuadraticPotentialDrift, VectorFieldNet,
    ZeroDrift,
};
use crate::potentials::{IsotropicGaussian, LinearInterpolation, MovingGaussianPotential, StaticPotential};
use crate::rng::fill_normal;
use crate::sde::SliceRecord;

fn anneal_1d() -> LinearInterpolation<IsotropicGaussian, IsotropicGaussian> {
    LinearInterpolation::new(
        IsotropicGaussian::centered(1, 1.0).unwrap(),
        IsotropicGaussian::centered(1, 2.0).unwrap(),
    )
    .unwrap()
}

fn moving() -> MovingGaussianPotential {
    MovingGaussianPotential::isotropic(2, 1.0, 2.0, vec![1.0, 0.0]).unwrap()
}

fn slices_from<P: TimePotential, M: DriftModel>(p: &P, m: &M, n: usize, k: usize, e: f64, seed: u64) -> Vec<SliceRecord> {
    let mut ens = WalkerEnsemble::sample_initial(p, n, seed).unwrap();
    let cfg = RolloutConfig {
        eps: DiffusionSchedule::constant(e),
        record_slices: true,
        ..RolloutConfig::default()
    };
    rollout(&mut ens, p, m, &TimeGrid::uniform(k, 1.0).unwrap(), &cfg).unwrap().slices
}

fn zero_net(dim: usize) -> VectorFieldNet {
    let mut net = VectorFieldNet::new(dim, &NetConfig::new(ModelKind::Vector, vec![8]), &mut stream(0, 0)).unwrap();
    let z = vec![0.0; net.n_params()];
    net.set_params(&z).unwrap();
    net
}

#[test]
fn weights_normalize_and_clip() {
    let (w, c) = slice_weights(&[0.0, 0.0, f64::NEG_INFINITY, 2f64.ln()], 30.0).unwrap();
    assert_eq!(c, 0);
    assert_eq!(w[2], 0.0);
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[3] - 0.5).abs() < 1e-12);
    let (w, c) = slice_weights(&[0.0, 100.0], 30.0).unwrap();
    assert_eq!(c, 2);
    assert!((w[1] - 1.0 / (1.0 + (-60f64).exp())).abs() < 1e-15);
    assert!(matches!(slice_weights(&[f64::NEG_INFINITY], 30.0), Err(NetsError::DegenerateWeights)));
}

#[test]
fn exact_drift_pinn_loss_vanishes() {
    let p = moving();
    let m = Frozen(AnalyticGaussianDrift::new(p.clone()));
    let slices = slices_from(&p, &m, 500, 20, 1.0, 1);
    for rate in [RateChoice::Head, RateChoice::Exact] {
        let out = pinn_loss_on_policy(&m, &p, &slices, 1.0, DivergenceMode::Exact, rate, 30.0, 0).unwrap();
        assert!(out.loss < 1e-8, "loss {}", out.loss);
    }
}

#[test]
fn zero_drift_static_potential_zero_loss() {
    let p = StaticPotential(IsotropicGaussian::centered(2, 1.0).unwrap());
    let m = Frozen(ZeroDrift::new(2));
    let slices = slices_from(&p, &m, 100, 5, 1.0, 2);
    let out = pinn_loss_on_policy(&m, &p, &slices, 1.0, DivergenceMode::Exact, RateChoice::Exact, 30.0, 0).unwrap();
    assert_eq!(out.loss, 0.0);
}

#[test]
fn slice_optimal_rate_gives_weighted_variance() {
    let p = anneal_1d();
    let slices = slices_from(&p, &ZeroDrift::new(1), 400, 10, 1.0, 3);
    let net = zero_net(1);
    let out =
        pinn_loss_on_policy(&net, &p, &slices, 1.0, DivergenceMode::Exact, RateChoice::SliceOptimal, 30.0, 0).unwrap();
    let mut direct = 0.0;
    for s in &slices {
        let (w, _) = slice_weights(&s.log_weights, 30.0).unwrap();
        let du: Vec<f64> = s.positions.iter().map(|x| p.dt_energy(s.t, &[*x])).collect();
        let m: f64 = w.iter().zip(&du).map(|(a, b)| a * b).sum();
        direct += w.iter().zip(&du).map(|(a, b)| a * (b - m).powi(2)).sum::<f64>();
    }
    direct /= slices.len() as f64;
    assert!(((out.loss - direct) / direct).abs() < 1e-6, "{} vs {direct}", out.loss);
}

#[test]
fn off_policy_exact_drift_and_single_point() {
    let p = moving();
    let m = Frozen(AnalyticGaussianDrift::new(p.clone()));
    let mut cloud = Array2::zeros((200, 2));
    fill_normal(&mut stream(4, 0), cloud.as_slice_mut().unwrap());
    cloud *= 3.0;
    let samples = vec![(0.2, cloud.clone()), (0.9, cloud)];
    let off = pinn_loss_off_policy(&m, &p, &samples, DivergenceMode::Exact, RateChoice::Head, 0).unwrap();
    assert!(off.loss < 1e-8);
    let on = pinn_loss_on_policy(&m, &p, &slices_from(&p, &m, 200, 5, 1.0, 4), 1.0, DivergenceMode::Exact, RateChoice::Head, 30.0, 0)
        .unwrap();
    assert!(on.loss < 1e-8 && (on.loss - off.loss).abs() < 1e-8);

    let q = Frozen(QuadraticPotentialDrift::new(2, 0.3));
    let x = Array2::from_shape_vec((1, 2), vec![0.4, -1.1]).unwrap();
    let single = pinn_loss_off_policy(&q, &p, &[(0.5, x.clone())], DivergenceMode::Exact, RateChoice::Exact, 0).unwrap();
    let dtf = p.free_energy_rate(0.5).unwrap();
    let r = pinn_residual(&q, &p, 0.5, x.as_slice().unwrap(), DivergenceMode::Exact, Some(dtf), &mut stream(0, 0)).unwrap();
    assert!((single.loss - r * r).abs() < 1e-12 * (1.0 + r * r));
    assert!(matches!(
        pinn_loss_off_policy(&q, &p, &[], DivergenceMode::Exact, RateChoice::Exact, 0),
        Err(NetsError::Empty(_))
    ));
}

/// A fixed scalar potential `φ + shift + scale·ψ` with `ψ = sin(ω·x + c t + s)`.
#[derive(Clone)]
struct Perturbed<M> {
    base: M,
    shift: f64,
    scale: f64,
    omega: Vec<f64>,
    c: f64,
    s: f64,
}

impl<M: DriftModel> Perturbed<M> {
    fn arg(&self, t: f64, x: ArrayView2<'_, f64>, i: usize) -> f64 {
        x.row(i).iter().zip(&self.omega).map(|(a, b)| a * b).sum::<f64>() + self.c * t + self.s
    }
}

impl<M: DriftModel> DriftModel for Perturbed<M> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn drift(&self, t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        self.base.drift(t, x, out.view_mut());
        for i in 0..x.nrows() {
            let c = self.scale * self.arg(t, x, i).cos();
            for (o, w) in out.row_mut(i).iter_mut().zip(&self.omega) {
                *o += c * w;
            }
        }
    }
    fn scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        self.base.scalar_potential(t, x, out)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.shift + self.scale * self.arg(t, x, i).sin();
        }
        Ok(())
    }
    fn dt_scalar_potential(&self, t: f64, x: ArrayView2<'_, f64>, out: &mut [f64]) -> Result<()> {
        self.base.dt_scalar_potential(t, x, out)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.scale * self.c * self.arg(t, x, i).cos();
        }
        Ok(())
    }
    fn has_scalar_potential(&self) -> bool {
        true
    }
}

fn perturb<M: DriftModel>(base: M, shift: f64, scale: f64, seed: u64) -> Perturbed<M> {
    let mut v = vec![0.0; 4];
    fill_normal(&mut stream(seed, 7), &mut v);
    let d = base.dim();
    Perturbed { base, shift, scale, omega: v[..d].to_vec(), c: v[2], s: v[3] }
}

#[test]
fn action_matching_constant_potential_is_zero() {
    let p = moving();
    let slices = slices_from(&p, &ZeroDrift::new(2), 100, 10, 1.0, 5);
    let m = Frozen(perturb(ZeroDrift::new(2), 2.5, 0.0, 0));
    let out = am_loss(&m, &slices, 1.0, 30.0).unwrap();
    assert!(out.loss.abs() < 1e-12, "{}", out.loss);
}

#[test]
fn action_matching_gauge_invariance() {
    let p = moving();
    let exact = AnalyticGaussianDrift::new(p.clone());
    let slices = slices_from(&p, &exact, 300, 20, 1.0, 6);
    let a = am_loss(&Frozen(exact.clone()), &slices, 1.0, 30.0).unwrap().loss;
    let b = am_loss(&Frozen(perturb(exact, 3.7, 0.0, 0)), &slices, 1.0, 30.0).unwrap().loss;
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn action_matching_exact_potential_is_local_minimum() {
    let p = moving();
    let exact = AnalyticGaussianDrift::new(p.clone());
    // Exact draws from ρ_t at every knot; many points at the boundaries where the
    // first-order terms are least averaged.
    let k = 400;
    let slices: Vec<SliceRecord> = (0..=k)
        .map(|j| {
            let t = j as f64 / k as f64;
            let n = if j == 0 || j == k { 50_000 } else { 2000 };
            let mut x = Array2::zeros((n, 2));
            let mut r = stream(8, j as u64);
            for mut row in x.rows_mut() {
                p.sample(t, &mut r, row.as_slice_mut().unwrap()).unwrap();
            }
            SliceRecord { t, positions: x, log_weights: vec![0.0; n] }
        })
        .collect();
    let base = am_loss(&Frozen(exact.clone()), &slices, 1.0, 30.0).unwrap().loss;
    for seed in 0..10 {
        let l = am_loss(&Frozen(perturb(exact.clone(), 0.0, 0.1, seed)), &slices, 1.0, 30.0).unwrap().loss;
        assert!(base <= l, "seed {seed}: {base} > {l}");
    }
}

#[test]
fn action_matching_needs_boundaries() {
    let p = moving();
    let mut slices = slices_from(&p, &ZeroDrift::new(2), 10, 4, 1.0, 9);
    slices.remove(0);
    assert!(am_loss(&Frozen(ZeroDrift::new(2)), &slices, 1.0, 30.0).is_err());
    let vec_net = zero_net(2);
    let slices = slices_from(&p, &ZeroDrift::new(2), 10, 4, 1.0, 9);
    assert!(matches!(am_loss(&vec_net, &slices, 1.0, 30.0), Err(NetsError::Unsupported(_))));
}

#[test]
fn gradients_treat_trajectories_as_constants() {
    let p = anneal_1d();
    let cfg = NetConfig { out_scale: 1.0, ..NetConfig::new(ModelKind::Vector, vec![6]) };
    let net = VectorFieldNet::new(1, &cfg, &mut stream(10, 0)).unwrap();
    let a = slices_from(&p, &net, 64, 6, 1.0, 11);
    let b = slices_from(&p, &net, 64, 6, 1.0, 11);
    let loss = |m: &VectorFieldNet, s: &[SliceRecord]| {
        pinn_loss_on_policy(m, &p, s, 1.0, DivergenceMode::Exact, RateChoice::Head, 30.0, 5).unwrap()
    };
    let ga = loss(&net, &a);
    let gb = loss(&net, &b);
    assert_eq!(ga.grad, gb.grad);
    // Finite differences with the trajectories held fixed reproduce the gradient.
    let params = net.params();
    for j in (0..params.len()).step_by(5) {
        let h = 1e-6;
        let mut m = net.clone();
        let mut q = params.clone();
        q[j] += h;
        m.set_params(&q).unwrap();
        let up = loss(&m, &a).loss;
        q[j] -= 2.0 * h;
        m.set_params(&q).unwrap();
        let dn = loss(&m, &a).loss;
        let fd = (up - dn) / (2.0 * h);
        assert!((fd - ga.grad[j]).abs() < 1e-5 * (1.0 + fd.abs()), "param {j}: fd {fd} vs {}", ga.grad[j]);
    }
}

#[test]
fn horizon_schedule_ramps_and_stalls() {
    let h = HorizonSchedule::default();
    assert_eq!(h.at(0, 100), 0.1);
    assert!((h.at(25, 100) - 0.55).abs() < 1e-12);
    assert_eq!(h.at(50, 100), 1.0);
    assert_eq!(h.at(80, 100), 1.0);
    let mut last = 0.0;
    for i in 0..200 {
        let t = h.at(i, 100);
        assert!(t >= last && t <= 1.0);
        last = t;
    }
    let p = anneal_1d();
    let mut net = zero_net(1);
    let cfg = TrainConfig { walkers: 32, steps: 4, iterations: 6, ess_floor: 1.0, ..TrainConfig::default() };
    let log = train(&cfg, &p, &mut net, 1).unwrap();
    assert!(log.iter().all(|r| r.horizon == 0.1));
    let cfg = TrainConfig { ess_floor: 0.0, ..cfg };
    let log = train(&cfg, &p, &mut zero_net(1), 1).unwrap();
    assert!(log.windows(2).all(|w| w[1].horizon >= w[0].horizon));
    assert_eq!(log.last().unwrap().horizon, 1.0);
}

#[test]
fn frozen_learning_rate_keeps_parameters_and_loss_level() {
    let p = moving();
    let cfg = NetConfig { out_scale: 1.0, ..NetConfig::new(ModelKind::Vector, vec![8]) };
    let mut net = VectorFieldNet::new(2, &cfg, &mut stream(12, 0)).unwrap();
    let before = net.params();
    let tc = TrainConfig {
        walkers: 512,
        steps: 8,
        iterations: 8,
        optimizer: AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
        horizon: HorizonSchedule { start: 1.0, ramp_fraction: 0.0 },
        divergence: DivergenceMode::Exact,
        grid: GridMode::Fixed,
        ..TrainConfig::default()
    };
    let log = train(&tc, &p, &mut net, 2).unwrap();
    assert_eq!(net.params(), before);
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let (m, sd) = crate::stats::mean_and_se(&losses);
    let sd = sd * (losses.len() as f64).sqrt();
    assert!(sd < 0.2 * m, "losses {losses:?}");
    // An exact frozen drift stays at zero loss.
    let mut exact = Frozen(AnalyticGaussianDrift::new(p.clone()));
    let log = train(&tc, &p, &mut exact, 3).unwrap();
    assert!(log.iter().all(|r| r.loss < 1e-8 && (r.ess - 1.0).abs() < 1e-9));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let p = anneal_1d();
    let cfg = TrainConfig {
        walkers: 32,
        steps: 4,
        iterations: 6,
        optimizer: AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let net_cfg = NetConfig::new(ModelKind::Vector, vec![8]);
    let mut a = VectorFieldNet::new(1, &net_cfg, &mut stream(13, 0)).unwrap();
    let mut b = a.clone();
    let full = train(&cfg, &p, &mut a, 4).unwrap();
    let state = {
        let mut t = Trainer::new(cfg.clone(), &p, &mut b, 4).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        serde_json::to_string(t.state()).unwrap()
    };
    let state: TrainerState = serde_json::from_str(&state).unwrap();
    let rest = Trainer::resume(cfg, &p, &mut b, 4, state).unwrap().run(|_| {}).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(full[3..], rest[..]);
}

#[test]
fn config_validation_and_serde() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig { optimizer: AdamConfig { learning_rate: -1.0, ..AdamConfig::default() }, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    let bad = TrainConfig { horizon: HorizonSchedule { start: 0.0, ramp_fraction: 0.5 }, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    let s = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"walker": 3}"#).is_err());
    let p = moving();
    let mut v = zero_net(2);
    let am = TrainConfig { objective: Objective::ActionMatching, ..TrainConfig::default() };
    assert!(Trainer::new(am, &p, &mut v, 0).is_err());
}

#[test]
fn non_finite_training_aborts_with_diagnostics() {
    let p = anneal_1d();
    let cfg = NetConfig { out_scale: 1.0, ..NetConfig::new(ModelKind::Vector, vec![4]) };
    let mut net = VectorFieldNet::new(1, &cfg, &mut stream(14, 0)).unwrap();
    let huge: Vec<f64> = net.params().iter().map(|v| v * 1e300).collect();
    net.set_params(&huge).unwrap();
    let tc = TrainConfig { walkers: 16, steps: 4, iterations: 2, ..TrainConfig::default() };
    match train(&tc, &p, &mut net, 0) {
        Err(NetsError::TrainingDiverged { iteration, .. }) => assert_eq!(iteration, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}
