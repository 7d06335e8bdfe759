use ndarray::Array2;

use super::*;
use crate::drift::{AnalyticGaussianDrift, QuadraticPotentialDrift, ZeroDrift};
use crate::ensemble::{log_partition_ratio_with_se, weighted_mean};
use crate::potentials::{IsotropicGaussian, LinearInterpolation, MovingGaussianPotential, StaticPotential};
use crate::rng::{fill_normal, stream};
use crate::stats::{ks_two_sample, mean_and_se};

fn anneal_1d() -> LinearInterpolation<IsotropicGaussian, IsotropicGaussian> {
    LinearInterpolation::new(
        IsotropicGaussian::centered(1, 1.0).unwrap(),
        IsotropicGaussian::centered(1, 2.0).unwrap(),
    )
    .unwrap()
}

fn static_gaussian(d: usize) -> StaticPotential<IsotropicGaussian> {
    StaticPotential(IsotropicGaussian::centered(d, 1.0).unwrap())
}

fn moving() -> MovingGaussianPotential {
    MovingGaussianPotential::isotropic(2, 1.0, 2.0, vec![1.0, 0.0]).unwrap()
}

fn eps(e: f64) -> DiffusionSchedule {
    DiffusionSchedule::constant(e)
}

const EXACT: DivergenceMode = DivergenceMode::Exact;

fn run_overdamped<P: TimePotential, M: DriftModel>(ens: &mut WalkerEnsemble, p: &P, m: &M, e: f64, k: usize) {
    let grid = TimeGrid::uniform(k, 1.0).unwrap();
    for w in grid.knots().windows(2) {
        step_overdamped(ens, p, m, &eps(e), w[1] - w[0], EXACT).unwrap();
        ens.set_time(w[1]);
    }
}

fn log_z_reference<P: TimePotential>(p: &P) -> f64 {
    p.free_energy(0.0).unwrap() - p.free_energy(1.0).unwrap()
}

#[test]
fn zero_drift_zero_noise_only_accumulates() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 50, 1).unwrap();
    let x0 = ens.positions().to_owned();
    step_overdamped(&mut ens, &p, &ZeroDrift::new(1), &eps(0.0), 0.01, EXACT).unwrap();
    assert_eq!(ens.positions(), x0.view());
    for (a, x) in ens.log_weights().iter().zip(x0.iter()) {
        assert_eq!(*a, -p.dt_energy(0.0, &[*x]) * 0.01);
    }
    assert_eq!(ens.time(), 0.01);
}

#[test]
fn static_potential_keeps_weights() {
    let p = static_gaussian(3);
    let mut ens = WalkerEnsemble::sample_initial(&p, 100, 2).unwrap();
    run_overdamped(&mut ens, &p, &ZeroDrift::new(3), 1.0, 20);
    assert!(ens.log_weights().iter().all(|a| *a == 0.0));
}

/// Independent annealed-importance-sampling loop with the same streams.
#[test]
fn zero_drift_matches_reference_bitwise() {
    let p = anneal_1d();
    let (n, k, e) = (64, 50, 0.7);
    let mut ens = WalkerEnsemble::sample_initial(&p, n, 3).unwrap();
    let mut xs: Vec<f64> = ens.positions().iter().copied().collect();
    let mut a = vec![0.0; n];
    let mut rngs = crate::rng::walker_streams(3, n);
    for (r, x) in rngs.iter_mut().zip(xs.iter_mut()) {
        p.sample(0.0, r, std::slice::from_mut(x)).unwrap();
    }
    run_overdamped(&mut ens, &p, &ZeroDrift::new(1), e, k);
    let grid = TimeGrid::uniform(k, 1.0).unwrap();
    for w in grid.knots().windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        for i in 0..n {
            let mut g = [0.0];
            p.grad(t, &[xs[i]], &mut g);
            a[i] += -p.dt_energy(t, &[xs[i]]) * dt;
            let z = crate::rng::normal(&mut rngs[i]);
            xs[i] = xs[i] + (-e * g[0] + 0.0) * dt + (2.0 * e * dt).sqrt() * z;
        }
    }
    for i in 0..n {
        assert_eq!(ens.positions()[[i, 0]].to_bits(), xs[i].to_bits());
        assert_eq!(ens.log_weights()[i].to_bits(), a[i].to_bits());
    }
}

#[test]
fn exact_gaussian_drift_gives_deterministic_weights() {
    let p = moving();
    let target = p.free_energy(0.0).unwrap() - p.free_energy(1.0).unwrap();
    let drift = AnalyticGaussianDrift::new(p.clone());
    let mut ens = WalkerEnsemble::sample_initial(&p, 1000, 4).unwrap();
    run_overdamped(&mut ens, &p, &drift, 1.0, 1000);
    let (_, sd) = spread(ens.log_weights());
    for a in ens.log_weights() {
        assert!((a - target).abs() < 5e-2, "A = {a}, target {target}");
    }
    assert!(sd < 5e-2, "sd = {sd}");
}

fn spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[test]
fn unbiased_second_moment_fine_grid() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 100_000, 5).unwrap();
    run_overdamped(&mut ens, &p, &ZeroDrift::new(1), 1.0, 1000);
    let (m, se) = ens.weighted_expectation(|x| x[0] * x[0]).unwrap();
    assert!((m - 4.0).abs() < 3.0 * se, "E[x²] = {m} ± {se}");
}

fn discrete_rollout<P: TimePotential, M: DriftModel>(
    p: &P,
    m: &M,
    n: usize,
    k: usize,
    e: f64,
    seed: u64,
) -> WalkerEnsemble {
    let mut ens = WalkerEnsemble::sample_initial(p, n, seed).unwrap();
    let grid = TimeGrid::uniform(k, 1.0).unwrap();
    for w in grid.knots().windows(2) {
        step_discrete_weights(&mut ens, p, m, &eps(e), w[1] - w[0]).unwrap();
        ens.set_time(w[1]);
    }
    ens
}

#[test]
fn discrete_static_one_step_exponential_mean() {
    let p = static_gaussian(1);
    let ens = discrete_rollout(&p, &ZeroDrift::new(1), 1_000_000, 1, 0.8, 6);
    let w: Vec<f64> = ens.log_weights().iter().map(|a| a.exp()).collect();
    let (m, se) = mean_and_se(&w);
    assert!((m - 1.0).abs() < 3.0 * se, "E[e^A] = {m} ± {se}");
}

#[test]
fn discrete_static_unbiased_at_all_step_counts() {
    // Coarse steps with a non-trivial drift keep the weights genuinely random.
    let p = static_gaussian(2);
    let drift = QuadraticPotentialDrift::new(2, 0.5);
    for (k, seed) in [(1, 7), (10, 8), (100, 9)] {
        let ens = discrete_rollout(&p, &drift, 100_000, k, 1.0, seed);
        let w: Vec<f64> = ens.log_weights().iter().map(|a| a.exp()).collect();
        let (m, se) = mean_and_se(&w);
        assert!((m - 1.0).abs() < 3.0 * se, "K = {k}: E[e^A] = {m} ± {se}");
    }
}

#[test]
fn discrete_coarse_anneal_recovers_log_z() {
    let p = anneal_1d();
    let ens = discrete_rollout(&p, &ZeroDrift::new(1), 10_000, 100, 1.0, 10);
    let (lz, se) = log_partition_ratio_with_se(ens.log_weights()).unwrap();
    let exact = 0.5 * 4f64.ln();
    assert!((lz - exact).abs() < 3.0 * se, "log Z = {lz} ± {se}, exact {exact}");
    assert!((log_z_reference(&p) - exact).abs() < 1e-12);
}

#[test]
fn discrete_increment_converges_to_continuous() {
    let p = anneal_1d();
    let drift = QuadraticPotentialDrift::new(1, 0.3);
    let gap = |dt: f64| {
        let start = |seed| {
            let mut e = WalkerEnsemble::sample_initial(&p, 2000, seed).unwrap();
            e.set_time(0.3);
            e
        };
        let mut a = start(11);
        let mut b = start(11);
        step_overdamped(&mut a, &p, &drift, &eps(1.0), dt, EXACT).unwrap();
        step_discrete_weights(&mut b, &p, &drift, &eps(1.0), dt).unwrap();
        assert_eq!(a.positions(), b.positions());
        let diffs: Vec<f64> =
            a.log_weights().iter().zip(b.log_weights()).map(|(x, y)| (x - y).abs()).collect();
        diffs.iter().sum::<f64>() / diffs.len() as f64
    };
    let g: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|dt| gap(*dt)).collect();
    for w in g.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 5.0, "gaps {g:?}");
    }
}

#[test]
fn perfect_drift_variance_shrinks_with_dt() {
    let p = moving();
    let drift = AnalyticGaussianDrift::new(p.clone());
    let var = |k| {
        let ens = discrete_rollout(&p, &drift, 4000, k, 1.0, 12);
        spread(ens.log_weights()).1.powi(2)
    };
    let ratio = var(50) / var(100);
    assert!((1.5..=3.0).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn discrete_rejects_zero_diffusion() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 4, 0).unwrap();
    let r = step_discrete_weights(&mut ens, &p, &ZeroDrift::new(1), &eps(0.0), 0.1);
    assert!(matches!(r, Err(NetsError::ZeroDiffusion(_))));
}

#[test]
fn step_past_one_is_rejected() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 4, 0).unwrap();
    ens.set_time(0.95);
    assert!(step_overdamped(&mut ens, &p, &ZeroDrift::new(1), &eps(1.0), 0.1, EXACT).is_err());
    assert!(step_overdamped(&mut ens, &p, &ZeroDrift::new(1), &eps(1.0), 0.0, EXACT).is_err());
}

#[test]
fn inertial_zero_mobility_is_an_ode() {
    let p = anneal_1d();
    let c = 0.4;
    let drift = QuadraticPotentialDrift::new(1, c);
    let mut ens = WalkerEnsemble::sample_initial(&p, 32, 13).unwrap();
    let x0: Vec<f64> = ens.positions().iter().copied().collect();
    let mut state = InertialState::sample(&mut ens, 0.0).unwrap();
    let k = 100;
    let dt = 1.0 / k as f64;
    for _ in 0..k {
        step_inertial(&mut ens, &mut state, &p, &drift, &eps(1.0), dt, EXACT).unwrap();
    }
    assert!(state.momenta.iter().all(|r| *r == 0.0));
    for (x, x0) in ens.positions().iter().zip(&x0) {
        let mut y = *x0;
        for _ in 0..k {
            y = y + (c * y + 0.0) * dt;
        }
        assert_eq!(*x, y);
    }
}

#[test]
fn inertial_relaxes_to_static_target() {
    let p = static_gaussian(1);
    let n = 2000;
    let mut start = Array2::zeros((n, 1));
    let mut r = stream(14, 99);
    for v in start.iter_mut() {
        *v = 2.0 + 0.5 * crate::rng::normal(&mut r);
    }
    let mut ens = WalkerEnsemble::from_positions(start, 14).unwrap();
    let mut state = InertialState::sample(&mut ens, 1e4).unwrap();
    let k = 50_000;
    let dt = 1.0 / k as f64;
    for _ in 0..k {
        step_inertial(&mut ens, &mut state, &p, &ZeroDrift::new(1), &eps(10.0), dt, EXACT).unwrap();
    }
    let got: Vec<f64> = ens.positions().iter().copied().collect();
    let mut direct = vec![0.0; n];
    fill_normal(&mut stream(15, 0), &mut direct);
    let (dstat, pval) = ks_two_sample(&got, &direct);
    assert!(pval > 0.01, "KS D = {dstat}, p = {pval}");
}

#[test]
fn inertial_exact_drift_weights() {
    let p = moving();
    let target = log_z_reference(&p);
    let drift = AnalyticGaussianDrift::new(p.clone());
    let mut ens = WalkerEnsemble::sample_initial(&p, 500, 16).unwrap();
    let mut state = InertialState::sample(&mut ens, 1.0).unwrap();
    for _ in 0..1000 {
        step_inertial(&mut ens, &mut state, &p, &drift, &eps(1.0), 1e-3, EXACT).unwrap();
    }
    for a in ens.log_weights() {
        assert!((a - target).abs() < 5e-2, "A = {a}, target {target}");
    }
}

#[test]
fn phi_form_zero_potential_matches_overdamped_bitwise() {
    let p = anneal_1d();
    let mut a = WalkerEnsemble::sample_initial(&p, 64, 17).unwrap();
    let mut b = a.clone();
    for _ in 0..10 {
        step_overdamped(&mut a, &p, &ZeroDrift::new(1), &eps(0.5), 0.05, EXACT).unwrap();
        step_phi_form(&mut b, &p, &ZeroDrift::new(1), &eps(0.5), 0.05).unwrap();
    }
    assert_eq!(a.positions(), b.positions());
    for (x, y) in a.log_weights().iter().zip(b.log_weights()) {
        assert_eq!(x, y);
    }
}

#[test]
fn phi_form_agrees_with_divergence_form_to_first_order() {
    let p = anneal_1d();
    let drift = QuadraticPotentialDrift::new(1, 1.0);
    let gap = |dt: f64| {
        let mut a = WalkerEnsemble::sample_initial(&p, 1000, 18).unwrap();
        let mut b = a.clone();
        step_overdamped(&mut a, &p, &drift, &eps(1.0), dt, EXACT).unwrap();
        step_phi_form(&mut b, &p, &drift, &eps(1.0), dt).unwrap();
        let d: Vec<f64> = a.log_weights().iter().zip(b.log_weights()).map(|(x, y)| (x - y).abs()).collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    for dt in [1e-2, 1e-3] {
        let g = gap(dt);
        assert!(g < 10.0 * dt, "mean gap {g} at dt = {dt}");
    }
    let ratio = gap(1e-2) / gap(1e-3);
    assert!(ratio > 5.0, "ratio {ratio}");
}

#[test]
fn phi_form_exact_gaussian_potential() {
    let p = moving();
    let target = log_z_reference(&p);
    let drift = AnalyticGaussianDrift::new(p.clone());
    let mut ens = WalkerEnsemble::sample_initial(&p, 1000, 19).unwrap();
    for _ in 0..1000 {
        step_phi_form(&mut ens, &p, &drift, &eps(1.0), 1e-3).unwrap();
    }
    let (m, sd) = spread(ens.log_weights());
    assert!((m - target).abs() < 5e-2, "mean A = {m}, target {target}");
    assert!(sd < 5e-2, "sd = {sd}");
}

#[test]
fn phi_form_needs_scalar_potential() {
    struct Vector;
    impl DriftModel for Vector {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _t: f64, _x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
            out.fill(1.0);
        }
    }
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 4, 0).unwrap();
    assert!(matches!(
        step_phi_form(&mut ens, &p, &Vector, &eps(1.0), 0.1),
        Err(NetsError::Unsupported(_))
    ));
    assert!(matches!(
        step_phi_form(&mut ens, &p, &ZeroDrift::new(1), &eps(0.0), 0.1),
        Err(NetsError::ZeroDiffusion(_))
    ));
}

/// Drift that blows up for positive coordinates.
struct Exploding;
impl DriftModel for Exploding {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, x: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>) {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o = if *v > 0.0 { f64::NAN } else { 0.0 };
        }
    }
    fn exact_divergence(&self, _t: f64, _x: ArrayView2<'_, f64>, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|o| *o = 0.0);
        true
    }
}

#[test]
fn non_finite_drift_quarantines_walkers() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 200, 20).unwrap();
    let before = ens.positions().to_owned();
    step_overdamped(&mut ens, &p, &Exploding, &eps(1.0), 0.01, EXACT).unwrap();
    let bad: Vec<usize> = (0..200).filter(|&i| before[[i, 0]] > 0.0).collect();
    assert_eq!(ens.quarantined().len(), bad.len());
    for &i in &bad {
        assert!(!ens.is_alive(i));
        assert_eq!(ens.positions()[[i, 0]], before[[i, 0]]);
    }
    assert!(ens.positions().iter().all(|v| v.is_finite()));
    // Dead walkers are not reported twice.
    step_overdamped(&mut ens, &p, &Exploding, &eps(1.0), 0.01, EXACT).unwrap();
    assert!(ens.quarantined().len() >= bad.len());
    let mut seen = std::collections::HashSet::new();
    assert!(ens.quarantined().iter().all(|q| seen.insert(q.walker)));
}

#[test]
fn independent_of_thread_count() {
    let p = moving();
    let drift = QuadraticPotentialDrift::new(2, -0.2);
    let run = || {
        let mut ens = WalkerEnsemble::sample_initial(&p, 300, 21).unwrap();
        let cfg = RolloutConfig {
            eps: eps(1.0),
            divergence: DivergenceMode::EVALUATION,
            resample_threshold: Some(0.9),
            ..RolloutConfig::default()
        };
        rollout(&mut ens, &p, &drift, &TimeGrid::uniform(20, 1.0).unwrap(), &cfg).unwrap();
        ens
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
    assert_eq!(one.positions(), many.positions());
    assert_eq!(one.log_weights(), many.log_weights());
}

#[test]
fn rollout_records_curves_and_resamples() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 1000, 22).unwrap();
    let cfg = RolloutConfig {
        eps: eps(1.0),
        resample_threshold: Some(0.999),
        record_slices: true,
        ..RolloutConfig::default()
    };
    let grid = TimeGrid::randomized(200, 1.0, &mut stream(22, 0)).unwrap();
    let out = rollout(&mut ens, &p, &ZeroDrift::new(1), &grid, &cfg).unwrap();
    assert_eq!(out.ess.len(), 201);
    assert_eq!(out.slices.len(), 201);
    assert_eq!(out.slices[200].t, 1.0);
    assert_eq!(ens.time(), 1.0);
    assert!(!out.resample_times.is_empty());
    let (_, lz) = out.log_z[200];
    assert!((lz - 2f64.ln()).abs() < 0.05, "log Z = {lz}");
    let (m, se) = weighted_mean(
        &ens.positions().iter().map(|x| x * x).collect::<Vec<_>>(),
        ens.log_weights(),
    )
    .unwrap();
    assert!((m - 4.0).abs() < 4.0 * se + 0.05, "E[x²] = {m} ± {se}");
}

#[test]
fn rollout_inertial_reorders_momenta() {
    let p = anneal_1d();
    let mut ens = WalkerEnsemble::sample_initial(&p, 200, 23).unwrap();
    let cfg = RolloutConfig {
        eps: eps(1.0),
        dynamics: Dynamics::Inertial { mobility: 2.0 },
        resample_threshold: Some(0.999),
        ..RolloutConfig::default()
    };
    let out = rollout(&mut ens, &p, &ZeroDrift::new(1), &TimeGrid::uniform(20, 1.0).unwrap(), &cfg).unwrap();
    assert_eq!(out.inertial.unwrap().momenta.nrows(), 200);
    let bad = RolloutConfig { scheme: WeightScheme::Discrete, ..cfg };
    let mut ens = WalkerEnsemble::sample_initial(&p, 10, 23).unwrap();
    assert!(rollout(&mut ens, &p, &ZeroDrift::new(1), &TimeGrid::uniform(2, 1.0).unwrap(), &bad).is_err());
}

#[test]
fn rollout_config_round_trips() {
    let cfg = RolloutConfig {
        eps: DiffusionSchedule::Ramp { eps: 2.0, width: 0.1 },
        scheme: WeightScheme::PhiForm,
        dynamics: Dynamics::Inertial { mobility: 0.5 },
        divergence: DivergenceMode::TRAINING,
        resample_threshold: Some(0.7),
        record_slices: true,
        resample_seed: 9,
    };
    let s = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RolloutConfig>(&s).unwrap(), cfg);
}
