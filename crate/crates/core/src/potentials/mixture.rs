use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use statrs::function::gamma::ln_gamma;

use super::{Energy, TimePotential};
use crate::error::{NetsError, Result};
use crate::rng::{fill_normal, stream, WalkerRng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Means of the 40-mode 2-d benchmark mixture.
pub fn fab_gmm40_means() -> Vec<Vec<f64>> {
    const M: [[f64; 2]; 40] = [
        [-0.2995, 21.4577],
        [-32.9218, -29.4376],
        [-15.4062, 10.7263],
        [-0.7925, 31.7156],
        [-3.5498, 10.5845],
        [-12.0885, -7.8626],
        [-38.2139, -26.4913],
        [-16.4889, 1.4817],
        [15.8134, 24.0009],
        [-27.1176, -17.4185],
        [14.5287, 33.2155],
        [-8.2320, 29.9325],
        [-6.4473, 4.2326],
        [36.2190, -37.1068],
        [-25.1815, -10.1266],
        [-15.5920, 34.5600],
        [-25.9272, -18.4133],
        [-27.9456, -37.4624],
        [-23.3496, 34.3839],
        [17.8487, 19.3869],
        [2.1037, -20.5073],
        [6.7674, -37.3478],
        [-28.9026, -20.6212],
        [25.2375, 23.4529],
        [-17.7398, -1.4433],
        [25.5824, 39.7653],
        [15.8753, 5.4037],
        [26.8195, -23.5521],
        [7.4538, -31.0122],
        [-27.7234, -20.6633],
        [18.0989, 16.0864],
        [-23.6941, 12.0843],
        [21.9589, -5.0487],
        [1.5273, 9.2682],
        [24.8151, 38.4078],
        [-30.8249, -14.6588],
        [15.7204, 33.1420],
        [34.8083, 35.2943],
        [7.9606, -34.7833],
        [3.6797, -25.0242],
    ];
    M.iter().map(|m| m.to_vec()).collect()
}

/// Component scale of the 40-mode mixture: `softplus(1)`.
pub const GMM40_SCALE: f64 = 1.313_261_687_518_222_8;

/// `n` means equally spaced on a circle of `radius` in the first two coordinates.
pub fn circle_means(n: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `n` means drawn uniformly from `[lo, hi]^d` with a fixed seed.
pub fn random_box_means(seed: u64, n: usize, dim: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, u64::MAX);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(lo..hi)).collect())
        .collect()
}

fn validate_means(means: &[Vec<f64>]) -> Result<usize> {
    let d = means.first().ok_or(NetsError::Empty("mixture means"))?.len();
    if d == 0 {
        return Err(NetsError::Empty("mixture mean"));
    }
    if let Some(bad) = means.iter().find(|m| m.len() != d) {
        return Err(NetsError::DimensionMismatch { expected: d, got: bad.len() });
    }
    Ok(d)
}

fn log_weights(weights: Option<Vec<f64>>, n: usize) -> Result<Vec<f64>> {
    let w = weights.unwrap_or_else(|| vec![1.0; n]);
    if w.len() != n {
        return Err(NetsError::DimensionMismatch { expected: n, got: w.len() });
    }
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(NetsError::InvalidParameter("mixture weights must be finite and >= 0".into()));
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return Err(NetsError::InvalidParameter("mixture weights sum to zero".into()));
    }
    Ok(w.iter().map(|v| (v / s).ln()).collect())
}

fn pick_component(log_w: &[f64], rng: &mut WalkerRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lw) in log_w.iter().enumerate() {
        acc += lw.exp();
        if u < acc {
            return i;
        }
    }
    log_w.len() - 1
}

/// Normalizes `v` in place into softmax probabilities and returns the log-sum-exp.
fn softmax_in_place(v: &mut [f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|a| (a - m).exp()).sum();
    let lse = m + s.ln();
    for a in v.iter_mut() {
        *a = (*a - lse).exp();
    }
    lse
}

/// Normalized isotropic Gaussian mixture, `U = -log Σ w_i N(x; μ_i, σ² I)`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    sigma: f64,
    log_w: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64, weights: Option<Vec<f64>>) -> Result<Self> {
        validate_means(&means)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(NetsError::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
        }
        let log_w = log_weights(weights, means.len())?;
        Ok(Self { means, sigma, log_w })
    }

    pub fn gmm40() -> Self {
        Self::new(fab_gmm40_means(), GMM40_SCALE, None).expect("static parameters")
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        let s2 = self.sigma * self.sigma;
        let c = -0.5 * d * (LN_2PI + s2.ln());
        for ((o, m), lw) in out.iter_mut().zip(&self.means).zip(&self.log_w) {
            let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
            *o = lw + c - 0.5 * r2 / s2;
        }
    }
}

impl Energy for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let mut l = vec![0.0; self.means.len()];
        self.component_logs(x, &mut l);
        -softmax_in_place(&mut l)
    }

    fn grad(&self, x: &[f64], out: &mut [f64]) {
        let mut r = vec![0.0; self.means.len()];
        self.component_logs(x, &mut r);
        softmax_in_place(&mut r);
        let s2 = self.sigma * self.sigma;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (ri, m) in r.iter().zip(&self.means) {
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(m) {
                *o += ri * (xi - mi) / s2;
            }
        }
    }

    fn free_energy(&self) -> Option<f64> {
        Some(0.0)
    }

    fn sample(&self, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        let k = pick_component(&self.log_w, rng);
        fill_normal(rng, out);
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = m + self.sigma * *o;
        }
        Ok(())
    }
}

/// Component family of a [`MixturePath`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComponentKind {
    /// Gaussian with scale moving linearly from `sigma0` to `sigma1`.
    Gaussian { sigma0: f64, sigma1: f64 },
    /// Multivariate Student-t with `nu` degrees of freedom and fixed `scale`.
    StudentT { nu: f64, scale: f64 },
}

/// Mixture whose component locations move as `t μ_i` from a common origin.
///
/// Every `ρ_t` is a normalized density, so `F_t = 0` for all `t`.
#[derive(Clone, Debug)]
pub struct MixturePath {
    means: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    kind: ComponentKind,
}

impl MixturePath {
    pub fn new(means: Vec<Vec<f64>>, weights: Option<Vec<f64>>, kind: ComponentKind) -> Result<Self> {
        validate_means(&means)?;
        match kind {
            ComponentKind::Gaussian { sigma0, sigma1 } => {
                if !(sigma0 > 0.0 && sigma1 > 0.0 && sigma0.is_finite() && sigma1.is_finite()) {
                    return Err(NetsError::InvalidParameter("component scales must be > 0".into()));
                }
            }
            ComponentKind::StudentT { nu, scale } => {
                if !(nu > 0.0 && scale > 0.0 && nu.is_finite() && scale.is_finite()) {
                    return Err(NetsError::InvalidParameter(
                        "student-t needs nu > 0 and scale > 0".into(),
                    ));
                }
            }
        }
        let log_w = log_weights(weights, means.len())?;
        Ok(Self { means, log_w, kind })
    }

    /// Mean-interpolated Gaussian mixture with constant scale.
    pub fn gaussian(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        Self::new(means, None, ComponentKind::Gaussian { sigma0: sigma, sigma1: sigma })
    }

    /// Ten Student-t components with `nu = 2` in `dim` dimensions, means in `[-10, 10]^d`.
    pub fn mixture_of_student_t(dim: usize, seed: u64) -> Result<Self> {
        Self::new(
            random_box_means(seed, 10, dim, -10.0, 10.0),
            None,
            ComponentKind::StudentT { nu: 2.0, scale: 1.0 },
        )
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn kind(&self) -> ComponentKind {
        self.kind
    }

    /// Component scale at time `t` (Gaussian) or the fixed scale (Student-t).
    pub fn scale(&self, t: f64) -> f64 {
        match self.kind {
            ComponentKind::Gaussian { sigma0, sigma1 } => (1.0 - t) * sigma0 + t * sigma1,
            ComponentKind::StudentT { scale, .. } => scale,
        }
    }

    fn scale_rate(&self) -> f64 {
        match self.kind {
            ComponentKind::Gaussian { sigma0, sigma1 } => sigma1 - sigma0,
            ComponentKind::StudentT { .. } => 0.0,
        }
    }

    /// Log of `w_i p_i(x)` for each component.
    fn component_logs(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        let s = self.scale(t);
        let c = match self.kind {
            ComponentKind::Gaussian { .. } => -0.5 * d * (LN_2PI + 2.0 * s.ln()),
            ComponentKind::StudentT { nu, .. } => {
                ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu)
                    - 0.5 * d * (nu * std::f64::consts::PI).ln()
                    - d * s.ln()
            }
        };
        for ((o, m), lw) in out.iter_mut().zip(&self.means).zip(&self.log_w) {
            let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - t * b).powi(2)).sum();
            *o = lw + c + match self.kind {
                ComponentKind::Gaussian { .. } => -0.5 * r2 / (s * s),
                ComponentKind::StudentT { nu, .. } => {
                    -0.5 * (nu + d) * (r2 / (nu * s * s)).ln_1p()
                }
            };
        }
    }

    /// Posterior component probabilities `p_i(t, x)`.
    pub fn responsibilities(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.component_logs(t, x, out);
        softmax_in_place(out);
    }

    /// `∇ U` and `∂_t U` from one pass over the components.
    fn grad_dt_inner(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = x.len() as f64;
        let mut r = vec![0.0; self.means.len()];
        self.responsibilities(t, x, &mut r);
        let s = self.scale(t);
        let s_dot = self.scale_rate();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut dt = 0.0;
        for (ri, m) in r.iter().zip(&self.means) {
            let r2: f64 = x.iter().zip(m).map(|(a, b)| (a - t * b).powi(2)).sum();
            let rm: f64 = x.iter().zip(m).map(|(a, b)| (a - t * b) * b).sum();
            // `coef` is -d log p / d r² times 2, so ∇(-log p) = coef · (x - tμ).
            let coef = match self.kind {
                ComponentKind::Gaussian { .. } => 1.0 / (s * s),
                ComponentKind::StudentT { nu, .. } => (nu + d) / (nu * s * s + r2),
            };
            for ((g, xi), mi) in grad.iter_mut().zip(x).zip(m) {
                *g += ri * coef * (xi - t * mi);
            }
            let dlogp_dt = coef * rm
                + match self.kind {
                    ComponentKind::Gaussian { .. } => -d * s_dot / s + r2 * s_dot / (s * s * s),
                    ComponentKind::StudentT { .. } => 0.0,
                };
            dt -= ri * dlogp_dt;
        }
        dt
    }
}

impl TimePotential for MixturePath {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        let mut l = vec![0.0; self.means.len()];
        self.component_logs(t, x, &mut l);
        -softmax_in_place(&mut l)
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.grad_dt_inner(t, x, out);
    }

    fn dt_energy(&self, t: f64, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.grad_dt_inner(t, x, &mut g)
    }

    fn grad_and_dt(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        self.grad_dt_inner(t, x, grad)
    }

    fn free_energy(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }

    fn free_energy_rate(&self, _t: f64) -> Option<f64> {
        Some(0.0)
    }

    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        let k = pick_component(&self.log_w, rng);
        let s = self.scale(t);
        let mult = match self.kind {
            ComponentKind::Gaussian { .. } => s,
            ComponentKind::StudentT { nu, .. } => {
                let chi = ChiSquared::new(nu)
                    .map_err(|e| NetsError::InvalidParameter(e.to_string()))?;
                s / (chi.sample(rng) / nu).sqrt()
            }
        };
        fill_normal(rng, out);
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = t * m + mult * *o;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::testing::derivative_mismatch;
    use crate::potentials::{IsotropicGaussian, LinearInterpolation};
    use proptest::prelude::*;

    /// Direct mixture log-density: explicit loop with its own log-sum-exp.
    fn oracle_logpdf(means: &[Vec<f64>], sigma: f64, x: &[f64]) -> f64 {
        let n = means.len() as f64;
        let terms: Vec<f64> = means
            .iter()
            .map(|m| {
                let mut q = 0.0;
                for i in 0..x.len() {
                    q += (x[i] - m[i]) * (x[i] - m[i]);
                }
                -(n.ln()) - (x.len() as f64) * (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
                    - q / (2.0 * sigma * sigma)
            })
            .collect();
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + terms.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }

    #[test]
    fn gmm40_endpoint_matches_direct_logpdf() {
        let u = LinearInterpolation::new(
            IsotropicGaussian::centered(2, 2.0).unwrap(),
            GaussianMixture::gmm40(),
        )
        .unwrap();
        let means = fab_gmm40_means();
        for x in [vec![-0.2995, 21.4577], vec![0.0, 0.0], vec![30.0, -30.0]] {
            let want = -oracle_logpdf(&means, GMM40_SCALE, &x);
            assert!((u.energy(1.0, &x) - want).abs() < 1e-8);
        }
    }

    #[test]
    fn gmm40_scale_is_softplus_one() {
        assert!((GMM40_SCALE - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn gmm_energy_finite_far_away() {
        let g = GaussianMixture::gmm40();
        assert!(g.energy(&[1e6, -1e6]).is_finite());
        let p = MixturePath::mixture_of_student_t(50, 0).unwrap();
        assert!(p.energy(0.5, &vec![1e8; 50]).is_finite());
    }

    #[test]
    fn student_t_1d_matches_closed_form() {
        // Single component, nu = 2, d = 1: p(x) = (2 + x²)^{-3/2}.
        let p = MixturePath::new(vec![vec![3.0]], None, ComponentKind::StudentT { nu: 2.0, scale: 1.0 }).unwrap();
        for x in [-2.0, 0.0, 0.7, 5.0] {
            let y: f64 = x - 1.5;
            let want = -(-1.5 * (2.0 + y * y).ln());
            assert!((p.energy(0.5, &[x]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn student_t_normalized_in_1d() {
        let p = MixturePath::new(vec![vec![1.0]], None, ComponentKind::StudentT { nu: 2.0, scale: 1.3 }).unwrap();
        // Trapezoid on a wide grid plus the analytic tail mass beyond ±L.
        let l = 2000.0;
        let n = 400_000;
        let h = 2.0 * l / n as f64;
        let mut z = 0.0;
        for i in 0..=n {
            let x = -l + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            z += w * (-p.energy(0.0, &[x])).exp() * h;
        }
        // nu = 2 has the closed-form tail P(|X| > L) = 1 - L / sqrt(L² + 2s²).
        let tail = 1.0 - l / (l * l + 2.0 * 1.3f64.powi(2)).sqrt();
        assert!((z + tail - 1.0).abs() < 1e-5, "{z}");
    }

    #[test]
    fn circle_means_radius() {
        for m in circle_means(8, 10.0) {
            assert!((m[0].hypot(m[1]) - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_weights_rejected() {
        assert!(GaussianMixture::new(circle_means(3, 1.0), 1.0, Some(vec![1.0, -1.0, 1.0])).is_err());
        assert!(GaussianMixture::new(circle_means(3, 1.0), 1.0, Some(vec![1.0])).is_err());
    }

    fn gaussian_path() -> MixturePath {
        MixturePath::new(
            circle_means(4, 3.0),
            Some(vec![1.0, 2.0, 3.0, 4.0]),
            ComponentKind::Gaussian { sigma0: 2.0, sigma1: 0.8 },
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn gaussian_path_derivatives(t in 0.01f64..0.99, x0 in -6.0f64..6.0, x1 in -6.0f64..6.0) {
            let (g, dt) = derivative_mismatch(&gaussian_path(), t, &[x0, x1]);
            prop_assert!(g < 1e-4 && dt < 1e-4, "{} {}", g, dt);
        }

        #[test]
        fn student_path_derivatives(t in 0.01f64..0.99, x in proptest::collection::vec(-12.0f64..12.0, 5)) {
            let p = MixturePath::mixture_of_student_t(5, 3).unwrap();
            let (g, dt) = derivative_mismatch(&p, t, &x);
            prop_assert!(g < 1e-4 && dt < 1e-4, "{} {}", g, dt);
        }

        #[test]
        fn gmm40_interpolation_derivatives(t in 0.01f64..0.99, x0 in -40.0f64..40.0, x1 in -40.0f64..40.0) {
            let u = LinearInterpolation::new(
                IsotropicGaussian::centered(2, 2.0).unwrap(),
                GaussianMixture::gmm40(),
            ).unwrap();
            let (g, dt) = derivative_mismatch(&u, t, &[x0, x1]);
            prop_assert!(g < 1e-4 && dt < 1e-4, "{} {}", g, dt);
        }
    }
}
