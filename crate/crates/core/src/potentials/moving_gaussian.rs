use nalgebra::{DMatrix, DVector};

use super::TimePotential;
use crate::error::{NetsError, Result};
use crate::rng::{fill_normal, WalkerRng};

/// `U_t(x) = ½ (x - b_t)ᵀ A_t (x - b_t)` with `b_t = b_0 + t ḃ` and `A_t = A_0 + t Ȧ`.
///
/// `A_t` must stay symmetric positive definite on `[0, 1]` and commute with `Ȧ`
/// (checked at construction as `A_0 Ȧ = Ȧ A_0`).
#[derive(Clone, Debug)]
pub struct MovingGaussianPotential {
    b0: DVector<f64>,
    b_dot: DVector<f64>,
    a0: DMatrix<f64>,
    a_dot: DMatrix<f64>,
}

impl MovingGaussianPotential {
    pub fn new(
        b0: Vec<f64>,
        b_dot: Vec<f64>,
        a0: DMatrix<f64>,
        a_dot: DMatrix<f64>,
    ) -> Result<Self> {
        let d = b0.len();
        if d == 0 {
            return Err(NetsError::Empty("mean path"));
        }
        for len in [b_dot.len(), a0.nrows(), a0.ncols(), a_dot.nrows(), a_dot.ncols()] {
            if len != d {
                return Err(NetsError::DimensionMismatch { expected: d, got: len });
            }
        }
        let sym_tol = 1e-12 * (1.0 + a0.amax() + a_dot.amax());
        if (&a0 - a0.transpose()).amax() > sym_tol || (&a_dot - a_dot.transpose()).amax() > sym_tol {
            return Err(NetsError::InvalidParameter("precision path must be symmetric".into()));
        }
        let comm = &a0 * &a_dot - &a_dot * &a0;
        if comm.amax() > 1e-10 * (1.0 + a0.amax() * a_dot.amax()) {
            return Err(NetsError::InvalidParameter(
                "precision path must commute with its derivative".into(),
            ));
        }
        let p = Self {
            b0: DVector::from_vec(b0),
            b_dot: DVector::from_vec(b_dot),
            a0,
            a_dot,
        };
        // A_t is affine in t, so positive definiteness at both ends covers [0, 1].
        for t in [0.0, 1.0] {
            if p.precision(t).cholesky().is_none() {
                return Err(NetsError::NotPositiveDefinite(format!("precision at t = {t}")));
            }
        }
        Ok(p)
    }

    /// `A_t = a(t) I`, `b_t = t m` with `a(t) = a0 + t (a1 - a0)`.
    pub fn isotropic(dim: usize, a0: f64, a1: f64, mean_rate: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![0.0; dim],
            mean_rate,
            DMatrix::identity(dim, dim) * a0,
            DMatrix::identity(dim, dim) * (a1 - a0),
        )
    }

    pub fn mean(&self, t: f64) -> DVector<f64> {
        &self.b0 + &self.b_dot * t
    }

    pub fn mean_rate(&self) -> &DVector<f64> {
        &self.b_dot
    }

    pub fn precision(&self, t: f64) -> DMatrix<f64> {
        &self.a0 + &self.a_dot * t
    }

    pub fn precision_rate(&self) -> &DMatrix<f64> {
        &self.a_dot
    }

    /// Exact `(F_t, ∂_t F_t)`.
    pub fn reference(&self, t: f64) -> Result<(f64, f64)> {
        let a = self.precision(t);
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| NetsError::NotPositiveDefinite(format!("precision at t = {t}")))?;
        let d = self.b0.len() as f64;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let f = -0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det;
        let df = 0.5 * chol.solve(&self.a_dot).trace();
        Ok((f, df))
    }

    fn centered(&self, t: f64, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.b0.iter().zip(self.b_dot.iter()))
                .map(|(xi, (b, bd))| xi - b - t * bd),
        )
    }
}

impl TimePotential for MovingGaussianPotential {
    fn dim(&self) -> usize {
        self.b0.len()
    }

    fn energy(&self, t: f64, x: &[f64]) -> f64 {
        let r = self.centered(t, x);
        0.5 * r.dot(&(self.precision(t) * &r))
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let g = self.precision(t) * self.centered(t, x);
        out.copy_from_slice(g.as_slice());
    }

    fn dt_energy(&self, t: f64, x: &[f64]) -> f64 {
        let r = self.centered(t, x);
        -self.b_dot.dot(&(self.precision(t) * &r)) + 0.5 * r.dot(&(&self.a_dot * &r))
    }

    fn free_energy(&self, t: f64) -> Option<f64> {
        self.reference(t).ok().map(|r| r.0)
    }

    fn free_energy_rate(&self, t: f64) -> Option<f64> {
        self.reference(t).ok().map(|r| r.1)
    }

    fn sample(&self, t: f64, rng: &mut WalkerRng, out: &mut [f64]) -> Result<()> {
        let chol = self
            .precision(t)
            .cholesky()
            .ok_or_else(|| NetsError::NotPositiveDefinite(format!("precision at t = {t}")))?;
        let mut z = DVector::zeros(self.b0.len());
        fill_normal(rng, z.as_mut_slice());
        // A = L Lᵀ, so x = b + L⁻ᵀ z has covariance A⁻¹.
        let y = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| NetsError::NotPositiveDefinite("singular factor".into()))?;
        let m = self.mean(t);
        for ((o, yi), mi) in out.iter_mut().zip(y.iter()).zip(m.iter()) {
            *o = mi + yi;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::testing::derivative_mismatch;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn example() -> MovingGaussianPotential {
        MovingGaussianPotential::new(
            vec![0.5, -1.0],
            vec![1.0, 2.0],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]) * 0.7,
        )
        .unwrap()
    }

    #[test]
    fn static_standard_gaussian() {
        let p = MovingGaussianPotential::isotropic(1, 1.0, 1.0, vec![0.0]).unwrap();
        let (f, df) = p.reference(0.4).unwrap();
        assert!((f + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((f + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(df, 0.0);
    }

    #[test]
    fn scalar_trace_rate() {
        let p = MovingGaussianPotential::isotropic(1, 1.0, 2.0, vec![0.0]).unwrap();
        assert!((p.reference(0.0).unwrap().1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diagonal_example_against_numeric_logdet() {
        let p = MovingGaussianPotential::new(
            vec![0.0; 2],
            vec![0.0; 2],
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
        )
        .unwrap();
        // Oracle: F = -log(2π) + ½ log det, det computed directly; dF by central difference.
        let f_oracle = |t: f64| {
            let det = p.precision(t).determinant();
            -(2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln()
        };
        let (f1, df1) = p.reference(1.0).unwrap();
        assert!((f1 - f_oracle(1.0)).abs() < 1e-12);
        assert!((f1 + std::f64::consts::PI.ln()).abs() < 1e-12);
        let h = 1e-5;
        let fd = (f_oracle(1.0 + h) - f_oracle(1.0 - h)) / (2.0 * h);
        assert!((df1 - fd).abs() < 1e-8);
        assert!((df1 - 0.25).abs() < 1e-14);
    }

    #[test]
    fn non_commuting_path_is_rejected() {
        let r = MovingGaussianPotential::new(
            vec![0.0; 2],
            vec![0.0; 2],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.3, 0.3, 0.0]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn indefinite_path_is_rejected() {
        let r = MovingGaussianPotential::isotropic(2, 1.0, -0.5, vec![0.0; 2]);
        assert!(matches!(r, Err(NetsError::NotPositiveDefinite(_))));
    }

    #[test]
    fn dt_energy_closed_form() {
        let p = example();
        let x = [0.3, 0.7];
        let t = 0.37;
        // Independent evaluation of -ḃᵀA(x-b) + ½(x-b)ᵀȦ(x-b) with plain arrays.
        let a = p.precision(t);
        let b = p.mean(t);
        let r = [x[0] - b[0], x[1] - b[1]];
        let ar = [a[(0, 0)] * r[0] + a[(0, 1)] * r[1], a[(1, 0)] * r[0] + a[(1, 1)] * r[1]];
        let ad = p.precision_rate();
        let adr = [ad[(0, 0)] * r[0] + ad[(0, 1)] * r[1], ad[(1, 0)] * r[0] + ad[(1, 1)] * r[1]];
        let expected = -(1.0 * ar[0] + 2.0 * ar[1]) + 0.5 * (r[0] * adr[0] + r[1] * adr[1]);
        assert!((p.dt_energy(t, &x) - expected).abs() < 1e-10);
    }

    #[test]
    fn free_energy_identity_by_monte_carlo() {
        // ∂_t F_t = E_{ρ_t}[∂_t U_t].
        let p = example();
        let t = 0.6;
        let mut rng = stream(11, 0);
        let n = 200_000;
        let mut x = [0.0; 2];
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                p.sample(t, &mut rng, &mut x).unwrap();
                p.dt_energy(t, &x)
            })
            .collect();
        let (m, se) = crate::stats::mean_and_se(&vals);
        let df = p.reference(t).unwrap().1;
        assert!((m - df).abs() < 3.0 * se, "{m} vs {df} (se {se})");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn derivatives_match_finite_differences(t in 0.01f64..0.99, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0) {
            let (g, dt) = derivative_mismatch(&example(), t, &[x0, x1]);
            prop_assert!(g < 1e-4 && dt < 1e-4);
        }
    }
}
