use ndarray::{array, Array2};
use proptest::prelude::*;

use super::*;
use crate::rng::{fill_normal, stream};

fn cloud(n: usize, d: usize, seed: u64, shift: f64) -> Array2<f64> {
    let mut x = Array2::zeros((n, d));
    fill_normal(&mut stream(seed, 0), x.as_slice_mut().unwrap());
    x + shift
}

fn brute_w2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut idx, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| sq_dist(a.row(i), b.row(j))).sum();
        best = best.min(c);
    });
    (best / n as f64).sqrt()
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn w2_examples() {
    let a = cloud(10, 3, 1, 0.0);
    assert_eq!(w2_distance(a.view(), a.view()).unwrap().value, 0.0);
    let s = w2_distance(array![[0.0, 0.0]].view(), array![[3.0, 0.0]].view()).unwrap();
    assert!((s.value - 3.0).abs() < 1e-15 && !s.approximate);
    let a = array![[0.0], [1.0], [2.0]];
    let b = array![[2.5], [0.5], [1.5]];
    assert!((w2_distance(a.view(), b.view()).unwrap().value - 0.5).abs() < 1e-15);
    assert!((brute_w2(&a, &b) - 0.5).abs() < 1e-15);
    assert!(w2_distance(a.view(), cloud(3, 2, 0, 0.0).view()).is_err());
}

#[test]
fn w2_matches_brute_force_small() {
    for n in 1..=6 {
        for seed in 0..5 {
            let a = cloud(n, 2, seed, 0.0);
            let b = cloud(n, 2, seed + 100, 0.7);
            let got = w2_distance(a.view(), b.view()).unwrap().value;
            assert!((got - brute_w2(&a, &b)).abs() < 1e-12, "n = {n}");
        }
    }
}

#[test]
fn w2_metric_properties() {
    let (a, b, c) = (cloud(64, 2, 1, 0.0), cloud(64, 2, 2, 1.0), cloud(64, 2, 3, -0.5));
    let d = |x: &Array2<f64>, y: &Array2<f64>| w2_distance(x.view(), y.view()).unwrap().value;
    assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
    assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    assert!(d(&b, &c) <= d(&b, &a) + d(&a, &c) + 1e-12);
}

#[test]
fn sinkhorn_close_to_exact_for_unequal_sizes() {
    // Duplicating every point of b does not change the empirical measure.
    let a = cloud(40, 2, 4, 0.0);
    let b = cloud(40, 2, 5, 1.5);
    let exact = w2_distance(a.view(), b.view()).unwrap();
    let b2 = ndarray::concatenate![ndarray::Axis(0), b, b];
    let approx = w2_distance(a.view(), b2.view()).unwrap();
    assert!(approx.approximate);
    assert!((approx.value - exact.value).abs() < 0.02 * exact.value, "{approx:?} vs {exact:?}");
}

#[test]
fn mmd_examples() {
    let z = array![[0.0], [0.0]];
    assert_eq!(mmd_rbf(z.view(), z.view()).unwrap(), 0.0);
    let a = cloud(50, 2, 6, 0.0);
    assert!(mmd_rbf(a.view(), a.view()).unwrap() <= 1e-12);
    let tight_a = cloud(30, 2, 7, 0.0) * 1e-3;
    let tight_b = cloud(30, 2, 8, 100.0) * 1e-3 + 100.0;
    let m = mmd_rbf(tight_a.view(), tight_b.view()).unwrap();
    assert!((m - 2.0).abs() < 1e-4, "{m}");
    assert!(mmd_rbf(array![[0.0]].view(), z.view()).is_err());
}

#[test]
fn kl_bound() {
    assert_eq!(kl_bound_estimate(0.0).unwrap(), 0.0);
    assert!((kl_bound_estimate(0.04).unwrap() - 0.2).abs() < 1e-15);
    assert!(kl_bound_estimate(-1e-3).is_err());
}

#[test]
fn report_serializes() {
    let mut r = MetricReport::from_weights(vec![(0.0, 1.0), (1.0, 0.5)], &[0.0, 1.0, -1.0]).unwrap();
    r.mmd = Some(0.01);
    r.validate().unwrap();
    let mut buf = Vec::new();
    r.write_json(&mut buf).unwrap();
    let back: MetricReport = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, r);
    let mut csv = Vec::new();
    write_table(&[("gmm".into(), r)], &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("gmm,"));
    let bad = MetricReport { terminal_ess: 0.0, ..back };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn mmd_permutation_invariant(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let a = cloud(12, 2, seed, 0.0);
        let b = cloud(9, 2, seed + 1, shift);
        let m1 = mmd_rbf(a.view(), b.view()).unwrap();
        let mut ar = a.clone();
        for i in 0..6 {
            let (x, y) = (ar.row(i).to_owned(), ar.row(11 - i).to_owned());
            ar.row_mut(i).assign(&y);
            ar.row_mut(11 - i).assign(&x);
        }
        let m2 = mmd_rbf(ar.view(), b.view()).unwrap();
        prop_assert!((m1 - m2).abs() < 1e-12);
        prop_assert!((m1 - mmd_rbf(b.view(), a.view()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn w2_symmetric_non_negative(seed in 0u64..1000) {
        let a = cloud(16, 3, seed, 0.0);
        let b = cloud(16, 3, seed + 7, 0.3);
        let x = w2_distance(a.view(), b.view()).unwrap().value;
        let y = w2_distance(b.view(), a.view()).unwrap().value;
        prop_assert!(x >= 0.0 && (x - y).abs() < 1e-10);
    }
}
