use std::sync::Arc;

use rtrl_core::diagnostics::*;
use rtrl_core::dynamics::*;
use rtrl_core::linalg::{op_norm, random_matrix};
use rtrl_core::rng::trial_rng;
use rtrl_core::updates::Identity;
use rtrl_core::{DMatrix, DVector};

use rand::Rng;

/// `Q T Qᵀ` with `T` upper triangular, diagonal in `[−r, r]` with one entry
/// at `r`, and off-diagonal entries that push the operator norm above one.
fn matrix_with_radius(rng: &mut rtrl_core::rng::TrialRng, r: f64) -> DMatrix<f64> {
    let n = 4;
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = if i == 0 { r } else { rng.random_range(-0.9 * r..0.9 * r) };
        for j in i + 1..n {
            t[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    t[(0, n - 1)] = 1.5;
    let q = random_matrix(rng, n, n, 1.0).qr().q();
    &q * t * q.transpose()
}

#[test]
fn gelfand_roots_decrease_and_approach_the_radius() {
    let mut rng = trial_rng("gelfand", 0);
    for _ in 0..20 {
        let r = rng.random_range(0.5..0.95);
        let m = matrix_with_radius(&mut rng, r);
        assert!(op_norm(&m) > 1.0);
        let ops = vec![m; 64];
        let prof = horizon_profile(&ops, 64).unwrap();
        let root = |k: usize| prof.max_norms[k - 1].powf(1.0 / k as f64);
        for k in [1, 2, 4, 8, 16, 32] {
            assert!(root(2 * k) <= root(k) * (1.0 + 1e-12), "k={k}");
        }
        assert!((root(50) - r).abs() <= 0.05 * r, "r={r}, root={}", root(50));
        let cert = spectral_radius_horizon(&ops, 50).unwrap().certificate.expect("certified");
        assert!(cert.max_product_norm < 1.0 && cert.alpha > 0.0);
    }
}

#[test]
fn sliding_products_use_every_window() {
    // Only the window starting at index 3 is large.
    let mut ops = vec![DMatrix::identity(2, 2) * 0.5; 8];
    ops[3] = DMatrix::identity(2, 2) * 3.0;
    ops[4] = DMatrix::identity(2, 2) * 3.0;
    let prof = horizon_profile(&ops, 3).unwrap();
    assert_eq!(prof.max_norms, vec![3.0, 9.0, 4.5]);
}

#[test]
fn quadratic_minimum_has_vanishing_epoch_sums() {
    let mut rng = trial_rng("epoch-sums", 0);
    let data = Arc::new(Dataset::synthetic_linear(&mut rng, 12, 3, 1, 1.0, 0.3).unwrap());
    let star = Regression::least_squares_optimum(&data).unwrap();
    let reg = Regression::new(DataStream::cycling(data.clone()));
    let report = local_optimum_report(&reg, &Identity, &DVector::zeros(1), &star, 240).unwrap();
    let scale = report.partial_sum_norms.iter().fold(0.0f64, |a, &b| a.max(b));
    for epoch in 1..=20 {
        assert!(report.partial_sum_norms[epoch * 12 - 1] <= 1e-12 * scale.max(1.0));
    }
    assert!(report.pass(), "{report}");

    let off = &star + DVector::from_element(3, 0.3);
    let report = local_optimum_report(&reg, &Identity, &DVector::zeros(1), &off, 4000).unwrap();
    assert!(!report.pass(), "{report}");
}

#[test]
fn non_recurrent_systems_certify_immediately() {
    let mut rng = trial_rng("non-recurrent", 0);
    let data = Arc::new(Dataset::synthetic_linear(&mut rng, 8, 2, 1, 1.0, 0.1).unwrap());
    let reg = Regression::new(DataStream::cycling(data));
    let prof = check_stability(&reg, &DVector::zeros(2), &DVector::zeros(1), 100, 10).unwrap();
    let c = prof.certificate.unwrap();
    assert_eq!((c.k, c.alpha), (1, 1.0));
}
