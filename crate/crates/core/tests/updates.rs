use std::sync::Arc;

use proptest::prelude::*;
use rtrl_core::dynamics::{DataStream, Dataset, Regression, SampleLoss};
use rtrl_core::linalg::{random_matrix, random_positive_real, random_spd, random_vector};
use rtrl_core::rng::trial_rng;
use rtrl_core::updates::*;
use rtrl_core::{DMatrix, DVector};

fn regression(seed: u64) -> (Arc<Dataset>, Regression) {
    let mut rng = trial_rng("updates-data", seed);
    let data = Arc::new(Dataset::synthetic_linear(&mut rng, 16, 3, 1, 1.0, 0.3).unwrap());
    let reg = Regression::new(DataStream::cycling(data.clone()));
    (data, reg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_rules_are_affine(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0, t in 1usize..50) {
        let mut rng = trial_rng("rule-linearity", seed);
        let p = 3;
        let (_, reg) = regression(seed);
        let loss: Arc<dyn SampleLoss> = Arc::new(reg);
        let rules: Vec<(Box<dyn UpdateRule>, usize)> = vec![
            (Box::new(Identity), 0),
            (Box::new(Preconditioned::constant("m", random_matrix(&mut rng, p, p, 1.0))), 0),
            (Box::new(Adaptive::rmsprop(0.5).unwrap().with_source(StatSource::Sample(loss.clone()))), p),
            (Box::new(Adaptive::ong(0.5).unwrap().with_source(StatSource::Sample(loss))), p * p),
        ];
        for (rule, aux) in rules {
            prop_assert!(rule.is_affine());
            let mut theta = random_vector(&mut rng, p + aux, 1.0);
            for x in theta.rows_mut(p, aux).iter_mut() {
                *x = x.abs() + 0.5;
            }
            if aux == p * p {
                let m = random_spd(&mut rng, p, 0.5);
                theta.rows_mut(p, aux).copy_from_slice(m.as_slice());
            }
            let s = DVector::zeros(1);
            let v1 = random_vector(&mut rng, p, 1.0);
            let v2 = random_vector(&mut rng, p, 1.0);
            let apply = |v: &DVector<f64>| rule.direction(&RuleInput { t, v, s: &s, theta: &theta, eta: 0.01 }).unwrap();
            let lhs = apply(&(&v1 * alpha + &v2 * beta));
            let rhs = apply(&v1) * alpha + apply(&v2) * beta + apply(&DVector::zeros(p)) * (1.0 - alpha - beta);
            prop_assert!((&lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0), "{}", rule.name());
        }
    }

    #[test]
    fn update_operators_are_first_order(seed in any::<u64>(), scale in 0.0f64..0.5) {
        let mut rng = trial_rng("phi-law", seed);
        let theta = random_vector(&mut rng, 4, 0.3);
        let dir = random_vector(&mut rng, 4, 1.0);
        let w = if dir.norm() > 0.0 { dir.normalize() * scale } else { dir };
        let plain = &theta - &w;
        let wn2 = w.norm_squared();
        prop_assert_eq!(PhiPlain.apply(1, &theta, &w), plain.clone());
        prop_assert!((PhiClipped.apply(1, &theta, &w) - &plain).norm() <= wn2 + 1e-15);
        let proj = PhiProjected { lo: -1.0, hi: 1.0, dims: 4 };
        prop_assert_eq!(proj.apply(1, &theta, &w), plain);
    }
}

/// `∫₀^∞ e^{−Λᵀt} e^{−Λt} dt` by composite Simpson on `[0, t_max]`.
fn lyapunov_by_quadrature(lambda: &DMatrix<f64>, t_max: f64, steps: usize) -> DMatrix<f64> {
    let n = lambda.nrows();
    let h = t_max / steps as f64;
    let step = (-lambda * h).exp();
    let mut e = DMatrix::identity(n, n);
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += e.transpose() * &e * w;
        e = &e * &step;
    }
    acc * (h / 3.0)
}

#[test]
fn lyapunov_solution_matches_the_integral_form() {
    let mut rng = trial_rng("lyapunov-quadrature", 0);
    for n in 1..=4 {
        let a = random_positive_real(&mut rng, n, 1.0);
        let hm = random_spd(&mut rng, n, 1.0);
        let lambda = &a * &hm;
        let b = solve_lyapunov(&lambda).unwrap();
        let quad = lyapunov_by_quadrature(&lambda, 60.0, 20_000);
        assert!((&b - &quad).amax() <= 1e-6 * quad.amax(), "n={n}: {:e}", (&b - &quad).amax());
        // Along θ' = −Λθ, d/dt θᵀBθ = −θᵀ(BΛ + ΛᵀB)θ = −‖θ‖².
        let theta = random_vector(&mut rng, n, 1.0);
        let rate = -(theta.transpose() * (&b * &lambda + lambda.transpose() * &b) * &theta)[0];
        assert!((rate + theta.norm_squared()).abs() <= 1e-10 * theta.norm_squared().max(1.0));
    }
}

#[test]
fn lyapunov_rejects_unstable_input() {
    let lambda = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
    assert!(solve_lyapunov(&lambda).is_err());
}

#[test]
fn adaptive_lambda_is_block_lower_triangular_at_the_optimum() {
    let (data, reg) = regression(3);
    let theta_star = Regression::least_squares_optimum(&data).unwrap();
    let p = theta_star.len();
    // ψ* = epoch average of g ⊙ g at θ*, with g the per-sample gradient.
    let mut psi = DVector::zeros(p);
    for t in 1..=data.len() {
        let g = reg.grad(t, &theta_star);
        psi += g.component_mul(&g) / data.len() as f64;
    }
    let mut theta_ext = DVector::zeros(2 * p);
    theta_ext.rows_mut(0, p).copy_from(&theta_star);
    theta_ext.rows_mut(p, p).copy_from(&psi);
    let rule = Adaptive::rmsprop(0.5).unwrap();
    let est = estimate_lambda(&reg, &rule, &DVector::zeros(1), &theta_ext, 10 * data.len()).unwrap();
    let top_right = est.lambda.view((0, p), (p, p)).norm();
    assert!(top_right <= 1e-4 * est.lambda.norm(), "top-right block {top_right:e}");
    let (stable, _) = is_positive_stable(&est.lambda).unwrap();
    assert!(stable);
}
