use proptest::prelude::*;
use rtrl_core::approx::*;
use rtrl_core::linalg::{random_matrix, random_vector};
use rtrl_core::rng::trial_rng;
use rtrl_core::{DMatrix, DVector};

fn vec_strategy(len: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-10.0f64..10.0, len).prop_map(DVector::from_vec)
}

proptest! {
    #[test]
    fn equalization_preserves_the_tensor(
        (v1, v2) in (1usize..6, 1usize..6).prop_flat_map(|(a, b)| (vec_strategy(a), vec_strategy(b)))
    ) {
        prop_assume!(v1.norm() > 1e-6 && v2.norm() > 1e-6);
        let (a, b) = norm_equalize(&v1, &v2);
        let before = &v1 * v2.transpose();
        let after = &a * b.transpose();
        prop_assert!((after - &before).amax() <= 1e-12 * before.amax().max(1.0));
        prop_assert!((a.norm() - b.norm()).abs() <= 1e-12 * a.norm().max(1.0));
    }

    #[test]
    fn single_step_average_over_all_signs_is_exact(seed in any::<u64>(), n in 1usize..=6, p in 1usize..=4) {
        let mut rng = trial_rng("approx-enumeration", seed);
        let jac_s = random_matrix(&mut rng, n, n, 1.0);
        let jac_theta = random_matrix(&mut rng, n, p, 1.0);
        let pair = RankOnePair::new(random_vector(&mut rng, n, 1.0), random_vector(&mut rng, p, 1.0));
        let exact = &jac_s * pair.matrix() + &jac_theta;
        for reducer in [Reducer::NoBackTrack, Reducer::Uoro] {
            let mut sum = DMatrix::zeros(n, p);
            for bits in 0..(1u64 << n) {
                sum += reducer.reduce(&pair, &jac_s, &jac_theta, &SignVector::from_bits(n, bits)).unwrap().matrix();
            }
            let mean = sum / (1u64 << n) as f64;
            prop_assert!((mean - &exact).amax() <= 1e-12, "{reducer}");
        }
    }
}

#[test]
fn gauge_bound_holds_along_random_bounded_runs() {
    let mut rng = trial_rng("gauge-integration", 0);
    let (n, p) = (3, 4);
    for reducer in [Reducer::NoBackTrack, Reducer::Uoro] {
        let mut pair = RankOnePair::zeros(n, p);
        for _ in 0..2000 {
            let jac_s = random_matrix(&mut rng, n, n, 0.4);
            let jac_theta = random_matrix(&mut rng, n, p, 1.0);
            let nu = sample_signs(n, &mut rng);
            let next = reducer.reduce(&pair, &jac_s, &jac_theta, &nu).unwrap();
            let e = error_term(&next.matrix(), &pair.matrix(), &jac_s, &jac_theta).unwrap();
            let (norm, bound) = gauge_check(&e, &pair.matrix(), &jac_s, &jac_theta);
            assert!(norm <= bound * (1.0 + 1e-12), "{reducer}: {norm} > {bound}");
            pair = next;
        }
    }
}

#[test]
fn three_step_bias_vanishes_in_both_reducers() {
    for reducer in [Reducer::NoBackTrack, Reducer::Uoro] {
        for dim in 1..=3 {
            let report = verify_unbiased(&UnbiasedConfig::new(reducer, dim, 3), rtrl_core::exec::Mode::Parallel).unwrap();
            assert!(report.max_jacobian_bias <= 1e-10, "{report}");
            assert!(report.pass());
        }
    }
}
