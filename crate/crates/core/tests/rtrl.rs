mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rtrl_core::approx::{RankOneInjector, Reducer};
use rtrl_core::dynamics::*;
use rtrl_core::rng::trial_rng;
use rtrl_core::rtrl::*;
use rtrl_core::schedules::StepSchedule;
use rtrl_core::updates::{Identity, PhiPlain};
use rtrl_core::DVector;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn open_loop_gradient_matches_finite_differences(seed in any::<u64>(), t in 1usize..=30, which in 0usize..5) {
        let mut rng = trial_rng("open-loop-fd", seed);
        let cases = common::shipped(&mut rng);
        let case = &cases[which];
        let s0 = case.s0(&mut rng);
        let theta = case.theta(&mut rng);
        let g = open_loop_gradient(case.sys.as_ref(), &s0, &theta, t).unwrap();
        let fd = common::central_gradient(|th| compound_loss(case.sys.as_ref(), &s0, th, t).unwrap(), &theta, 1e-6);
        let err = common::rel_err(&g, &fd, 1e-3);
        prop_assert!(err <= 1e-5, "{} t={t}: rel err {err:e}", case.name);
    }

    #[test]
    fn displacement_is_step_times_direction_norm(seed in any::<u64>(), gamma in 0.01f64..0.5, b in 0.3f64..1.0) {
        let mut rng = trial_rng("displacement", seed);
        let cases = common::shipped(&mut rng);
        let case = &cases[0];
        let sys = case.sys.as_ref();
        let learner = Learner { sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
        let schedule = StepSchedule::new(gamma, b).unwrap();
        let mut ls = LearnerState::new(sys, &Identity, case.s0(&mut rng), case.theta(&mut rng)).unwrap();
        for t in 1..=20 {
            let (next, info) = rtrl_step(&learner, &ls, schedule.eta(t), &mut rng).unwrap();
            let moved = (&next.theta - &ls.theta).norm();
            let expected = schedule.eta(t) * info.grad_norm;
            prop_assert!((moved - expected).abs() <= 1e-12 * expected.max(1.0));
            ls = next;
        }
    }
}

#[test]
fn zero_injector_run_is_bit_identical_to_exact() {
    let mut rng = trial_rng("zero-injector", 3);
    for case in common::shipped(&mut rng) {
        let sys = case.sys.as_ref();
        let s0 = case.s0(&mut rng);
        let theta = case.theta(&mut rng);
        let schedule = StepSchedule::new(0.05, 0.7).unwrap();
        let run = |inj: &dyn ErrorInjector| {
            let learner = Learner { sys, rule: &Identity, phi: &PhiPlain, inj };
            let init = LearnerState::new(sys, &Identity, s0.clone(), theta.clone()).unwrap();
            run_learning(&learner, init, &schedule, &RunOptions::new(200), &mut trial_rng("zero-injector-run", 1)).unwrap()
        };
        let exact = run(&ExactRtrl);
        let zero = run(&ZeroInjector);
        assert_eq!(exact.final_theta.as_slice(), zero.final_theta.as_slice(), "{}", case.name);
        let bits = |r: &TrialRecord| r.rows.iter().map(|x| (x.t, x.loss.to_bits(), x.grad_norm.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&exact), bits(&zero), "{}", case.name);
    }
}

#[test]
fn rank_one_runs_differ_but_share_the_config_hash() {
    let mut rng = trial_rng("uoro-vs-zero", 0);
    let case = &common::shipped(&mut rng)[1];
    let sys = case.sys.as_ref();
    let s0 = case.s0(&mut rng);
    let theta = case.theta(&mut rng);
    let schedule = StepSchedule::new(0.1, 0.7).unwrap();
    let mut opts = RunOptions::new(100);
    opts.config_hash = 42;
    let run = |inj: &dyn ErrorInjector| {
        let learner = Learner { sys, rule: &Identity, phi: &PhiPlain, inj };
        let init = LearnerState::new(sys, &Identity, s0.clone(), theta.clone()).unwrap();
        run_learning(&learner, init, &schedule, &opts, &mut trial_rng("uoro-vs-zero-run", 5)).unwrap()
    };
    let zero = run(&ZeroInjector);
    let uoro = run(&RankOneInjector(Reducer::Uoro));
    assert_ne!(zero.final_theta, uoro.final_theta);
    assert_eq!(zero.config_hash, uoro.config_hash);
}

#[test]
fn momentum_rtrl_is_sgd_with_momentum() {
    let mut rng = trial_rng("momentum-equivalence", 0);
    let data = Arc::new(Dataset::synthetic_linear(&mut rng, 7, 3, 1, 1.0, 0.1).unwrap());
    let reg = Regression::new(DataStream::cycling(data.clone()));
    let beta = 0.8;
    let sys = Momentum::new(beta, reg.clone()).unwrap();
    let schedule = StepSchedule::new(0.2, 0.6).unwrap();
    let learner = Learner { sys: &sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
    let theta0 = DVector::from_vec(vec![0.3, -0.2, 0.5]);
    let mut ls = LearnerState::new(&sys, &Identity, DVector::zeros(1), theta0.clone()).unwrap();

    // Standalone loop: m_t = β m_{t−1} + (1 − β) ∇ℓ_t(θ_{t−1}), θ_t = θ_{t−1} − η_t m_t,
    // with the per-sample gradient of ‖W x − y‖² written out by hand.
    let mut m = DVector::zeros(3);
    let mut theta = theta0;
    for t in 1..=300 {
        let i = (t - 1) % data.len();
        let (x, y) = (&data.xs[i], data.ys[i][0]);
        let grad = x * (2.0 * (theta.dot(x) - y));
        m = &m * beta + grad * (1.0 - beta);
        theta -= &m * schedule.eta(t);

        ls = rtrl_step(&learner, &ls, schedule.eta(t), &mut rng).unwrap().0;
        let j = ls.j.to_dense();
        assert!((j.row(0).transpose() - &m).amax() <= 1e-12, "J mismatch at t={t}");
        assert!((&ls.theta - &theta).amax() <= 1e-12, "theta mismatch at t={t}");
    }
}

#[test]
fn deviation_vanishes_for_exact_states_only() {
    let mut rng = trial_rng("deviation", 0);
    let case = &common::shipped(&mut rng)[1];
    let sys = case.sys.as_ref();
    let s0 = case.s0(&mut rng);
    let theta = case.theta(&mut rng);
    let schedule = StepSchedule::new(0.1, 0.7).unwrap();
    let collect = |inj: &dyn ErrorInjector| {
        let learner = Learner { sys, rule: &Identity, phi: &PhiPlain, inj };
        let mut ls = LearnerState::new(sys, &Identity, s0.clone(), theta.clone()).unwrap();
        let mut r = trial_rng("deviation-run", 0);
        let mut states = vec![Maintained::from(&ls)];
        for t in 1..=40 {
            ls = rtrl_step(&learner, &ls, schedule.eta(t), &mut r).unwrap().0;
            states.push(Maintained::from(&ls));
        }
        states
    };
    let exact = collect(&ExactRtrl);
    let d = deviation(sys, &theta, &exact, 0, 40, &schedule, &Identity, &PhiPlain).unwrap();
    assert!(d <= 1e-12, "exact deviation {d:e}");
    let noisy = collect(&RankOneInjector(Reducer::NoBackTrack));
    let d = deviation(sys, &theta, &noisy, 0, 40, &schedule, &Identity, &PhiPlain).unwrap();
    assert!(d > 1e-8 && d.is_finite(), "noisy deviation {d:e}");
    assert!(deviation(sys, &theta, &exact, 0, 41, &schedule, &Identity, &PhiPlain).is_err());
}
