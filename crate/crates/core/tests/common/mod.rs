#![allow(dead_code)]

use std::sync::Arc;

use rtrl_core::dynamics::*;
use rtrl_core::linalg::{op_norm, random_matrix, random_vector};
use rtrl_core::rng::TrialRng;
use rtrl_core::{DMatrix, DVector};

/// A system with a sampler for its state and parameter.
pub struct Case {
    pub name: &'static str,
    pub sys: Arc<dyn System>,
}

impl Case {
    pub fn s0(&self, rng: &mut TrialRng) -> DVector<f64> {
        random_vector(rng, self.sys.state_dim(0), 1.0)
    }

    pub fn theta(&self, rng: &mut TrialRng) -> DVector<f64> {
        random_vector(rng, self.sys.param_dim(), 1.0)
    }
}

fn scaled(rng: &mut TrialRng, n: usize, norm: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, 1.0);
    let k = op_norm(&m);
    m * (norm / k)
}

fn dataset(rng: &mut TrialRng, n: usize, din: usize, dout: usize) -> Arc<Dataset> {
    Arc::new(Dataset::synthetic_linear(rng, n, din, dout, 1.0, 0.2).unwrap())
}

/// Five shipped systems with `dim S ≤ 4` and `p ≤ 6`, drawn from `rng`.
pub fn shipped(rng: &mut TrialRng) -> Vec<Case> {
    let lin = LinearSystem::new(
        scaled(rng, 3, 0.8),
        random_matrix(rng, 3, 2, 1.0),
        None,
        StateLoss::Squared { readout: DMatrix::identity(3, 3), targets: Targets::Constant(random_vector(rng, 3, 1.0)) },
    )
    .unwrap();

    let xs = dataset(rng, 5, 1, 2);
    let stream = DataStream::cycling(xs);
    let raw = Rnn::raw_len(2, 1);
    let rnn = Rnn::embedded(
        2,
        random_matrix(rng, raw, 5, 1.0),
        random_vector(rng, raw, 0.5),
        Some(stream.clone()),
        StateLoss::Squared { readout: DMatrix::identity(2, 2), targets: Targets::Stream(stream) },
    )
    .unwrap();

    let reg = Regression::new(DataStream::cycling(dataset(rng, 6, 3, 1)));
    let momentum = Momentum::new(0.7, reg).unwrap();

    let ib = InfluenceBalancing { n: 4, ..InfluenceBalancing::default() }.build().unwrap();

    vec![
        Case { name: "linear", sys: Arc::new(lin) },
        Case { name: "rnn", sys: Arc::new(rnn) },
        Case { name: "momentum", sys: Arc::new(momentum) },
        Case { name: "influence_balancing", sys: Arc::new(ib) },
        Case { name: "alternating", sys: Arc::new(AlternatingDim { params: 3 }) },
    ]
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut up = x.clone();
        let mut dn = x.clone();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    (a - b).amax() / b.amax().max(floor)
}
