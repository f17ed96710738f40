//! Parameterized dynamical systems, their losses, and trajectory evaluation.
//!
//! A [`System`] supplies the transition `T_t(s, θ)` with analytic Jacobians
//! in `s` and `θ`, and a loss `ℓ_t(s)` with its gradient. Time indices
//! start at 1: `s_t = T_t(s_{t−1}, θ)` and `ℓ_t` is evaluated on `s_t`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{fd_gradient, fd_jacobian, guard, rel_error, FD_STEP};

pub mod data;
pub mod examples;
pub mod systems;

pub use data::{DataStream, Dataset, SampleOrder};
pub use examples::{make_example, BuildContext, BuiltExample, DataSpec, ExampleSpec, LossSpec};
pub use systems::{
    AlternatingDim, InfluenceBalancing, LinearSystem, Momentum, ParamAsState, PeriodicLinear, Regression, Rnn,
    SampleLoss, WithResets, ZeroSystem,
};

/// A parameterized dynamical system with a loss along its trajectory.
///
/// Implementations are immutable and shareable across threads.
pub trait System: Send + Sync + Debug {
    /// Dimension `p` of the parameter.
    fn param_dim(&self) -> usize;

    /// Dimension of the state space `S_t`; `t = 0` is the initial state.
    fn state_dim(&self, t: usize) -> usize;

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;

    /// `∂T_t/∂s`, shape `dim S_t × dim S_{t−1}`.
    fn jac_state(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;

    /// `∂T_t/∂θ`, shape `dim S_t × p`.
    fn jac_param(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64>;

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64;

    /// `∂ℓ_t/∂s` as a vector of length `dim S_t`.
    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64>;

    /// False when `T_t` ignores the previous state.
    fn is_recurrent(&self) -> bool {
        true
    }

    /// Short human-readable description, used in reports and config hashes.
    fn describe(&self) -> String {
        format!("{self:?}")
    }
}

fn check_input(sys: &dyn System, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("transitions start at t = 1"));
    }
    if s.len() != sys.state_dim(t - 1) {
        return Err(Error::contract(format!(
            "state of length {} at t={}, expected dim S_{} = {}",
            s.len(),
            t,
            t - 1,
            sys.state_dim(t - 1)
        )));
    }
    if theta.len() != sys.param_dim() {
        return Err(Error::contract(format!(
            "parameter of length {}, expected {}",
            theta.len(),
            sys.param_dim()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("non-finite parameter"));
    }
    Ok(())
}

/// One transition `s_t = T_t(s_{t−1}, θ)` with dimension and overflow checks.
pub fn step(sys: &dyn System, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_input(sys, t, s, theta)?;
    let next = sys.transition(t, s, theta);
    if next.len() != sys.state_dim(t) {
        return Err(Error::contract(format!(
            "transition at t={t} returned length {}, expected {}",
            next.len(),
            sys.state_dim(t)
        )));
    }
    guard("transition", t, next.as_slice())?;
    Ok(next)
}

/// States `s_{t0}, …, s_{t1}` together with the parameter used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: usize,
    pub states: Vec<DVector<f64>>,
    /// `params[k]` produced `states[k + 1]`.
    pub params: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn t_end(&self) -> usize {
        self.t0 + self.states.len() - 1
    }

    /// State at absolute time `t`.
    pub fn state(&self, t: usize) -> Option<&DVector<f64>> {
        t.checked_sub(self.t0).and_then(|k| self.states.get(k))
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least its initial state")
    }
}

/// Open-loop trajectory from `s0` at time 0 over `horizon` steps.
pub fn run_trajectory(sys: &dyn System, s0: &DVector<f64>, theta: &DVector<f64>, horizon: usize) -> Result<Trajectory> {
    run_trajectory_from(sys, 0, s0, theta, horizon)
}

/// Open-loop trajectory starting at `s_start` at time `t_start` up to `t_end`.
pub fn run_trajectory_from(
    sys: &dyn System,
    t_start: usize,
    s_start: &DVector<f64>,
    theta: &DVector<f64>,
    t_end: usize,
) -> Result<Trajectory> {
    if t_end < t_start {
        return Err(Error::contract(format!("trajectory end {t_end} before start {t_start}")));
    }
    if s_start.len() != sys.state_dim(t_start) {
        return Err(Error::contract(format!(
            "initial state of length {}, expected {}",
            s_start.len(),
            sys.state_dim(t_start)
        )));
    }
    let mut states = Vec::with_capacity(t_end - t_start + 1);
    states.push(s_start.clone());
    for t in t_start + 1..=t_end {
        let next = step(sys, t, states.last().unwrap(), theta)?;
        states.push(next);
    }
    Ok(Trajectory { t0: t_start, states, params: vec![theta.clone(); t_end - t_start] })
}

/// `L_{t↦}(s0, θ) = ℓ_t(F_t(s0, θ))`.
pub fn compound_loss(sys: &dyn System, s0: &DVector<f64>, theta: &DVector<f64>, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::contract("compound loss needs t >= 1"));
    }
    let traj = run_trajectory(sys, s0, theta, t)?;
    let l = sys.loss(t, traj.last());
    guard("loss", t, &[l])?;
    Ok(l)
}

/// Worst relative error of a system's analytic derivatives against central
/// finite differences at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianCheck {
    pub jac_state: f64,
    pub jac_param: f64,
    pub loss_grad: f64,
}

impl JacobianCheck {
    pub fn worst(&self) -> f64 {
        self.jac_state.max(self.jac_param).max(self.loss_grad)
    }
}

pub fn check_jacobians(sys: &dyn System, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> JacobianCheck {
    let h = FD_STEP;
    let fd_s = fd_jacobian(|x| sys.transition(t, x, theta), s, h);
    let fd_p = fd_jacobian(|x| sys.transition(t, s, x), theta, h);
    let next = sys.transition(t, s, theta);
    let fd_l = fd_gradient(|x| sys.loss(t, x), &next, h);
    JacobianCheck {
        jac_state: rel_error(&sys.jac_state(t, s, theta), &fd_s),
        jac_param: rel_error(&sys.jac_param(t, s, theta), &fd_p),
        loss_grad: crate::linalg::rel_error_vec(&sys.loss_grad(t, &next), &fd_l),
    }
}

/// Loss attached to a system's state.
#[derive(Debug, Clone)]
pub enum StateLoss {
    Zero,
    /// `ℓ(s) = w·s`.
    Linear(DVector<f64>),
    /// `ℓ_t(s) = ‖R s − y_t‖²`.
    Squared { readout: DMatrix<f64>, targets: Targets },
}

#[derive(Debug, Clone)]
pub enum Targets {
    Constant(DVector<f64>),
    /// Targets `y_t` read from a data stream.
    Stream(DataStream),
}

impl Targets {
    pub fn at(&self, t: usize) -> &DVector<f64> {
        match self {
            Targets::Constant(y) => y,
            Targets::Stream(s) => s.y(t),
        }
    }
}

impl StateLoss {
    pub fn value(&self, t: usize, s: &DVector<f64>) -> f64 {
        match self {
            StateLoss::Zero => 0.0,
            StateLoss::Linear(w) => w.dot(s),
            StateLoss::Squared { readout, targets } => (readout * s - targets.at(t)).norm_squared(),
        }
    }

    pub fn grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        match self {
            StateLoss::Zero => DVector::zeros(s.len()),
            StateLoss::Linear(w) => w.clone(),
            StateLoss::Squared { readout, targets } => readout.transpose() * (readout * s - targets.at(t)) * 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::systems::LinearSystem;

    fn scalar(a: f64, b: f64) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            None,
            StateLoss::Linear(DVector::from_element(1, 1.0)),
        )
        .unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn scalar_linear_step() {
        let sys = scalar(0.5, 1.0);
        assert_eq!(step(&sys, 1, &v(2.0), &v(1.0)).unwrap()[0], 2.0);
    }

    #[test]
    fn geometric_trajectory() {
        let sys = scalar(0.5, 1.0);
        let traj = run_trajectory(&sys, &v(0.0), &v(1.0), 3).unwrap();
        // oracle: s_t = Σ_{j<t} 0.5^j
        let oracle: Vec<f64> = (0..=3).map(|t| (0..t).map(|j| 0.5f64.powi(j)).sum()).collect();
        let got: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![0.0, 1.0, 1.5, 1.75]);
        assert_eq!(compound_loss(&sys, &v(0.0), &v(1.0), 3).unwrap(), 1.75);
    }

    #[test]
    fn zero_horizon_is_initial_state() {
        let sys = scalar(0.5, 1.0);
        let traj = run_trajectory(&sys, &v(3.0), &v(1.0), 0).unwrap();
        assert_eq!(traj.states, vec![v(3.0)]);
        assert!(traj.params.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let sys = scalar(0.5, 1.0);
        let err = step(&sys, 1, &DVector::zeros(2), &v(1.0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(matches!(step(&sys, 1, &v(0.0), &v(f64::NAN)), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_reported_with_time() {
        let sys = scalar(10.0, 0.0);
        let err = run_trajectory(&sys, &v(1.0), &v(0.0), 40).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { t: 13, .. }), "{err:?}");
    }

    #[test]
    fn zero_loss_vanishes() {
        let sys = LinearSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            None,
            StateLoss::Zero,
        )
        .unwrap();
        for th in [-3.0, 0.0, 7.0] {
            assert_eq!(compound_loss(&sys, &v(1.0), &v(th), 5).unwrap(), 0.0);
        }
    }
}
