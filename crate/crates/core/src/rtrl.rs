//! Exact, extended and imperfect RTRL.
//!
//! One step at time `t` runs, in order:
//!
//! ```text
//! s_t = T_t(s_{t−1}, θ_{t−1})
//! J_t = ∂sT · J_{t−1} + ∂θT (+ E_t)
//! v_t = U_t(∂ℓ_t(s_t) · J_t, s_t, θ⁺_{t−1})
//! θ⁺_t = Φ_t(θ⁺_{t−1}, η_t v_t)
//! ```
//!
//! The system only sees the first `p` coordinates of the extended parameter
//! `θ⁺ = (θ, ψ)`; the auxiliary part belongs to the update rule.

use std::fmt::Debug;
use std::io::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::approx::RankOnePair;
use crate::dynamics::System;
use crate::error::{Error, Result};
use crate::linalg::guard;
use crate::rng::TrialRng;
use crate::schedules::StepSchedule;
use crate::updates::{ParamUpdateOp, RuleInput, UpdateRule};

/// `J_t`, either dense or as a rank-one pair `ṽ ⊗ v̄`.
#[derive(Debug, Clone, PartialEq)]
pub enum JacobianEstimate {
    Dense(DMatrix<f64>),
    RankOne(RankOnePair),
}

impl JacobianEstimate {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        JacobianEstimate::Dense(DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            JacobianEstimate::Dense(m) => m.shape(),
            JacobianEstimate::RankOne(p) => (p.v_state.len(), p.v_param.len()),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            JacobianEstimate::Dense(m) => m.clone(),
            JacobianEstimate::RankOne(p) => p.matrix(),
        }
    }

    /// `gᵀ J` as a column vector of length `p`.
    pub fn pullback(&self, g: &DVector<f64>) -> DVector<f64> {
        match self {
            JacobianEstimate::Dense(m) => m.tr_mul(g),
            JacobianEstimate::RankOne(p) => &p.v_param * g.dot(&p.v_state),
        }
    }

    pub fn op_norm(&self) -> f64 {
        match self {
            JacobianEstimate::Dense(m) => crate::linalg::op_norm(m),
            JacobianEstimate::RankOne(p) => p.v_state.norm() * p.v_param.norm(),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            JacobianEstimate::Dense(m) => m.as_slice().to_vec(),
            JacobianEstimate::RankOne(p) => p.v_state.iter().chain(p.v_param.iter()).copied().collect(),
        }
    }
}

/// What the learner carries from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub t: usize,
    pub s: DVector<f64>,
    pub j: JacobianEstimate,
    /// Extended parameter `θ⁺ = (θ, ψ)`.
    pub theta: DVector<f64>,
    /// False until the rule's auxiliary statistics are initialised.
    pub aux_ready: bool,
}

impl LearnerState {
    /// Fresh state at `t = 0` with `J₀ = 0`. If `theta` has exactly `p`
    /// entries and the rule carries statistics, they are initialised from
    /// the first observation.
    pub fn new(sys: &dyn System, rule: &dyn UpdateRule, s0: DVector<f64>, theta: DVector<f64>) -> Result<Self> {
        let p = sys.param_dim();
        let aux = rule.aux_dim(p);
        if s0.len() != sys.state_dim(0) {
            return Err(Error::contract(format!("s0 has length {}, expected {}", s0.len(), sys.state_dim(0))));
        }
        let (theta, aux_ready) = if theta.len() == p + aux {
            (theta, true)
        } else if theta.len() == p {
            (theta.resize_vertically(p + aux, 0.0), aux == 0)
        } else {
            return Err(Error::contract(format!("theta has length {}, expected {p} or {}", theta.len(), p + aux)));
        };
        let j = JacobianEstimate::zeros(s0.len(), p);
        Ok(LearnerState { t: 0, s: s0, j, theta, aux_ready })
    }

    pub fn with_jacobian(mut self, j: JacobianEstimate) -> Result<Self> {
        if j.shape() != self.j.shape() {
            return Err(Error::contract(format!("J0 has shape {:?}, expected {:?}", j.shape(), self.j.shape())));
        }
        self.j = j;
        Ok(self)
    }

    /// The part of `θ⁺` the system sees.
    pub fn system_theta(&self, p: usize) -> DVector<f64> {
        self.theta.rows(0, p).into_owned()
    }

    fn check(&self, sys: &dyn System) -> Result<()> {
        let p = sys.param_dim();
        if self.s.len() != sys.state_dim(self.t) || self.j.shape() != (self.s.len(), p) || self.theta.len() < p {
            return Err(Error::contract(format!(
                "inconsistent learner state at t={}: s {}, J {:?}, theta {}",
                self.t,
                self.s.len(),
                self.j.shape(),
                self.theta.len()
            )));
        }
        Ok(())
    }
}

/// Inputs of one Jacobian propagation.
#[derive(Debug, Clone, Copy)]
pub struct Propagation<'a> {
    pub t: usize,
    pub s_prev: &'a DVector<f64>,
    pub theta_prev: &'a DVector<f64>,
    pub j_prev: &'a JacobianEstimate,
    pub jac_s: &'a DMatrix<f64>,
    pub jac_theta: &'a DMatrix<f64>,
}

impl Propagation<'_> {
    /// `∂sT · J_{t−1} + ∂θT`.
    pub fn exact(&self) -> DMatrix<f64> {
        match self.j_prev {
            JacobianEstimate::Dense(j) => self.jac_s * j + self.jac_theta,
            JacobianEstimate::RankOne(p) => crate::linalg::outer(&(self.jac_s * &p.v_state), &p.v_param) + self.jac_theta,
        }
    }
}

/// Source of the error term `E_t` of imperfect RTRL.
pub trait ErrorInjector: Send + Sync + Debug {
    fn name(&self) -> &str;

    /// `E_t`, of shape `dim(S_t) × p`.
    fn next_error(&self, step: &Propagation<'_>, rng: &mut TrialRng) -> DMatrix<f64>;

    /// `J_t`. Injectors with a compact representation override this.
    fn propagate(&self, step: &Propagation<'_>, rng: &mut TrialRng) -> JacobianEstimate {
        JacobianEstimate::Dense(step.exact() + self.next_error(step, rng))
    }
}

/// Exact RTRL: no error term at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactRtrl;

impl ErrorInjector for ExactRtrl {
    fn name(&self) -> &str {
        "exact"
    }

    fn next_error(&self, step: &Propagation<'_>, _rng: &mut TrialRng) -> DMatrix<f64> {
        DMatrix::zeros(step.jac_theta.nrows(), step.jac_theta.ncols())
    }

    fn propagate(&self, step: &Propagation<'_>, _rng: &mut TrialRng) -> JacobianEstimate {
        JacobianEstimate::Dense(step.exact())
    }
}

/// Imperfect RTRL with `E_t = 0`, going through the generic error path.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroInjector;

impl ErrorInjector for ZeroInjector {
    fn name(&self) -> &str {
        "zero"
    }

    fn next_error(&self, step: &Propagation<'_>, _rng: &mut TrialRng) -> DMatrix<f64> {
        DMatrix::zeros(step.jac_theta.nrows(), step.jac_theta.ncols())
    }
}

/// Observables of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    /// `‖v_t‖`.
    pub grad_norm: f64,
}

/// Everything fixed across the steps of a run.
#[derive(Debug, Clone, Copy)]
pub struct Learner<'a> {
    pub sys: &'a dyn System,
    pub rule: &'a dyn UpdateRule,
    pub phi: &'a dyn ParamUpdateOp,
    pub inj: &'a dyn ErrorInjector,
}

/// One step of extended imperfect RTRL from `ls` (at time `t−1`) with step
/// size `eta = η_t`.
pub fn rtrl_step(learner: &Learner<'_>, ls: &LearnerState, eta: f64, rng: &mut TrialRng) -> Result<(LearnerState, StepInfo)> {
    let Learner { sys, rule, phi, inj } = *learner;
    ls.check(sys)?;
    if !(eta >= 0.0) {
        return Err(Error::contract(format!("step size {eta} must be non-negative")));
    }
    let t = ls.t + 1;
    let p = sys.param_dim();
    let theta = ls.system_theta(p);

    let s = crate::dynamics::step(sys, t, &ls.s, &theta)?;

    let jac_s = sys.jac_state(t, &ls.s, &theta);
    let jac_theta = sys.jac_param(t, &ls.s, &theta);
    let prop = Propagation { t, s_prev: &ls.s, theta_prev: &theta, j_prev: &ls.j, jac_s: &jac_s, jac_theta: &jac_theta };
    let j = inj.propagate(&prop, rng);
    guard("jacobian", t, &j.values())?;

    let loss = sys.loss(t, &s);
    let g = j.pullback(&sys.loss_grad(t, &s));
    guard("gradient", t, g.as_slice())?;

    let mut theta_ext = ls.theta.clone();
    let mut input = RuleInput { t, v: &g, s: &s, theta: &theta_ext, eta };
    let mut aux_ready = ls.aux_ready;
    if !aux_ready {
        if let Some(aux) = rule.initial_aux(&input)? {
            theta_ext.rows_mut(p, aux.len()).copy_from(&aux);
        }
        aux_ready = true;
        input = RuleInput { t, v: &g, s: &s, theta: &theta_ext, eta };
    }
    let v = rule.direction(&input)?;
    guard("update direction", t, v.as_slice())?;

    let next_theta = phi.apply(t, &theta_ext, &(&v * eta));
    guard("parameter", t, next_theta.as_slice())?;

    let info = StepInfo { loss, grad_norm: v.norm() };
    Ok((LearnerState { t, s, j, theta: next_theta, aux_ready }, info))
}

/// `∂L_{t↦}(s0, θ)/∂θ`: exact RTRL at frozen θ from `J₀ = 0`.
pub fn open_loop_gradient(sys: &dyn System, s0: &DVector<f64>, theta: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    open_loop_gradient_from(sys, 0, s0, theta, t)
}

/// Same as [`open_loop_gradient`] for a run restarted at `(t_start, s_start)`.
pub fn open_loop_gradient_from(
    sys: &dyn System,
    t_start: usize,
    s_start: &DVector<f64>,
    theta: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    if t <= t_start {
        return Err(Error::contract(format!("gradient time {t} must exceed start time {t_start}")));
    }
    let mut s = s_start.clone();
    let mut j = DMatrix::zeros(s.len(), sys.param_dim());
    for u in t_start + 1..=t {
        let jac_s = sys.jac_state(u, &s, theta);
        let jac_theta = sys.jac_param(u, &s, theta);
        s = crate::dynamics::step(sys, u, &s, theta)?;
        j = jac_s * j + jac_theta;
        guard("jacobian", u, j.as_slice())?;
    }
    Ok(j.tr_mul(&sys.loss_grad(t, &s)))
}

/// One row of a trial time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordRow {
    pub t: usize,
    /// `‖θ_t − θ*‖` over the system coordinates; NaN without a reference.
    pub theta_dist: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub aborted: bool,
    /// Interval index, for TBPTT records.
    pub interval_k: Option<usize>,
}

impl RecordRow {
    /// Row for the starting point, before any loss is observed.
    pub fn initial(t: usize, theta_dist: f64) -> Self {
        RecordRow { t, theta_dist, loss: f64::NAN, grad_norm: f64::NAN, aborted: false, interval_k: None }
    }
}

/// Time series of one trial. The first row is the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub rows: Vec<RecordRow>,
    pub initial_dist: f64,
    pub final_theta: DVector<f64>,
    pub abort_t: Option<usize>,
    pub config_hash: u64,
}

impl TrialRecord {
    pub fn final_dist(&self) -> f64 {
        self.rows.last().map_or(self.initial_dist, |r| r.theta_dist)
    }

    pub fn has_intervals(&self) -> bool {
        self.rows.iter().any(|r| r.interval_k.is_some())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let intervals = self.has_intervals();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t", "theta_dist", "loss", "grad_norm", "aborted"];
        if intervals {
            header.push("interval_k");
        }
        let to_err = |e: csv::Error| Error::Csv { path: "<trial record>".into(), source: e };
        w.write_record(&header).map_err(to_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.t.to_string(),
                r.theta_dist.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                u8::from(r.aborted).to_string(),
            ];
            if intervals {
                rec.push(r.interval_k.map_or_else(String::new, |k| k.to_string()));
            }
            w.write_record(&rec).map_err(to_err)?;
        }
        let mut out = w.into_inner().map_err(|e| Error::io("<trial record>", e.into_error()))?;
        out.flush().ok();
        Ok(out)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let to_err = |e: csv::Error| Error::Csv { path: "<trial record>".into(), source: e };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(to_err)?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::config("short trial record row"))?
                    .parse::<f64>()
                    .map_err(|e| Error::config(format!("bad number in trial record: {e}")))
            };
            rows.push(RecordRow {
                t: num(0)? as usize,
                theta_dist: num(1)?,
                loss: num(2)?,
                grad_norm: num(3)?,
                aborted: num(4)? != 0.0,
                interval_k: rec.get(5).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok()),
            });
        }
        let abort_t = rows.iter().find(|r| r.aborted).map(|r| r.t);
        Ok(TrialRecord { rows, initial_dist: f64::NAN, final_theta: DVector::zeros(0), abort_t, config_hash: 0 })
    }
}

/// Per-run settings that are not part of the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub horizon: usize,
    /// Record every n-th step (plus the last one and any abort).
    pub record_every: usize,
    pub theta_star: Option<DVector<f64>>,
    pub config_hash: u64,
}

impl RunOptions {
    pub fn new(horizon: usize) -> Self {
        RunOptions { horizon, record_every: 1, theta_star: None, config_hash: 0 }
    }

    pub(crate) fn dist(&self, theta: &DVector<f64>) -> f64 {
        match &self.theta_star {
            Some(star) => (theta.rows(0, star.len()) - star).norm(),
            None => f64::NAN,
        }
    }

    pub(crate) fn records(&self, t: usize) -> bool {
        t == self.horizon || t.is_multiple_of(self.record_every.max(1))
    }
}

/// Runs [`rtrl_step`] for `t = 1..=T`. Divergence ends the trial early and
/// is reported in the record rather than as an error.
pub fn run_learning(
    learner: &Learner<'_>,
    init: LearnerState,
    schedule: &StepSchedule,
    opts: &RunOptions,
    rng: &mut TrialRng,
) -> Result<TrialRecord> {
    schedule.validate()?;
    if opts.horizon == 0 {
        return Err(Error::contract("run horizon must be at least 1"));
    }
    let mut ls = init;
    let initial_dist = opts.dist(&ls.theta);
    let mut rows = Vec::with_capacity(opts.horizon / opts.record_every.max(1) + 3);
    rows.push(RecordRow::initial(ls.t, initial_dist));
    let mut abort_t = None;
    for t in ls.t + 1..=opts.horizon {
        match rtrl_step(learner, &ls, schedule.eta(t), rng) {
            Ok((next, info)) => {
                ls = next;
                if opts.records(t) {
                    rows.push(RecordRow {
                        t,
                        theta_dist: opts.dist(&ls.theta),
                        loss: info.loss,
                        grad_norm: info.grad_norm,
                        aborted: false,
                        interval_k: None,
                    });
                }
            }
            Err(Error::NumericOverflow { t: at, .. }) => {
                abort_t = Some(at);
                rows.push(RecordRow {
                    t: at,
                    theta_dist: opts.dist(&ls.theta),
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    aborted: true,
                    interval_k: None,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrialRecord { rows, initial_dist, final_theta: ls.theta, abort_t, config_hash: opts.config_hash })
}

/// The maintained part `m_t = (s_t, J_t)` of a learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct Maintained {
    pub s: DVector<f64>,
    pub j: DMatrix<f64>,
}

impl From<&LearnerState> for Maintained {
    fn from(ls: &LearnerState) -> Self {
        Maintained { s: ls.s.clone(), j: ls.j.to_dense() }
    }
}

/// Deviation at `t1` of the maintained states `states[k] = m_{t0+k}` from
/// the exact algorithm.
///
/// Two parameter sequences start at `theta_anchor`: `θ_t` reads its
/// directions off the given states, and `θ̄_t` off exact RTRL restarted at
/// `m_{t0}` and driven by `θ_{t−1}`. Returns `‖θ_{t1} − θ̄_{t1}‖`.
#[allow(clippy::too_many_arguments)]
pub fn deviation(
    sys: &dyn System,
    theta_anchor: &DVector<f64>,
    states: &[Maintained],
    t0: usize,
    t1: usize,
    schedule: &StepSchedule,
    rule: &dyn UpdateRule,
    phi: &dyn ParamUpdateOp,
) -> Result<f64> {
    if t1 < t0 || states.is_empty() || t1 - t0 >= states.len() {
        return Err(Error::IndexOutOfRange { index: t1, lo: t0, hi: t0 + states.len().saturating_sub(1) });
    }
    let p = sys.param_dim();
    let direction = |t: usize, m: &Maintained, theta: &DVector<f64>| -> Result<DVector<f64>> {
        let g = m.j.tr_mul(&sys.loss_grad(t, &m.s));
        rule.direction(&RuleInput { t, v: &g, s: &m.s, theta, eta: schedule.eta(t) })
    };
    let mut theta = theta_anchor.clone();
    let mut theta_bar = theta_anchor.clone();
    let mut bar = states[0].clone();
    for t in t0 + 1..=t1 {
        let th = theta.rows(0, p).into_owned();
        let jac_s = sys.jac_state(t, &bar.s, &th);
        let jac_theta = sys.jac_param(t, &bar.s, &th);
        bar = Maintained { s: crate::dynamics::step(sys, t, &bar.s, &th)?, j: jac_s * &bar.j + jac_theta };
        let eta = schedule.eta(t);
        let v = direction(t, &states[t - t0], &theta)?;
        let v_bar = direction(t, &bar, &theta)?;
        theta_bar = phi.apply(t, &theta_bar, &(v_bar * eta));
        theta = phi.apply(t, &theta, &(v * eta));
    }
    Ok((theta - theta_bar).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearSystem, StateLoss};
    use crate::rng::trial_rng;
    use crate::updates::{Identity, PhiPlain};

    fn scalar(a: f64) -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            None,
            StateLoss::Linear(DVector::from_element(1, 1.0)),
        )
        .unwrap()
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn frozen_parameter_follows_geometric_jacobian() {
        let sys = scalar(0.5);
        let learner = Learner { sys: &sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
        let mut ls = LearnerState::new(&sys, &Identity, v(0.0), v(0.7)).unwrap();
        let mut rng = trial_rng("t", 0);
        for t in 1..=20 {
            ls = rtrl_step(&learner, &ls, 0.0, &mut rng).unwrap().0;
            let expected = (1.0 - 0.5f64.powi(t)) / 0.5;
            assert!((ls.j.to_dense()[(0, 0)] - expected).abs() < 1e-14);
            assert_eq!(ls.theta[0], 0.7);
        }
    }

    #[test]
    fn open_loop_gradient_on_scalar_system() {
        let g = open_loop_gradient(&scalar(0.5), &v(0.3), &v(-4.0), 3).unwrap();
        assert!((g[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn negative_step_is_rejected() {
        let sys = scalar(0.5);
        let learner = Learner { sys: &sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
        let ls = LearnerState::new(&sys, &Identity, v(0.0), v(0.7)).unwrap();
        assert!(rtrl_step(&learner, &ls, -1.0, &mut trial_rng("t", 0)).is_err());
    }

    #[test]
    fn overflow_aborts_with_time() {
        let sys = scalar(10.0);
        let learner = Learner { sys: &sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
        let ls = LearnerState::new(&sys, &Identity, v(1.0), v(0.0)).unwrap();
        let sched = StepSchedule::new(0.0, 1.0).unwrap();
        let rec = run_learning(&learner, ls, &sched, &RunOptions::new(100), &mut trial_rng("t", 0)).unwrap();
        assert_eq!(rec.abort_t, Some(13));
        assert!(rec.rows.last().unwrap().aborted);
    }

    #[test]
    fn csv_round_trip_keeps_rows() {
        let sys = scalar(0.5);
        let learner = Learner { sys: &sys, rule: &Identity, phi: &PhiPlain, inj: &ExactRtrl };
        let ls = LearnerState::new(&sys, &Identity, v(0.0), v(1.0)).unwrap();
        let mut opts = RunOptions::new(50);
        opts.record_every = 7;
        opts.theta_star = Some(v(0.0));
        let sched = StepSchedule::new(0.01, 0.5).unwrap();
        let rec = run_learning(&learner, ls, &sched, &opts, &mut trial_rng("t", 0)).unwrap();
        let text = rec.to_csv().unwrap();
        assert!(text.starts_with(b"t,theta_dist,loss,grad_norm,aborted\n"));
        let back = TrialRecord::from_csv(&text).unwrap();
        assert_eq!(back.rows.len(), rec.rows.len());
        assert!(back.rows[0].loss.is_nan());
        assert_eq!(back.rows[1..], rec.rows[1..]);
        assert_eq!(rec.rows.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0, 7, 14, 21, 28, 35, 42, 49, 50]);
    }
}
