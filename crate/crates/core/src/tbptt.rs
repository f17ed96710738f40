//! Truncated backpropagation through time, non-overlapping variant, with
//! truncation intervals that grow like `t^A`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_trajectory_from, System};
use crate::error::{Error, Result};
use crate::linalg::guard;
use crate::rtrl::{RecordRow, RunOptions, TrialRecord};
use crate::schedules::{validate_exponents, AlgorithmClass, ExponentProfile, StepSchedule};
use crate::updates::ParamUpdateOp;

/// Truncation times `t_0 = 0 < t_1 < …`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSchedule {
    /// `t_1 = 1`, `t_{k+1} = t_k + ceil(t_k^A)` with `A ∈ (0, 1)`.
    Growing { exponent: f64 },
    /// `t_k = k·L`.
    Fixed { length: usize },
}

impl TruncationSchedule {
    pub fn growing(exponent: f64) -> Result<Self> {
        if !(exponent > 0.0 && exponent < 1.0) {
            return Err(Error::config(format!("truncation exponent A={exponent} must lie in (0, 1)")));
        }
        Ok(TruncationSchedule::Growing { exponent })
    }

    pub fn fixed(length: usize) -> Result<Self> {
        if length == 0 {
            return Err(Error::config("fixed truncation length must be positive"));
        }
        Ok(TruncationSchedule::Fixed { length })
    }

    /// `t_{k+1}` from `t_k`.
    pub fn next(&self, t_k: usize) -> usize {
        match *self {
            TruncationSchedule::Growing { exponent } => {
                if t_k == 0 {
                    1
                } else {
                    t_k + ((t_k as f64).powf(exponent).ceil() as usize).max(1)
                }
            }
            TruncationSchedule::Fixed { length } => t_k + length,
        }
    }

    /// The lazily generated sequence `t_0, t_1, …`.
    pub fn times(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(0usize), move |&t| Some(self.next(t)))
    }

    /// Truncation exponent used for validation; `None` for fixed lengths.
    pub fn exponent(&self) -> Option<f64> {
        match *self {
            TruncationSchedule::Growing { exponent } => Some(exponent),
            TruncationSchedule::Fixed { .. } => None,
        }
    }
}

impl fmt::Display for TruncationSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationSchedule::Growing { exponent } => write!(f, "A={exponent}"),
            TruncationSchedule::Fixed { length } => write!(f, "L={length}"),
        }
    }
}

impl FromStr for TruncationSchedule {
    type Err = Error;

    /// `A=<exponent>` or `L=<length>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad truncation `{s}` (expected A=<exponent> or L=<length>)"));
        if let Some(a) = s.strip_prefix("A=") {
            Self::growing(a.parse().map_err(|_| bad())?)
        } else if let Some(l) = s.strip_prefix("L=") {
            Self::fixed(l.parse().map_err(|_| bad())?)
        } else {
            Err(bad())
        }
    }
}

/// Result of one forward/backward pass over an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGradient {
    /// `Σ_{t=t_start+1}^{t_end} ∂L_{t_start↦t}(s_start, θ)/∂θ`.
    pub grad: DVector<f64>,
    /// State at `t_end`.
    pub end_state: DVector<f64>,
    /// Mean of `ℓ_t` over the interval.
    pub mean_loss: f64,
    /// Number of stored states visited by the backward pass.
    pub backward_visits: usize,
}

/// One forward pass storing the interval's states, then one adjoint pass.
pub fn bptt_interval_gradient(
    sys: &dyn System,
    s_start: &DVector<f64>,
    theta: &DVector<f64>,
    t_start: usize,
    t_end: usize,
) -> Result<IntervalGradient> {
    if t_end <= t_start {
        return Err(Error::contract(format!("interval ({t_start}, {t_end}] is empty")));
    }
    // Memory is one state per step of the interval.
    let traj = run_trajectory_from(sys, t_start, s_start, theta, t_end)?;
    let states = &traj.states;
    let mut lambda = DVector::zeros(states[states.len() - 1].len());
    let mut grad = DVector::zeros(sys.param_dim());
    let mut loss = 0.0;
    let mut visits = 0;
    for t in (t_start + 1..=t_end).rev() {
        let k = t - t_start;
        lambda += sys.loss_grad(t, &states[k]);
        loss += sys.loss(t, &states[k]);
        let prev = &states[k - 1];
        grad += sys.jac_param(t, prev, theta).tr_mul(&lambda);
        lambda = sys.jac_state(t, prev, theta).tr_mul(&lambda);
        visits += 1;
    }
    guard("interval gradient", t_end, grad.as_slice())?;
    Ok(IntervalGradient {
        grad,
        end_state: states[states.len() - 1].clone(),
        mean_loss: loss / (t_end - t_start) as f64,
        backward_visits: visits,
    })
}

/// Per-time open-loop gradients `∂L_{t_start↦t}/∂θ` by forward RTRL with
/// `J` reset to zero at `t_start`.
pub fn rtrl_interval_gradients(
    sys: &dyn System,
    s_start: &DVector<f64>,
    theta: &DVector<f64>,
    t_start: usize,
    t_end: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut s = s_start.clone();
    let mut j = DMatrix::zeros(s.len(), sys.param_dim());
    let mut out = Vec::with_capacity(t_end.saturating_sub(t_start));
    for t in t_start + 1..=t_end {
        let jac_s = sys.jac_state(t, &s, theta);
        let jac_theta = sys.jac_param(t, &s, theta);
        s = crate::dynamics::step(sys, t, &s, theta)?;
        j = jac_s * j + jac_theta;
        out.push(j.tr_mul(&sys.loss_grad(t, &s)));
    }
    Ok(out)
}

/// What happens to the state at an interval boundary. `J` always restarts
/// from zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ResetPolicy {
    #[default]
    CarryState,
    ResetTo(DVector<f64>),
}

/// How the interval's gradient is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Application {
    /// `θ_{t_{k+1}} = Φ(θ_{t_k}, η_{t_{k+1}} Σ gradients)`.
    #[default]
    Aggregated,
    /// `Φ` applied once per time step with `η_t` and that step's gradient,
    /// all gradients taken at `θ_{t_k}`.
    PerStep,
}

#[derive(Debug, Clone)]
pub struct TbpttOptions {
    pub reset: ResetPolicy,
    pub application: Application,
    /// Exponents checked against the truncation unless `force` is set.
    pub profile: Option<ExponentProfile>,
    pub force: bool,
    pub run: RunOptions,
}

impl TbpttOptions {
    pub fn new(horizon: usize) -> Self {
        TbpttOptions { reset: ResetPolicy::CarryState, application: Application::Aggregated, profile: None, force: false, run: RunOptions::new(horizon) }
    }
}

/// Runs TBPTT over every complete truncation interval ending at or before
/// `horizon`. Records one row per interval, at its end.
#[allow(clippy::too_many_arguments)]
pub fn run_tbptt(
    sys: &dyn System,
    s0: &DVector<f64>,
    theta0: &DVector<f64>,
    schedule: &StepSchedule,
    trunc: &TruncationSchedule,
    phi: &dyn ParamUpdateOp,
    opts: &TbpttOptions,
) -> Result<TrialRecord> {
    schedule.validate()?;
    let horizon = opts.run.horizon;
    if horizon == 0 {
        return Err(Error::contract("run horizon must be at least 1"));
    }
    if theta0.len() != sys.param_dim() {
        return Err(Error::contract(format!("theta0 has length {}, expected {}", theta0.len(), sys.param_dim())));
    }
    if let (Some(profile), false) = (opts.profile, opts.force) {
        let profile = ExponentProfile { class: AlgorithmClass::Tbptt, truncation: trunc.exponent(), ..profile };
        let verdict = validate_exponents(&profile, schedule.b);
        if !verdict.valid {
            return Err(Error::config(format!("invalid TBPTT exponents: {}", verdict.violations.join("; "))));
        }
    }
    let mut theta = theta0.clone();
    let mut s = s0.clone();
    let mut abort_t = None;
    let initial_dist = opts.run.dist(&theta);
    let mut rows = vec![RecordRow::initial(0, initial_dist)];
    let mut t_k = 0;
    let mut k = 0;
    loop {
        let t_next = trunc.next(t_k);
        if t_next > horizon {
            break;
        }
        let start = match &opts.reset {
            ResetPolicy::ResetTo(r) if t_k > 0 => r.clone(),
            _ => s.clone(),
        };
        let step = || -> Result<(DVector<f64>, IntervalGradient)> {
            let ig = bptt_interval_gradient(sys, &start, &theta, t_k, t_next)?;
            let next = match opts.application {
                Application::Aggregated => phi.apply(t_next, &theta, &(&ig.grad * schedule.eta(t_next))),
                Application::PerStep => {
                    let grads = rtrl_interval_gradients(sys, &start, &theta, t_k, t_next)?;
                    grads.iter().enumerate().fold(theta.clone(), |th, (i, g)| {
                        let t = t_k + 1 + i;
                        phi.apply(t, &th, &(g * schedule.eta(t)))
                    })
                }
            };
            guard("parameter", t_next, next.as_slice())?;
            Ok((next, ig))
        };
        match step() {
            Ok((next, ig)) => {
                theta = next;
                s = ig.end_state;
                rows.push(RecordRow {
                    t: t_next,
                    theta_dist: opts.run.dist(&theta),
                    loss: ig.mean_loss,
                    grad_norm: ig.grad.norm(),
                    aborted: false,
                    interval_k: Some(k),
                });
            }
            Err(Error::NumericOverflow { t, .. }) => {
                abort_t = Some(t);
                rows.push(RecordRow {
                    t,
                    theta_dist: opts.run.dist(&theta),
                    loss: f64::NAN,
                    grad_norm: f64::NAN,
                    aborted: true,
                    interval_k: Some(k),
                });
                break;
            }
            Err(e) => return Err(e),
        }
        t_k = t_next;
        k += 1;
    }
    Ok(TrialRecord { rows, initial_dist, final_theta: theta, abort_t, config_hash: opts.run.config_hash })
}
