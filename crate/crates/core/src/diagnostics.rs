//! Checkers for the hypotheses of the convergence results: spectral radius
//! at a horizon, stability along the target trajectory, local optimality of
//! a candidate parameter, and convergence detection on trial records.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{run_trajectory, System};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::linalg::op_norm;
use crate::rng::trial_rng;
use crate::rtrl::TrialRecord;
use crate::schedules::{ergodic_exponent_estimate, ErgodicEstimate};
use crate::updates::{estimate_lambda, is_positive_stable, open_loop_directions, LambdaEstimate, UpdateRule};

/// Every product of `k` consecutive operators in the tested window has
/// operator norm `max_product_norm ≤ 1 − alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonCertificate {
    pub k: usize,
    pub alpha: f64,
    pub max_product_norm: f64,
}

/// Max sliding-product norms for `k = 1, 2, …` and the first certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProfile {
    /// `max_norms[k − 1] = max_t ‖A_{t+k−1} ⋯ A_t‖`.
    pub max_norms: Vec<f64>,
    pub certificate: Option<HorizonCertificate>,
}

fn check_conforming(ops: &[DMatrix<f64>]) -> Result<()> {
    for (i, w) in ops.windows(2).enumerate() {
        if w[1].ncols() != w[0].nrows() {
            return Err(Error::contract(format!(
                "operators {i} ({:?}) and {} ({:?}) do not compose",
                w[0].shape(),
                i + 1,
                w[1].shape()
            )));
        }
    }
    Ok(())
}

/// Sliding-product norms for every `k ≤ k_max` (bounded by the sequence
/// length), without stopping at the first certificate.
pub fn horizon_profile(ops: &[DMatrix<f64>], k_max: usize) -> Result<HorizonProfile> {
    scan(ops, k_max, false)
}

/// Smallest `k ≤ k_max` with `max_t ‖A_{t+k−1} ⋯ A_t‖ < 1`, if any.
pub fn spectral_radius_horizon(ops: &[DMatrix<f64>], k_max: usize) -> Result<HorizonProfile> {
    scan(ops, k_max, true)
}

fn scan(ops: &[DMatrix<f64>], k_max: usize, stop: bool) -> Result<HorizonProfile> {
    check_conforming(ops)?;
    let n = ops.len();
    let mut products: Vec<DMatrix<f64>> = ops.to_vec();
    let mut max_norms = Vec::new();
    let mut certificate = None;
    for k in 1..=k_max.min(n) {
        if k > 1 {
            // products[t] covers A_t … A_{t+k−2}; extend by A_{t+k−1}.
            let prev = std::mem::take(&mut products);
            products = map_indexed(n + 1 - k, |t| &ops[t + k - 1] * &prev[t]);
        }
        let m = map_indexed(products.len(), |t| op_norm(&products[t])).into_iter().fold(0.0, f64::max);
        max_norms.push(m);
        if certificate.is_none() && m < 1.0 {
            certificate = Some(HorizonCertificate { k, alpha: 1.0 - m, max_product_norm: m });
            if stop {
                break;
            }
        }
    }
    Ok(HorizonProfile { max_norms, certificate })
}

/// `A_t = ∂T_t/∂s` along the trajectory of `θ*` from `s0*` over `[1, T]`,
/// checked with [`spectral_radius_horizon`]. A sampled check on a finite
/// window, not a proof for all `t`.
pub fn check_stability(
    sys: &dyn System,
    theta: &DVector<f64>,
    s0: &DVector<f64>,
    horizon: usize,
    k_max: usize,
) -> Result<HorizonProfile> {
    if horizon == 0 {
        return Err(Error::contract("stability window must contain at least one step"));
    }
    let traj = run_trajectory(sys, s0, theta, horizon)?;
    let ops: Vec<DMatrix<f64>> = (1..=horizon).map(|t| sys.jac_state(t, &traj.states[t - 1], theta)).collect();
    spectral_radius_horizon(&ops, k_max)
}

impl fmt::Display for HorizonProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.certificate {
            Some(c) => {
                writeln!(f, "certified: true")?;
                writeln!(f, "k: {}", c.k)?;
                writeln!(f, "alpha: {}", c.alpha)?;
                write!(f, "max_product_norm: {}", c.max_product_norm)
            }
            None => {
                writeln!(f, "certified: false")?;
                write!(f, "k_tested: {}", self.max_norms.len())
            }
        }
    }
}

/// Verdict on a candidate optimum: open-loop updates average to zero and
/// the averaged extended Hessian is positive-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptimumReport {
    /// `‖Σ_{s≤t} U_s‖` for `t = 1..=T`.
    pub partial_sum_norms: Vec<f64>,
    /// `‖(1/T) Σ U_t‖`.
    pub avg_update_norm: f64,
    /// Growth exponent of the partial sums (below one when the average vanishes).
    pub update_rate: ErgodicEstimate,
    pub lambda: LambdaEstimate,
    pub positive_stable: bool,
    pub min_real_part: f64,
}

impl LocalOptimumReport {
    /// Partial sums grow sublinearly and Λ is positive-stable.
    pub fn pass(&self) -> bool {
        let vanishing = self.update_rate.degenerate || self.update_rate.a_hat < 0.9;
        vanishing && self.positive_stable
    }

    pub fn csv_header() -> &'static str {
        "avg_update_norm,update_a_hat,min_real_part,positive_stable,pass"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.avg_update_norm,
            self.update_rate.a_hat,
            self.min_real_part,
            self.positive_stable,
            self.pass()
        )
    }
}

impl fmt::Display for LocalOptimumReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "avg_update_norm: {:e}", self.avg_update_norm)?;
        writeln!(f, "update_a_hat: {}", self.update_rate.a_hat)?;
        writeln!(f, "update_sums_degenerate: {}", self.update_rate.degenerate)?;
        if let Some(r) = &self.lambda.rate {
            writeln!(f, "lambda_a_hat: {}", r.a_hat)?;
        }
        writeln!(f, "lambda_dim: {}", self.lambda.lambda.nrows())?;
        writeln!(f, "min_real_part: {}", self.min_real_part)?;
        writeln!(f, "positive_stable: {}", self.positive_stable)?;
        write!(f, "verdict: {}", if self.pass() { "pass" } else { "fail" })
    }
}

/// Open-loop updates and Λ at a frozen candidate `θ⁺` over `T ≥ 200` steps.
pub fn local_optimum_report(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta: &DVector<f64>,
    horizon: usize,
) -> Result<LocalOptimumReport> {
    if horizon < 200 {
        return Err(Error::contract(format!("local optimum report needs T >= 200, got {horizon}")));
    }
    let updates = open_loop_directions(sys, rule, s0, theta, horizon)?;
    let mut sum = DVector::zeros(theta.len());
    let mut partial_sum_norms = Vec::with_capacity(horizon);
    for u in &updates {
        sum += u;
        partial_sum_norms.push(sum.norm());
    }
    let update_rate = ergodic_exponent_estimate(&updates)?;
    let lambda = estimate_lambda(sys, rule, s0, theta, horizon)?;
    let (positive_stable, min_real_part) = is_positive_stable(&lambda.lambda)?;
    Ok(LocalOptimumReport {
        avg_update_norm: sum.norm() / horizon as f64,
        partial_sum_norms,
        update_rate,
        lambda,
        positive_stable,
        min_real_part,
    })
}

/// Heuristic modulus of continuity of the averaged extended Hessian: the
/// largest `‖Λ(θ + δ) − Λ(θ)‖` over `samples` random `δ` of each radius.
/// No finite probe can certify equicontinuity; this only flags obvious
/// non-smoothness.
pub fn hessian_modulus_probe(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta: &DVector<f64>,
    horizon: usize,
    radii: &[f64],
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    let base = estimate_lambda(sys, rule, s0, theta, horizon)?.lambda;
    let mut rng = trial_rng("hessian-modulus", 0);
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let dir = DVector::from_fn(theta.len(), |_, _| rng.random_range(-1.0..1.0));
            let delta = if dir.norm() > 0.0 { dir.normalize() * r } else { dir };
            let lam = estimate_lambda(sys, rule, s0, &(theta + delta), horizon)?.lambda;
            worst = worst.max(op_norm(&(lam - &base)));
        }
        out.push((r, worst));
    }
    Ok(out)
}

/// Outcome of scanning a trial record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Converged { t: usize },
    Diverged { t: usize },
    Undecided,
}

impl fmt::Display for Convergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Convergence::Converged { t } => write!(f, "converged at t={t}"),
            Convergence::Diverged { t } => write!(f, "diverged at t={t}"),
            Convergence::Undecided => write!(f, "undecided"),
        }
    }
}

/// Converged at `t_c + window` once `theta_dist ≤ tol` has held on every
/// recorded row from `t_c` through `t_c + window`; diverged at an abort.
pub fn convergence_detector(record: &TrialRecord, tol: f64, window: usize) -> Convergence {
    let mut run_start: Option<usize> = None;
    for row in &record.rows {
        if row.aborted {
            return Convergence::Diverged { t: row.t };
        }
        if row.theta_dist <= tol {
            let start = *run_start.get_or_insert(row.t);
            if row.t - start >= window {
                return Convergence::Converged { t: start + window };
            }
        } else {
            run_start = None;
        }
    }
    Convergence::Undecided
}
