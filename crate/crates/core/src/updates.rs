//! Update rules `U_t`, parameter update operators `Φ_t`, and the
//! extended-Hessian / Lyapunov algebra used to certify local optima.

use std::fmt::{self, Debug};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Momentum, SampleLoss, System};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::linalg::eigenvalues;
use crate::schedules::{ergodic_exponent_estimate, ErgodicEstimate, StepSchedule};

/// Arguments of `U_t(v, s, θ⁺)`.
#[derive(Debug, Clone, Copy)]
pub struct RuleInput<'a> {
    pub t: usize,
    /// Raw gradient `∂ℓ_t · J_t`, length `p`.
    pub v: &'a DVector<f64>,
    pub s: &'a DVector<f64>,
    /// Extended parameter `(θ, ψ)` at `t − 1`.
    pub theta: &'a DVector<f64>,
    /// `η_t`; only rules with a fixed inertia read it.
    pub eta: f64,
}

pub trait UpdateRule: Send + Sync + Debug {
    /// Number of auxiliary coordinates `ψ` appended to `θ`.
    fn aux_dim(&self, _p: usize) -> usize {
        0
    }

    /// Update direction on `θ⁺`, of length `p + aux_dim(p)`.
    fn direction(&self, input: &RuleInput<'_>) -> Result<DVector<f64>>;

    /// `ψ₀` when the learner starts without statistics; `None` leaves the
    /// auxiliary coordinates as they are.
    fn initial_aux(&self, _input: &RuleInput<'_>) -> Result<Option<DVector<f64>>> {
        Ok(None)
    }

    /// Whether `direction` is affine in `v`.
    fn is_affine(&self) -> bool {
        true
    }

    fn name(&self) -> String;
}

/// `U(v) = v`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl UpdateRule for Identity {
    fn direction(&self, input: &RuleInput<'_>) -> Result<DVector<f64>> {
        Ok(input.v.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

type MatrixFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// `U(v) = P(θ) v`.
#[derive(Clone)]
pub struct Preconditioned {
    name: String,
    p: Arc<MatrixFn>,
}

impl Debug for Preconditioned {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Preconditioned({})", self.name)
    }
}

impl Preconditioned {
    pub fn new(name: impl Into<String>, p: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Preconditioned { name: name.into(), p: Arc::new(p) }
    }

    pub fn constant(name: impl Into<String>, m: DMatrix<f64>) -> Self {
        Self::new(name, move |_| m.clone())
    }

    pub fn matrix(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.p)(theta)
    }
}

impl UpdateRule for Preconditioned {
    fn direction(&self, input: &RuleInput<'_>) -> Result<DVector<f64>> {
        let p = input.v.len();
        let m = self.matrix(&input.theta.rows(0, p).into_owned());
        if m.shape() != (p, p) || m.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(format!("preconditioner `{}` is not a finite {p}x{p} matrix", self.name)));
        }
        Ok(m * input.v)
    }

    fn name(&self) -> String {
        format!("precond:{}", self.name)
    }
}

/// Shape of the adaptive statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    /// `Ψ = g ⊙ g`, `P = diag(ψ + ε)⁻¹`.
    Rmsprop,
    /// `Ψ = g gᵀ`, `P = (ψ + εI)⁻¹`.
    Ong,
}

/// Where the gradient `g` inside `Ψ` comes from.
#[derive(Debug, Clone)]
pub enum StatSource {
    /// The raw direction `v` handed to the rule.
    Direction,
    /// The per-sample loss gradient `∂θℓ(x_t, y_t, θ_{t−1})`.
    Sample(Arc<dyn SampleLoss>),
}

/// How fast `ψ` tracks `Ψ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inertia {
    /// `β_t = 1 − c η_t`.
    Coupled { c: f64 },
    /// Constant `β`, the classical fixed-rate average.
    Fixed { beta: f64 },
}

/// When `P` reads `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Timing {
    /// `P(θ_{t−1}, ψ_{t−1})`.
    #[default]
    Simultaneous,
    /// `P(θ_{t−1}, ψ_t)`: the statistic is refreshed first.
    PsiFirst,
}

impl FromStr for Timing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(Timing::Simultaneous),
            "psi_first" => Ok(Timing::PsiFirst),
            other => Err(Error::config(format!("unknown timing `{other}` (simultaneous or psi_first)"))),
        }
    }
}

/// Adaptive preconditioning on `θ⁺ = (θ, ψ)`: direction
/// `(P(θ, ψ) v, c ψ − c Ψ_t(θ))`.
#[derive(Debug, Clone)]
pub struct Adaptive {
    pub statistic: Statistic,
    pub source: StatSource,
    pub inertia: Inertia,
    pub eps: f64,
    pub timing: Timing,
    pub psi0: Option<DVector<f64>>,
}

impl Adaptive {
    pub fn rmsprop(c: f64) -> Result<Self> {
        Self::new(Statistic::Rmsprop, Inertia::Coupled { c })
    }

    pub fn ong(c: f64) -> Result<Self> {
        Self::new(Statistic::Ong, Inertia::Coupled { c })
    }

    pub fn new(statistic: Statistic, inertia: Inertia) -> Result<Self> {
        match inertia {
            Inertia::Coupled { c } if !(c > 0.0 && c.is_finite()) => {
                return Err(Error::config(format!("adaptive inertia c={c} must be positive")))
            }
            Inertia::Fixed { beta } if !(0.0..1.0).contains(&beta) => {
                return Err(Error::config(format!("fixed inertia beta={beta} must lie in [0, 1)")))
            }
            _ => {}
        }
        Ok(Adaptive { statistic, source: StatSource::Direction, inertia, eps: 1e-8, timing: Timing::Simultaneous, psi0: None })
    }

    pub fn with_source(mut self, source: StatSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_timing(mut self, timing: Timing) -> Self {
        self.timing = timing;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Checks `c η_t ∈ (0, 1]` for every `t`, i.e. `c γ ≤ 1`.
    pub fn check_schedule(&self, schedule: &StepSchedule) -> Result<()> {
        if let Inertia::Coupled { c } = self.inertia {
            if c * schedule.gamma > 1.0 {
                return Err(Error::config(format!(
                    "adaptive inertia needs c*eta_t <= 1; c={c} with gamma={} gives beta_1 < 0",
                    schedule.gamma
                )));
            }
        }
        Ok(())
    }

    fn gradient(&self, input: &RuleInput<'_>) -> DVector<f64> {
        match &self.source {
            StatSource::Direction => input.v.clone(),
            StatSource::Sample(l) => l.grad(input.t, &input.theta.rows(0, input.v.len()).into_owned()),
        }
    }

    /// `Ψ_t`, flattened.
    pub fn observed(&self, input: &RuleInput<'_>) -> Result<DVector<f64>> {
        let g = self.gradient(input);
        let psi = match self.statistic {
            Statistic::Rmsprop => g.component_mul(&g),
            Statistic::Ong => {
                let m = &g * g.transpose();
                DVector::from_column_slice(m.as_slice())
            }
        };
        if psi.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow { stage: "adaptive statistic", t: input.t });
        }
        Ok(psi)
    }

    /// `c` in effect at step size `eta`.
    fn coupling(&self, eta: f64) -> f64 {
        match self.inertia {
            Inertia::Coupled { c } => c,
            Inertia::Fixed { beta } if eta > 0.0 => (1.0 - beta) / eta,
            Inertia::Fixed { .. } => 0.0,
        }
    }

    /// `P(θ, ψ)`.
    pub fn preconditioner(&self, psi: &DVector<f64>, p: usize) -> Result<DMatrix<f64>> {
        match self.statistic {
            Statistic::Rmsprop => {
                let d = psi.map(|x| 1.0 / (x + self.eps));
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::domain("RMSProp preconditioner is singular"));
                }
                Ok(DMatrix::from_diagonal(&d))
            }
            Statistic::Ong => {
                let m = DMatrix::from_column_slice(p, p, psi.as_slice()) + DMatrix::identity(p, p) * self.eps;
                m.try_inverse().ok_or_else(|| Error::domain("natural-gradient statistic is singular"))
            }
        }
    }
}

impl UpdateRule for Adaptive {
    fn aux_dim(&self, p: usize) -> usize {
        match self.statistic {
            Statistic::Rmsprop => p,
            Statistic::Ong => p * p,
        }
    }

    fn direction(&self, input: &RuleInput<'_>) -> Result<DVector<f64>> {
        let p = input.v.len();
        let aux = self.aux_dim(p);
        if input.theta.len() != p + aux {
            return Err(Error::contract(format!("adaptive rule expects theta of length {}, got {}", p + aux, input.theta.len())));
        }
        let psi = input.theta.rows(p, aux).into_owned();
        let big_psi = self.observed(input)?;
        let c = self.coupling(input.eta);
        let psi_dir = (&psi - big_psi) * c;
        let psi_eval = match self.timing {
            Timing::Simultaneous => psi,
            Timing::PsiFirst => &psi - &psi_dir * input.eta,
        };
        let pv = self.preconditioner(&psi_eval, p)? * input.v;
        let mut out = DVector::zeros(p + aux);
        out.rows_mut(0, p).copy_from(&pv);
        out.rows_mut(p, aux).copy_from(&psi_dir);
        Ok(out)
    }

    fn initial_aux(&self, input: &RuleInput<'_>) -> Result<Option<DVector<f64>>> {
        match &self.psi0 {
            Some(p) => Ok(Some(p.clone())),
            None => self.observed(input).map(Some),
        }
    }

    fn is_affine(&self) -> bool {
        matches!(self.source, StatSource::Sample(_))
    }

    fn name(&self) -> String {
        match self.statistic {
            Statistic::Rmsprop => "rmsprop".into(),
            Statistic::Ong => "ong".into(),
        }
    }
}

/// Adam without bias correction: RTRL on the momentum system with an
/// RMSProp rule whose statistic reads the per-sample gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub inertia: Inertia,
    pub eps: f64,
    pub timing: Timing,
}

impl AdamConfig {
    pub fn new(beta1: f64, c: f64) -> Self {
        AdamConfig { beta1, inertia: Inertia::Coupled { c }, eps: 1e-8, timing: Timing::PsiFirst }
    }

    pub fn build(&self, loss: Arc<dyn SampleLoss>) -> Result<(Momentum<Arc<dyn SampleLoss>>, Adaptive)> {
        let system = Momentum::new(self.beta1, loss.clone())?;
        let rule = Adaptive::new(Statistic::Rmsprop, self.inertia)?
            .with_source(StatSource::Sample(loss))
            .with_timing(self.timing)
            .with_eps(self.eps);
        Ok((system, rule))
    }
}

/// Rule selection by name: `identity`, `precond:<name>`, `rmsprop`, `ong`,
/// `adam`.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleSpec {
    Identity,
    Precond(PrecondSpec),
    Rmsprop,
    Ong,
    Adam,
}

/// Named preconditioners: `scale:<k>` is `k·I`, `diag:<d1>,<d2>,…` is
/// `diag(d)`.
#[derive(Debug, Clone, PartialEq)]
pub enum PrecondSpec {
    Scale(f64),
    Diag(Vec<f64>),
}

impl PrecondSpec {
    pub fn build(&self, p: usize) -> Result<Preconditioned> {
        match self {
            PrecondSpec::Scale(k) => Ok(Preconditioned::constant(format!("scale:{k}"), DMatrix::identity(p, p) * *k)),
            PrecondSpec::Diag(d) if d.len() == p => {
                let name = format!("diag:{}", d.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
                Ok(Preconditioned::constant(name, DMatrix::from_diagonal(&DVector::from_column_slice(d))))
            }
            PrecondSpec::Diag(d) => Err(Error::config(format!("diagonal preconditioner has {} entries for p={p}", d.len()))),
        }
    }
}

impl FromStr for RuleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad_num = |x: &str| Error::config(format!("bad number `{x}` in rule `{s}`"));
        match s {
            "identity" | "sgd" => Ok(RuleSpec::Identity),
            "rmsprop" => Ok(RuleSpec::Rmsprop),
            "ong" => Ok(RuleSpec::Ong),
            "adam" => Ok(RuleSpec::Adam),
            _ => match s.strip_prefix("precond:") {
                Some(rest) => {
                    if let Some(k) = rest.strip_prefix("scale:") {
                        Ok(RuleSpec::Precond(PrecondSpec::Scale(k.parse().map_err(|_| bad_num(k))?)))
                    } else if let Some(d) = rest.strip_prefix("diag:") {
                        let vals = d.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| bad_num(x))).collect::<Result<_>>()?;
                        Ok(RuleSpec::Precond(PrecondSpec::Diag(vals)))
                    } else if rest == "double" {
                        Ok(RuleSpec::Precond(PrecondSpec::Scale(2.0)))
                    } else {
                        Err(Error::config(format!("unknown preconditioner `{rest}` (scale:<k>, diag:<d1>,..., double)")))
                    }
                }
                None => Err(Error::config(format!("unknown update rule `{s}` (identity, precond:<name>, rmsprop, ong, adam)"))),
            },
        }
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSpec::Identity => f.write_str("identity"),
            RuleSpec::Rmsprop => f.write_str("rmsprop"),
            RuleSpec::Ong => f.write_str("ong"),
            RuleSpec::Adam => f.write_str("adam"),
            RuleSpec::Precond(PrecondSpec::Scale(k)) => write!(f, "precond:scale:{k}"),
            RuleSpec::Precond(PrecondSpec::Diag(d)) => {
                write!(f, "precond:diag:{}", d.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
            }
        }
    }
}

/// `Φ_t(θ, w)` with `w = η_t v_t`.
pub trait ParamUpdateOp: Send + Sync + Debug {
    fn apply(&self, t: usize, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
}

/// `θ − w`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhiPlain;

impl ParamUpdateOp for PhiPlain {
    fn apply(&self, _t: usize, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        theta - w
    }
}

/// `θ − w / (1 + ‖w‖)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhiClipped;

impl ParamUpdateOp for PhiClipped {
    fn apply(&self, _t: usize, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        theta - w / (1.0 + w.norm())
    }
}

/// `θ − w` followed by clamping the first `dims` coordinates to `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
pub struct PhiProjected {
    pub lo: f64,
    pub hi: f64,
    pub dims: usize,
}

impl ParamUpdateOp for PhiProjected {
    fn apply(&self, _t: usize, theta: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = theta - w;
        for x in out.iter_mut().take(self.dims) {
            *x = x.clamp(self.lo, self.hi);
        }
        out
    }
}

/// `U_t(∂θL_{t↦}(s0, θ), F_t(s0, θ), θ⁺)` for every `t ≤ horizon`, at a
/// frozen extended parameter. The rule is evaluated with `η = 0`.
pub fn open_loop_directions(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta_ext: &DVector<f64>,
    horizon: usize,
) -> Result<Vec<DVector<f64>>> {
    let p = sys.param_dim();
    let theta = theta_ext.rows(0, p).into_owned();
    let mut s = s0.clone();
    let mut j = DMatrix::zeros(s.len(), p);
    let mut out = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let jac_s = sys.jac_state(t, &s, &theta);
        let jac_theta = sys.jac_param(t, &s, &theta);
        s = crate::dynamics::step(sys, t, &s, &theta)?;
        j = jac_s * j + jac_theta;
        let v = j.tr_mul(&sys.loss_grad(t, &s));
        out.push(rule.direction(&RuleInput { t, v: &v, s: &s, theta: theta_ext, eta: 0.0 })?);
    }
    Ok(out)
}

/// Extended Hessians `H_t` for `t = 1..=horizon` by central differences of
/// the open-loop directions in `θ⁺`; one pair of passes per coordinate.
pub fn extended_hessians_fd(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta_ext: &DVector<f64>,
    horizon: usize,
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let n = theta_ext.len();
    let cols = map_indexed(n, |k| -> Result<Vec<DVector<f64>>> {
        let mut plus = theta_ext.clone();
        let mut minus = theta_ext.clone();
        plus[k] += h;
        minus[k] -= h;
        let up = open_loop_directions(sys, rule, s0, &plus, horizon)?;
        let down = open_loop_directions(sys, rule, s0, &minus, horizon)?;
        Ok(up.into_iter().zip(down).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let out: Vec<DMatrix<f64>> = (0..horizon).map(|t| DMatrix::from_fn(n, n, |i, k| cols[k][t][i])).collect();
    if out.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::NumericOverflow { stage: "extended hessian", t: horizon });
    }
    Ok(out)
}

/// `H_t(θ⁺)` at a single time.
pub fn extended_hessian_fd(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta_ext: &DVector<f64>,
    t: usize,
    h: f64,
) -> Result<DMatrix<f64>> {
    if t == 0 {
        return Err(Error::contract("extended hessian needs t >= 1"));
    }
    Ok(extended_hessians_fd(sys, rule, s0, theta_ext, t, h)?.pop().unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaEstimate {
    pub lambda: DMatrix<f64>,
    /// Ergodic exponent of `H_t − Λ`; absent below 200 steps.
    pub rate: Option<ErgodicEstimate>,
    /// False when the partial averages visibly fail to settle.
    pub converging: bool,
}

/// `Λ = (1/T) Σ_t H_t(θ⁺)`.
pub fn estimate_lambda(
    sys: &dyn System,
    rule: &dyn UpdateRule,
    s0: &DVector<f64>,
    theta_ext: &DVector<f64>,
    horizon: usize,
) -> Result<LambdaEstimate> {
    if horizon < 100 {
        return Err(Error::contract(format!("estimate_lambda needs T >= 100, got {horizon}")));
    }
    let hs = extended_hessians_fd(sys, rule, s0, theta_ext, horizon, crate::linalg::FD_STEP)?;
    let n = theta_ext.len();
    let lambda = hs.iter().fold(DMatrix::zeros(n, n), |acc, h| acc + h) / horizon as f64;
    let rate = if horizon >= 200 {
        let centered: Vec<DVector<f64>> = hs.iter().map(|h| DVector::from_column_slice((h - &lambda).as_slice())).collect();
        Some(ergodic_exponent_estimate(&centered)?)
    } else {
        None
    };
    let converging = rate.is_none_or(|r| r.degenerate || r.a_hat < 1.0 - 1e-3);
    Ok(LambdaEstimate { lambda, rate, converging })
}

/// Whether every eigenvalue has real part above `1e−10`, with the smallest
/// real part.
pub fn is_positive_stable(lambda: &DMatrix<f64>) -> Result<(bool, f64)> {
    let ev = eigenvalues(lambda)?;
    let min_re = ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    Ok((min_re > 1e-10, min_re))
}

/// `B` with `BΛ + ΛᵀB = I`, from the Kronecker-form linear system.
pub fn solve_lyapunov(lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = lambda.nrows();
    if lambda.ncols() != n {
        return Err(Error::contract("Lyapunov equation needs a square matrix"));
    }
    let (stable, min_re) = is_positive_stable(lambda)?;
    if !stable {
        return Err(Error::domain(format!("matrix is not positive-stable (min real part {min_re:e})")));
    }
    // vec(BΛ) = (Λᵀ ⊗ I) vec(B), vec(ΛᵀB) = (I ⊗ Λᵀ) vec(B) in column-major order.
    let id = DMatrix::<f64>::identity(n, n);
    let k = lambda.transpose().kronecker(&id) + id.kronecker(&lambda.transpose());
    let rhs = DVector::from_column_slice(id.as_slice());
    let x = k.lu().solve(&rhs).ok_or_else(|| Error::domain("Lyapunov system is singular"))?;
    let b = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&b + b.transpose()) * 0.5)
}

/// `‖BΛ + ΛᵀB − I‖_max`.
pub fn lyapunov_residual(b: &DMatrix<f64>, lambda: &DMatrix<f64>) -> f64 {
    let n = b.nrows();
    (b * lambda + lambda.transpose() * b - DMatrix::identity(n, n)).amax()
}

/// Comma-separated rows, for inspecting Λ or B.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
