//! NoBackTrack and UORO: rank-one Jacobian estimates kept unbiased with
//! random signs and norm equalization.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{Rnn, StateLoss, System, ZeroSystem};
use crate::error::{Error, Result};
use crate::exec::{map_indexed_with, Mode};
use crate::linalg::{hcat, op_norm, outer, random_vector};
use crate::rng::{trial_rng, TrialRng};
use crate::rtrl::{ErrorInjector, JacobianEstimate, Propagation};

/// `v_state ⊗ v_param`, a rank-one map from parameters to states.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOnePair {
    pub v_state: DVector<f64>,
    pub v_param: DVector<f64>,
}

impl RankOnePair {
    pub fn new(v_state: DVector<f64>, v_param: DVector<f64>) -> Self {
        RankOnePair { v_state, v_param }
    }

    pub fn zeros(state_dim: usize, param_dim: usize) -> Self {
        RankOnePair::new(DVector::zeros(state_dim), DVector::zeros(param_dim))
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        outer(&self.v_state, &self.v_param)
    }

    /// Decomposes a matrix of rank at most one.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.iter().all(|&x| x == 0.0) {
            return Ok(RankOnePair::zeros(m.nrows(), m.ncols()));
        }
        let svd = m.clone().svd(true, true);
        let (u, vt) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
        let (i, s1) = svd.singular_values.argmax();
        let rest = svd.singular_values.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| *s).fold(0.0, f64::max);
        if rest > 1e-10 * s1 {
            return Err(Error::contract(format!("matrix has rank above one (second singular value {rest:e})")));
        }
        let scale = s1.sqrt();
        Ok(RankOnePair::new(u.column(i) * scale, vt.row(i).transpose() * scale))
    }
}

/// Entries in `{−1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignVector(DVector<f64>);

impl SignVector {
    pub fn from_bits(dim: usize, bits: u64) -> Self {
        SignVector(DVector::from_fn(dim, |i, _| if bits >> i & 1 == 1 { -1.0 } else { 1.0 }))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<DVector<f64>> for SignVector {
    type Error = Error;

    fn try_from(v: DVector<f64>) -> Result<Self> {
        if v.iter().all(|&x| x == 1.0 || x == -1.0) {
            Ok(SignVector(v))
        } else {
            Err(Error::contract("sign vector entries must be +1 or -1"))
        }
    }
}

pub fn sample_signs<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> SignVector {
    SignVector(DVector::from_fn(dim, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }))
}

/// `(√(‖v2‖/‖v1‖)·v1, √(‖v1‖/‖v2‖)·v2)` when both are nonzero, `(0, 0)`
/// otherwise.
pub fn norm_equalize(v1: &DVector<f64>, v2: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (n1, n2) = (v1.norm(), v2.norm());
    if n1 > 0.0 && n2 > 0.0 {
        (v1 * (n2 / n1).sqrt(), v2 * (n1 / n2).sqrt())
    } else {
        (DVector::zeros(v1.len()), DVector::zeros(v2.len()))
    }
}

fn check_dims(pair: &RankOnePair, jac_s: &DMatrix<f64>, jac_theta: &DMatrix<f64>, nu: &SignVector) -> Result<()> {
    let n = jac_theta.nrows();
    if jac_s.nrows() != n || jac_s.ncols() != pair.v_state.len() || jac_theta.ncols() != pair.v_param.len() || nu.len() != n {
        return Err(Error::contract(format!(
            "reduction dims: pair ({}, {}), jac_s {:?}, jac_theta {:?}, signs {}",
            pair.v_state.len(),
            pair.v_param.len(),
            jac_s.shape(),
            jac_theta.shape(),
            nu.len()
        )));
    }
    Ok(())
}

/// `ρ(∂sT ṽ, v̄) + Σᵢ νᵢ ρ(eᵢ, rowᵢ ∂θT)`; also returns the number of norm
/// equalizations performed.
pub fn nbt_reduce_counted(
    pair: &RankOnePair,
    jac_s: &DMatrix<f64>,
    jac_theta: &DMatrix<f64>,
    nu: &SignVector,
) -> Result<(RankOnePair, usize)> {
    check_dims(pair, jac_s, jac_theta, nu)?;
    let (mut a, mut b) = norm_equalize(&(jac_s * &pair.v_state), &pair.v_param);
    let n = jac_theta.nrows();
    for i in 0..n {
        let e = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        let (ei, ri) = norm_equalize(&e, &jac_theta.row(i).transpose());
        a.axpy(nu.0[i], &ei, 1.0);
        b.axpy(nu.0[i], &ri, 1.0);
    }
    Ok((RankOnePair::new(a, b), n + 1))
}

pub fn nbt_reduce(pair: &RankOnePair, jac_s: &DMatrix<f64>, jac_theta: &DMatrix<f64>, nu: &SignVector) -> Result<RankOnePair> {
    nbt_reduce_counted(pair, jac_s, jac_theta, nu).map(|r| r.0)
}

/// `ρ(∂sT ṽ, v̄) + ρ(Σᵢ νᵢ eᵢ, Σᵢ νᵢ rowᵢ ∂θT)`, with the norm-equalization
/// count.
pub fn uoro_reduce_counted(
    pair: &RankOnePair,
    jac_s: &DMatrix<f64>,
    jac_theta: &DMatrix<f64>,
    nu: &SignVector,
) -> Result<(RankOnePair, usize)> {
    check_dims(pair, jac_s, jac_theta, nu)?;
    let (a, b) = norm_equalize(&(jac_s * &pair.v_state), &pair.v_param);
    let (c, d) = norm_equalize(&nu.0, &jac_theta.tr_mul(&nu.0));
    Ok((RankOnePair::new(a + c, b + d), 2))
}

pub fn uoro_reduce(pair: &RankOnePair, jac_s: &DMatrix<f64>, jac_theta: &DMatrix<f64>, nu: &SignVector) -> Result<RankOnePair> {
    uoro_reduce_counted(pair, jac_s, jac_theta, nu).map(|r| r.0)
}

/// `E = J̃_new − ∂sT J̃_old − ∂θT`.
pub fn error_term(
    j_new: &DMatrix<f64>,
    j_old: &DMatrix<f64>,
    jac_s: &DMatrix<f64>,
    jac_theta: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if j_new.shape() != jac_theta.shape() || jac_s.nrows() != j_new.nrows() || jac_s.ncols() != j_old.nrows() || j_old.ncols() != j_new.ncols() {
        return Err(Error::contract(format!(
            "error term dims: new {:?}, old {:?}, jac_s {:?}, jac_theta {:?}",
            j_new.shape(),
            j_old.shape(),
            jac_s.shape(),
            jac_theta.shape()
        )));
    }
    Ok(j_new - jac_s * j_old - jac_theta)
}

/// `(2·dim S)·y·‖J̃_old‖^{1/2} + (dim S)²·y`.
pub fn gauge_bound(state_dim: usize, y: f64, j_old_norm: f64) -> f64 {
    let n = state_dim as f64;
    2.0 * n * y * j_old_norm.sqrt() + n * n * y
}

/// `‖E‖` and its gauge bound for one step, with `y = ‖[∂sT ∂θT]‖`.
pub fn gauge_check(e: &DMatrix<f64>, j_old: &DMatrix<f64>, jac_s: &DMatrix<f64>, jac_theta: &DMatrix<f64>) -> (f64, f64) {
    let y = op_norm(&hcat(jac_s, jac_theta));
    (op_norm(e), gauge_bound(e.nrows(), y, op_norm(j_old)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reducer {
    NoBackTrack,
    Uoro,
}

impl Reducer {
    pub fn reduce(self, pair: &RankOnePair, jac_s: &DMatrix<f64>, jac_theta: &DMatrix<f64>, nu: &SignVector) -> Result<RankOnePair> {
        match self {
            Reducer::NoBackTrack => nbt_reduce(pair, jac_s, jac_theta, nu),
            Reducer::Uoro => uoro_reduce(pair, jac_s, jac_theta, nu),
        }
    }
}

impl fmt::Display for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reducer::NoBackTrack => "nobacktrack",
            Reducer::Uoro => "uoro",
        })
    }
}

impl FromStr for Reducer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nbt" | "nobacktrack" | "no_backtrack" => Ok(Reducer::NoBackTrack),
            "uoro" => Ok(Reducer::Uoro),
            other => Err(Error::config(format!("unknown reducer `{other}` (expected uoro or nobacktrack)"))),
        }
    }
}

/// Imperfect RTRL whose Jacobian estimate is a randomly reduced rank-one pair.
#[derive(Debug, Clone, Copy)]
pub struct RankOneInjector(pub Reducer);

impl RankOneInjector {
    fn reduced(&self, step: &Propagation<'_>, rng: &mut TrialRng) -> RankOnePair {
        let pair = match step.j_prev {
            JacobianEstimate::RankOne(p) => p.clone(),
            // J₀ is zero or rank one by construction of the learner.
            JacobianEstimate::Dense(m) => RankOnePair::from_dense(m).expect("initial Jacobian estimate must have rank <= 1"),
        };
        let nu = sample_signs(step.jac_theta.nrows(), rng);
        self.0.reduce(&pair, step.jac_s, step.jac_theta, &nu).expect("propagation dims checked by the learner")
    }
}

impl ErrorInjector for RankOneInjector {
    fn name(&self) -> &str {
        match self.0 {
            Reducer::NoBackTrack => "nobacktrack",
            Reducer::Uoro => "uoro",
        }
    }

    fn next_error(&self, step: &Propagation<'_>, rng: &mut TrialRng) -> DMatrix<f64> {
        self.reduced(step, rng).matrix() - step.exact()
    }

    fn propagate(&self, step: &Propagation<'_>, rng: &mut TrialRng) -> JacobianEstimate {
        JacobianEstimate::RankOne(self.reduced(step, rng))
    }
}

/// Which system [`verify_unbiased`] exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSystem {
    /// Autonomous sigmoid RNN with random weights, state dimension `dim`.
    RandomRnn,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasedConfig {
    pub reducer: Reducer,
    pub dim: usize,
    pub steps: usize,
    pub system: TestSystem,
    pub seed: u64,
    /// Largest number of enumerated sign sequences.
    pub budget: u128,
}

impl UnbiasedConfig {
    pub fn new(reducer: Reducer, dim: usize, steps: usize) -> Self {
        UnbiasedConfig { reducer, dim, steps, system: TestSystem::RandomRnn, seed: 0, budget: 1 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasedReport {
    pub reducer: Reducer,
    pub dim: usize,
    pub steps: usize,
    /// Max entry of `|mean E_t|` over the steps.
    pub max_error_mean: f64,
    /// Max entry of `|E[J̃_steps] − J_steps|`.
    pub max_jacobian_bias: f64,
    pub sequences: u128,
}

impl UnbiasedReport {
    pub const TOLERANCE: f64 = 1e-10;

    pub fn max_bias(&self) -> f64 {
        self.max_error_mean.max(self.max_jacobian_bias)
    }

    pub fn pass(&self) -> bool {
        self.max_bias() <= Self::TOLERANCE
    }

    pub fn csv_header() -> &'static str {
        "reducer,dim,steps,max_bias"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:e}", self.reducer, self.dim, self.steps, self.max_bias())
    }
}

impl fmt::Display for UnbiasedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reducer: {}", self.reducer)?;
        writeln!(f, "dim: {}", self.dim)?;
        writeln!(f, "steps: {}", self.steps)?;
        writeln!(f, "sign_sequences: {}", self.sequences)?;
        writeln!(f, "max_error_mean: {:e}", self.max_error_mean)?;
        writeln!(f, "max_jacobian_bias: {:e}", self.max_jacobian_bias)?;
        write!(f, "verdict: {}", if self.pass() { "pass" } else { "fail" })
    }
}

/// Exhaustive check that the reducers are unbiased over `steps` steps at a
/// frozen parameter: averages `E_t` and `J̃_steps` over every sign sequence.
pub fn verify_unbiased(cfg: &UnbiasedConfig, mode: Mode) -> Result<UnbiasedReport> {
    if cfg.dim == 0 || cfg.steps == 0 {
        return Err(Error::contract("verify_unbiased needs dim >= 1 and steps >= 1"));
    }
    let bits = cfg.dim as u32 * cfg.steps as u32;
    let needed: u128 = if bits >= 127 { u128::MAX } else { 1u128 << bits };
    if needed > cfg.budget || bits > 63 {
        return Err(Error::Budget { needed, budget: cfg.budget });
    }
    let mut rng = trial_rng("verify-unbiased", cfg.seed);
    let n = cfg.dim;
    let (sys, theta): (Box<dyn System>, DVector<f64>) = match cfg.system {
        TestSystem::RandomRnn => {
            let sys = Rnn::full(n, None, StateLoss::Zero)?;
            let theta = random_vector(&mut rng, sys.param_dim(), 1.5);
            (Box::new(sys), theta)
        }
        TestSystem::Zero => (Box::new(ZeroSystem { dim: n, params: 3 }), DVector::zeros(3)),
    };
    let p = sys.param_dim();
    let s0 = random_vector(&mut rng, n, 1.0);
    let j0 = RankOnePair::new(random_vector(&mut rng, n, 1.0), random_vector(&mut rng, p, 1.0));

    // The state path does not depend on the signs at a frozen parameter.
    let mut jacs = Vec::with_capacity(cfg.steps);
    let mut s = s0;
    let mut exact = j0.matrix();
    for t in 1..=cfg.steps {
        let js = sys.jac_state(t, &s, &theta);
        let jt = sys.jac_param(t, &s, &theta);
        s = crate::dynamics::step(sys.as_ref(), t, &s, &theta)?;
        exact = &js * exact + &jt;
        jacs.push((js, jt));
    }

    // Sums over fixed-size blocks keep the result independent of scheduling.
    let total = needed as u64;
    let blocks = total.min(256);
    let per = total.div_ceil(blocks);
    let partial = map_indexed_with(mode, blocks as usize, |blk| -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        let mut e_sums = vec![DMatrix::zeros(n, p); cfg.steps];
        let mut j_sum = DMatrix::zeros(n, p);
        let lo = blk as u64 * per;
        for seq in lo..(lo + per).min(total) {
            let mut pair = j0.clone();
            for (k, (js, jt)) in jacs.iter().enumerate() {
                let nu = SignVector::from_bits(n, seq >> (k * n));
                let old = pair.matrix();
                pair = cfg.reducer.reduce(&pair, js, jt, &nu)?;
                e_sums[k] += error_term(&pair.matrix(), &old, js, jt)?;
            }
            j_sum += pair.matrix();
        }
        Ok((e_sums, j_sum))
    });
    let mut e_sums = vec![DMatrix::zeros(n, p); cfg.steps];
    let mut j_sum = DMatrix::zeros(n, p);
    for part in partial {
        let (e, j) = part?;
        for (acc, x) in e_sums.iter_mut().zip(e) {
            *acc += x;
        }
        j_sum += j;
    }
    let count = total as f64;
    let max_error_mean = e_sums.iter().map(|e| (e / count).amax()).fold(0.0, f64::max);
    let max_jacobian_bias = (j_sum / count - exact).amax();
    Ok(UnbiasedReport { reducer: cfg.reducer, dim: n, steps: cfg.steps, max_error_mean, max_jacobian_bias, sequences: needed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_matrix;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn norm_equalize_examples() {
        let (a, b) = norm_equalize(&v(&[2.0, 0.0]), &v(&[0.5]));
        assert!((a - v(&[1.0, 0.0])).amax() < 1e-15 && (b - v(&[1.0])).amax() < 1e-15);
        assert_eq!(norm_equalize(&v(&[0.0, 0.0]), &v(&[7.0])), (v(&[0.0, 0.0]), v(&[0.0])));
        let (x, y) = (v(&[0.3, -1.2]), v(&[2.0, 0.1, 4.0]));
        let r1 = norm_equalize(&x, &y);
        let r2 = norm_equalize(&(&x * 3.0), &(&y / 3.0));
        assert!((r1.0 - r2.0).amax() < 1e-15 && (r1.1 - r2.1).amax() < 1e-15);
    }

    #[test]
    fn nbt_without_parameter_jacobian_is_deterministic() {
        let mut rng = trial_rng("nbt", 0);
        let pair = RankOnePair::new(random_vector(&mut rng, 3, 1.0), random_vector(&mut rng, 4, 1.0));
        for bits in 0..8 {
            let out = nbt_reduce(&pair, &DMatrix::identity(3, 3), &DMatrix::zeros(3, 4), &SignVector::from_bits(3, bits)).unwrap();
            assert!((out.matrix() - pair.matrix()).amax() < 1e-14);
        }
    }

    #[test]
    fn uoro_single_dimension_sign_only_flips_the_second_pair() {
        let pair = RankOnePair::new(v(&[0.7]), v(&[1.0, -2.0]));
        let js = DMatrix::from_element(1, 1, 0.5);
        let jt = DMatrix::from_row_slice(1, 2, &[3.0, 1.0]);
        let (a, b) = norm_equalize(&(&js * &pair.v_state), &pair.v_param);
        let (c, d) = norm_equalize(&v(&[1.0]), &v(&[3.0, 1.0]));
        for (bits, sign) in [(0, 1.0), (1, -1.0)] {
            let out = uoro_reduce(&pair, &js, &jt, &SignVector::from_bits(1, bits)).unwrap();
            assert!((&out.v_state - (&a + &c * sign)).amax() < 1e-14);
            assert!((&out.v_param - (&b + &d * sign)).amax() < 1e-14);
        }
        // the signed term's own tensor does not depend on the sign
        assert!((outer(&c, &d) - outer(&-&c, &-&d)).amax() == 0.0);
    }

    #[test]
    fn equalization_counts() {
        let pair = RankOnePair::zeros(5, 2);
        let js = DMatrix::identity(5, 5);
        let jt = DMatrix::from_element(5, 2, 1.0);
        let nu = SignVector::from_bits(5, 3);
        assert_eq!(uoro_reduce_counted(&pair, &js, &jt, &nu).unwrap().1, 2);
        assert_eq!(nbt_reduce_counted(&pair, &js, &jt, &nu).unwrap().1, 6);
    }

    #[test]
    fn from_dense_recovers_rank_one() {
        let mut rng = trial_rng("dense", 0);
        let m = outer(&random_vector(&mut rng, 3, 1.0), &random_vector(&mut rng, 5, 1.0));
        let pair = RankOnePair::from_dense(&m).unwrap();
        assert!((pair.matrix() - &m).amax() < 1e-12);
        assert!(RankOnePair::from_dense(&DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn sign_frequencies_are_balanced() {
        let mut rng = trial_rng("signs", 0);
        let mut sum = DVector::zeros(4);
        for _ in 0..100_000 {
            sum += sample_signs(4, &mut rng).as_vector();
        }
        assert!((sum / 100_000.0).amax() <= 0.02);
    }

    #[test]
    fn representation_sign_flip_preserves_output_law() {
        let mut rng = trial_rng("law", 0);
        for reducer in [Reducer::Uoro, Reducer::NoBackTrack] {
            let n = 3;
            let pair = RankOnePair::new(random_vector(&mut rng, n, 1.0), random_vector(&mut rng, 4, 1.0));
            let flipped = RankOnePair::new(-&pair.v_state, -&pair.v_param);
            let js = random_matrix(&mut rng, n, n, 1.0);
            let jt = random_matrix(&mut rng, n, 4, 1.0);
            let outs = |p: &RankOnePair| -> Vec<DMatrix<f64>> {
                (0..1u64 << n).map(|b| reducer.reduce(p, &js, &jt, &SignVector::from_bits(n, b)).unwrap().matrix()).collect()
            };
            let (a, b) = (outs(&pair), outs(&flipped));
            let mut used = vec![false; b.len()];
            for m in &a {
                let k = (0..b.len()).find(|&k| !used[k] && (m - &b[k]).amax() < 1e-12).expect("unmatched output");
                used[k] = true;
            }
        }
    }

    #[test]
    fn zero_system_passes_trivially() {
        let mut cfg = UnbiasedConfig::new(Reducer::Uoro, 3, 2);
        cfg.system = TestSystem::Zero;
        let r = verify_unbiased(&cfg, Mode::Sequential).unwrap();
        assert!(r.pass());
        assert_eq!(r.max_error_mean, 0.0);
    }

    #[test]
    fn budget_is_enforced() {
        let mut cfg = UnbiasedConfig::new(Reducer::NoBackTrack, 6, 5);
        cfg.budget = 1 << 20;
        assert!(matches!(verify_unbiased(&cfg, Mode::Sequential), Err(Error::Budget { .. })));
    }

    #[test]
    fn sequential_and_parallel_reports_agree() {
        let cfg = UnbiasedConfig::new(Reducer::Uoro, 3, 3);
        let a = verify_unbiased(&cfg, Mode::Sequential).unwrap();
        let b = verify_unbiased(&cfg, Mode::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.pass(), "{a}");
    }
}
