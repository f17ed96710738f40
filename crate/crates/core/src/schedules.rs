//! Step-size schedules, sampling schemes over finite datasets, exponent
//! constraints for each algorithm class, and empirical ergodic exponents.

use std::fmt;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `η_t = γ·t^(−b)` with overall rate `γ ≥ 0` and exponent `b ∈ (0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub gamma: f64,
    pub b: f64,
}

impl StepSchedule {
    pub fn new(gamma: f64, b: f64) -> Result<Self> {
        let s = StepSchedule { gamma, b };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!("overall rate gamma={} must be >= 0", self.gamma)));
        }
        if !(self.b > 0.0 && self.b <= 1.0) {
            return Err(Error::config(format!("step exponent b={} must lie in (0, 1]", self.b)));
        }
        Ok(())
    }

    /// Step size at time `t ≥ 1`.
    pub fn eta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.gamma * (t as f64).powf(-self.b)
    }

    pub fn partial_sum(&self, t_end: usize) -> f64 {
        (1..=t_end).map(|t| self.eta(t)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmClass {
    /// Simple or extended RTRL, and SGD as its non-recurrent case.
    ExactRtrl,
    /// RTRL with injected unbiased errors (NoBackTrack, UORO).
    ImperfectRtrl,
    Tbptt,
}

impl std::str::FromStr for AlgorithmClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_rtrl" | "rtrl" | "sgd" => Ok(AlgorithmClass::ExactRtrl),
            "imperfect" | "imperfect_rtrl" | "uoro" | "nobacktrack" => Ok(AlgorithmClass::ImperfectRtrl),
            "tbptt" => Ok(AlgorithmClass::Tbptt),
            other => Err(Error::config(format!("unknown algorithm class `{other}`"))),
        }
    }
}

/// Exponents describing a problem instance: ergodic exponent `a`, loss
/// growth exponent `γ`, and for TBPTT the truncation exponent `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentProfile {
    pub a: f64,
    pub gamma_loss: f64,
    pub class: AlgorithmClass,
    #[serde(default)]
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentVerdict {
    pub valid: bool,
    pub violations: Vec<String>,
}

impl fmt::Display for ExponentVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            write!(f, "valid")
        } else {
            write!(f, "invalid")?;
            for v in &self.violations {
                write!(f, "\n  violated: {v}")?;
            }
            Ok(())
        }
    }
}

/// Checks the step-size exponent `b` against the constraints of the
/// algorithm class:
///
/// * exact/extended RTRL: `max(a, γ) + 2γ < b ≤ 1`
/// * imperfect RTRL: `max(a, 1/2 + γ) + 2γ < b ≤ 1`
/// * TBPTT: the exact-RTRL constraint plus `max(a, γ) < A < b − 2γ`
pub fn validate_exponents(profile: &ExponentProfile, b: f64) -> ExponentVerdict {
    let ExponentProfile { a, gamma_loss: g, class, truncation } = *profile;
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&a) {
        violations.push(format!("ergodic exponent a={a} outside [0, 1)"));
    }
    if !(0.0..1.0).contains(&g) {
        violations.push(format!("loss growth exponent gamma={g} outside [0, 1)"));
    }
    if !(b > 0.0 && b <= 1.0) {
        violations.push(format!("b={b} outside (0, 1]"));
    }
    let lower = match class {
        AlgorithmClass::ExactRtrl | AlgorithmClass::Tbptt => a.max(g) + 2.0 * g,
        AlgorithmClass::ImperfectRtrl => a.max(0.5 + g) + 2.0 * g,
    };
    if lower >= b {
        let form = match class {
            AlgorithmClass::ImperfectRtrl => "max(a, 1/2 + gamma) + 2 gamma",
            _ => "max(a, gamma) + 2 gamma",
        };
        violations.push(format!("{form} = {lower} must be < b = {b}"));
    }
    if class == AlgorithmClass::Tbptt {
        match truncation {
            None => violations.push("tbptt requires a truncation exponent A".to_string()),
            Some(big_a) => {
                let lo = a.max(g);
                let hi = b - 2.0 * g;
                if big_a <= lo {
                    violations.push(format!("max(a, gamma) = {lo} must be < A = {big_a}"));
                }
                if big_a >= hi {
                    violations.push(format!("A = {big_a} must be < b - 2 gamma = {hi}"));
                }
            }
        }
    }
    ExponentVerdict { valid: violations.is_empty(), violations }
}

/// Admissible step exponents `(b_min, 1]` for SGD when gradients and
/// Hessians only have moments of order `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRange {
    pub b_min: f64,
    pub b_max: f64,
}

impl RateRange {
    pub fn is_empty(&self) -> bool {
        self.b_min >= self.b_max
    }

    pub fn contains(&self, b: f64) -> bool {
        b > self.b_min && b <= self.b_max
    }
}

/// `b_min = max(1/2, 2/h) + 2/h`; `h = ∞` gives the classical `1/2`.
pub fn moment_rate_range(h: f64) -> Result<RateRange> {
    if h.is_nan() || h < 2.0 {
        return Err(Error::domain(format!("moment order h={h} must be >= 2")));
    }
    let inv = if h.is_infinite() { 0.0 } else { 2.0 / h };
    Ok(RateRange { b_min: 0.5f64.max(inv) + inv, b_max: 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    Cycling,
    Reshuffle,
    Iid,
}

impl std::str::FromStr for SamplingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycling" => Ok(SamplingScheme::Cycling),
            "reshuffle" => Ok(SamplingScheme::Reshuffle),
            "iid" => Ok(SamplingScheme::Iid),
            other => Err(Error::config(format!("unknown sampling scheme `{other}`"))),
        }
    }
}

impl fmt::Display for SamplingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingScheme::Cycling => "cycling",
            SamplingScheme::Reshuffle => "reshuffle",
            SamplingScheme::Iid => "iid",
        })
    }
}

/// Infinite sequence of zero-based sample indices.
///
/// Cycling yields `(t − 1) mod N` at time `t`; reshuffling draws a fresh
/// uniform permutation at the start of each epoch; i.i.d. draws uniformly
/// with replacement.
#[derive(Debug, Clone)]
pub struct Sampler<R> {
    scheme: SamplingScheme,
    n: usize,
    rng: R,
    pos: usize,
    perm: Vec<usize>,
}

pub fn sampler<R: Rng>(scheme: SamplingScheme, n: usize, rng: R) -> Result<Sampler<R>> {
    if n == 0 {
        return Err(Error::contract("sampler over an empty dataset"));
    }
    Ok(Sampler { scheme, n, rng, pos: 0, perm: (0..n).collect() })
}

impl<R: Rng> Iterator for Sampler<R> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let i = match self.scheme {
            SamplingScheme::Cycling => self.pos % self.n,
            SamplingScheme::Reshuffle => {
                let k = self.pos % self.n;
                if k == 0 {
                    self.perm.shuffle(&mut self.rng);
                }
                self.perm[k]
            }
            SamplingScheme::Iid => self.rng.random_range(0..self.n),
        };
        self.pos += 1;
        Some(i)
    }
}

/// Result of fitting `‖Σ values‖ ~ L^a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicEstimate {
    pub a_hat: f64,
    pub r_squared: f64,
    /// Input was identically zero (or cancelled exactly); `a_hat` is set to 0.
    pub degenerate: bool,
    /// Linear growth: the input was probably not centered.
    pub non_centered: bool,
}

/// Number of log-spaced window lengths in the regression.
pub const ERGODIC_PROBES: usize = 24;

/// Estimates the ergodic exponent of a centered sequence.
///
/// For each of [`ERGODIC_PROBES`] log-spaced window lengths `L` in
/// `[T/100, T/10]` the root-mean-square norm of the sums over sliding
/// windows of length `L` is computed, and `a_hat` is the slope of its
/// log-log regression against `L`. Averaging over many windows keeps the
/// fit stable on a single path; the scaling exponent is the same as for
/// partial sums from the origin.
pub fn ergodic_exponent_estimate(values: &[DVector<f64>]) -> Result<ErgodicEstimate> {
    let t = values.len();
    if t < 200 {
        return Err(Error::contract(format!("ergodic exponent needs at least 200 values, got {t}")));
    }
    let d = values[0].len();
    if values.iter().any(|v| v.len() != d) {
        return Err(Error::contract("ergodic exponent over values of differing lengths"));
    }
    // prefix[k] = Σ_{t<k} values[t]
    let mut prefix = Vec::with_capacity(t + 1);
    prefix.push(DVector::zeros(d));
    for v in values {
        let next = prefix.last().unwrap() + v;
        prefix.push(next);
    }
    let scale = values.iter().map(|v| v.amax()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(ErgodicEstimate { a_hat: 0.0, r_squared: 1.0, degenerate: true, non_centered: false });
    }
    let lo = (t as f64 / 100.0).max(1.0);
    let hi = t as f64 / 10.0;
    let mut lens: Vec<usize> = (0..ERGODIC_PROBES)
        .map(|k| {
            let frac = k as f64 / (ERGODIC_PROBES - 1) as f64;
            (lo * (hi / lo).powf(frac)).round() as usize
        })
        .collect();
    lens.dedup();
    let probes: Vec<(f64, f64)> = lens
        .iter()
        .map(|&len| {
            let stride = (len / 8).max(1);
            let mut acc = 0.0;
            let mut count = 0usize;
            let mut j = 0;
            while j + len <= t {
                acc += (&prefix[j + len] - &prefix[j]).norm_squared();
                count += 1;
                j += stride;
            }
            (len as f64, (acc / count as f64).sqrt())
        })
        .collect();
    let peak = probes.iter().map(|p| p.1).fold(0.0, f64::max);
    if peak <= 1e-9 * scale {
        return Ok(ErgodicEstimate { a_hat: 0.0, r_squared: 1.0, degenerate: true, non_centered: false });
    }
    let pts: Vec<(f64, f64)> = probes
        .into_iter()
        .filter(|p| p.1 > 1e-9 * peak)
        .map(|(l, r)| (l.ln(), r.ln()))
        .collect();
    let (slope, r2) = log_log_fit(&pts);
    Ok(ErgodicEstimate { a_hat: slope, r_squared: r2, degenerate: false, non_centered: slope > 0.9 })
}

/// Least-squares slope and coefficient of determination.
pub(crate) fn log_log_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (0.0, 0.0);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;

    fn profile(class: AlgorithmClass, a: f64, g: f64, big_a: Option<f64>) -> ExponentProfile {
        ExponentProfile { a, gamma_loss: g, class, truncation: big_a }
    }

    #[test]
    fn schedule_is_power_law() {
        let s = StepSchedule::new(0.1, 0.5).unwrap();
        assert_eq!(s.eta(1), 0.1);
        assert!((s.eta(4) - 0.05).abs() < 1e-15);
        assert!(s.eta(10) >= s.eta(11));
        assert!(StepSchedule::new(0.1, 1.2).is_err());
        assert!(StepSchedule::new(0.1, 0.0).is_err());
        assert!(StepSchedule::new(-1.0, 0.5).is_err());
    }

    #[test]
    fn exponent_examples() {
        assert!(validate_exponents(&profile(AlgorithmClass::ExactRtrl, 0.1, 0.0, None), 0.3).valid);
        let imp = profile(AlgorithmClass::ImperfectRtrl, 0.55, 0.0, None);
        assert!(validate_exponents(&imp, 0.6).valid);
        assert!(!validate_exponents(&imp, 0.5).valid);
        let tb = profile(AlgorithmClass::Tbptt, 0.2, 0.1, Some(0.4));
        assert!(validate_exponents(&tb, 0.7).valid);
        let bad = validate_exponents(&profile(AlgorithmClass::Tbptt, 0.2, 0.1, Some(0.55)), 0.7);
        assert!(!bad.valid);
        assert_eq!(bad.violations.len(), 1);
        assert!(bad.violations[0].contains("b - 2 gamma"));
    }

    #[test]
    fn moment_rule() {
        assert!((moment_rate_range(8.0).unwrap().b_min - 0.75).abs() < 1e-15);
        let four = moment_rate_range(4.0).unwrap();
        assert_eq!(four.b_min, 1.0);
        assert!(four.is_empty());
        assert_eq!(moment_rate_range(f64::INFINITY).unwrap().b_min, 0.5);
        assert!((moment_rate_range(1e9).unwrap().b_min - 0.5).abs() < 1e-8);
        assert!(moment_rate_range(1.5).is_err());
    }

    #[test]
    fn cycling_sampler() {
        let s: Vec<usize> = sampler(SamplingScheme::Cycling, 3, trial_rng("s", 0)).unwrap().take(7).collect();
        assert_eq!(s, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn reshuffle_epochs_are_permutations() {
        let s: Vec<usize> = sampler(SamplingScheme::Reshuffle, 3, trial_rng("s", 1)).unwrap().take(300).collect();
        for epoch in s.chunks(3) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, vec![0, 1, 2]);
        }
    }

    #[test]
    fn iid_frequencies() {
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for i in sampler(SamplingScheme::Iid, 3, trial_rng("s", 2)).unwrap().take(draws) {
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((0.32..=0.35).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn samplers_are_deterministic_per_seed() {
        let a: Vec<usize> = sampler(SamplingScheme::Iid, 10, trial_rng("s", 5)).unwrap().take(50).collect();
        let b: Vec<usize> = sampler(SamplingScheme::Iid, 10, trial_rng("s", 5)).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    fn centered_dataset(n: usize) -> Vec<DVector<f64>> {
        let mut rng = trial_rng("data", 9);
        let raw: Vec<DVector<f64>> = (0..n).map(|_| crate::linalg::random_vector(&mut rng, 2, 1.0)).collect();
        let mean = raw.iter().fold(DVector::zeros(2), |a, v| a + v) / n as f64;
        raw.into_iter().map(|v| v - &mean).collect()
    }

    #[test]
    fn cycling_has_small_exponent() {
        let data = centered_dataset(16);
        let vals: Vec<DVector<f64>> = sampler(SamplingScheme::Cycling, 16, trial_rng("c", 0))
            .unwrap()
            .take(16 * 5000)
            .map(|i| data[i].clone())
            .collect();
        let est = ergodic_exponent_estimate(&vals).unwrap();
        assert!(est.a_hat <= 0.1, "{est:?}");
    }

    #[test]
    fn iid_has_clt_exponent() {
        let data = centered_dataset(16);
        let vals: Vec<DVector<f64>> = sampler(SamplingScheme::Iid, 16, trial_rng("c", 1))
            .unwrap()
            .take(100_000)
            .map(|i| data[i].clone())
            .collect();
        let est = ergodic_exponent_estimate(&vals).unwrap();
        assert!(est.a_hat > 0.4 && est.a_hat < 0.65, "{est:?}");
    }

    #[test]
    fn constant_input_is_flagged() {
        let vals = vec![DVector::from_element(1, 1.0); 10_000];
        let est = ergodic_exponent_estimate(&vals).unwrap();
        assert!((est.a_hat - 1.0).abs() < 0.02 && est.non_centered);
        let zeros = vec![DVector::zeros(2); 1000];
        assert!(ergodic_exponent_estimate(&zeros).unwrap().degenerate);
    }

    #[test]
    fn cycling_epoch_sums_cancel() {
        let data = centered_dataset(7);
        let epoch: DVector<f64> = data.iter().fold(DVector::zeros(2), |a, v| a + v);
        assert!(epoch.amax() < 1e-12);
    }

    #[test]
    fn step_sums_diverge_for_b_at_most_one() {
        let s = StepSchedule::new(1.0, 1.0).unwrap();
        assert!(s.partial_sum(1_000_000) > 13.0);
        let s = StepSchedule::new(1.0, 0.7).unwrap();
        assert!(s.partial_sum(100_000) > 100.0);
    }

    #[test]
    fn step_homogeneity_over_growing_windows() {
        let s = StepSchedule::new(1.0, 0.7).unwrap();
        let big_a = 0.4;
        for &t in &[1_000usize, 10_000, 100_000, 1_000_000] {
            let w = (t as f64).powf(big_a).ceil() as usize;
            let ratio = s.eta(t + 1) / s.eta(t + w);
            let tol = 5.0 * (t as f64).powf(-(1.0 - big_a)) * s.b * 2.0;
            assert!(ratio >= 1.0 && ratio - 1.0 <= tol, "t={t} ratio={ratio} tol={tol}");
        }
    }
}
