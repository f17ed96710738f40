//! Experiment runner: TOML configs, seeded trials, CSV output.
//!
//! A config describes one experiment. Optional `[[arms]]` derive variants
//! from it through dotted-key overrides, and an optional `[sweep]` table
//! spans a grid over more dotted keys. Trials run in parallel across seeds
//! and grid points; each trial is sequential in `t`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{RankOneInjector, Reducer};
use crate::diagnostics::{convergence_detector, Convergence};
use crate::dynamics::examples::{make_example, BuildContext, BuiltExample, ExampleSpec};
use crate::dynamics::System;
use crate::error::{Error, Result};
use crate::exec::map_slice;
use crate::rng::{stable_hash, substream, trial_rng};
use crate::rtrl::{run_learning, ErrorInjector, ExactRtrl, Learner, LearnerState, RunOptions, TrialRecord};
use crate::schedules::{validate_exponents, AlgorithmClass, ExponentProfile, SamplingScheme, StepSchedule};
use crate::tbptt::{run_tbptt, TbpttOptions, TruncationSchedule};
use crate::updates::{
    Adaptive, AdamConfig, Identity, Inertia, ParamUpdateOp, PhiClipped, PhiPlain, PhiProjected, RuleSpec, StatSource,
    Statistic, Timing, UpdateRule,
};

/// Environment variable naming the output root.
pub const OUTPUT_ROOT_VAR: &str = "RTRL_OUTPUT_ROOT";

/// `$RTRL_OUTPUT_ROOT`, or `results` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Exact RTRL with the identity rule. On non-recurrent systems this is
    /// plain SGD.
    Sgd,
    Rtrl,
    Uoro,
    Nobacktrack,
    Tbptt,
    Adam,
    Rmsprop,
    Ong,
}

impl Algorithm {
    pub fn class(self) -> AlgorithmClass {
        match self {
            Algorithm::Uoro | Algorithm::Nobacktrack => AlgorithmClass::ImperfectRtrl,
            Algorithm::Tbptt => AlgorithmClass::Tbptt,
            _ => AlgorithmClass::ExactRtrl,
        }
    }
}

/// Settings of the adaptive rules (`rmsprop`, `ong`, `adam`). Exactly one of
/// `c` (coupled, `β²_t = 1 − c η_t`) and `beta2` (fixed) must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    /// Momentum of the Adam system.
    #[serde(default)]
    pub beta1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<String>,
    /// Feed the statistic with per-sample gradients instead of the RTRL
    /// direction (rmsprop and ong only; adam always does).
    #[serde(default)]
    pub sample_statistic: bool,
}

impl AdaptiveSpec {
    fn inertia(&self) -> Result<Inertia> {
        match (self.c, self.beta2) {
            (Some(c), None) => Ok(Inertia::Coupled { c }),
            (None, Some(beta)) => Ok(Inertia::Fixed { beta }),
            _ => Err(Error::config("adaptive rules need exactly one of `adaptive.c` and `adaptive.beta2`")),
        }
    }

    fn timing(&self) -> Result<Timing> {
        self.timing.as_deref().map_or(Ok(Timing::Simultaneous), str::parse)
    }
}

/// Starting parameter: `theta0` (or θ* when `around_optimum`, else zero)
/// plus a per-seed uniform perturbation in `[−scale, scale]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub around_optimum: bool,
    #[serde(default)]
    pub scale: f64,
}

/// Exponents for validation. When absent, `a` is 1/2 under i.i.d.
/// sampling and 0 otherwise, and `gamma_loss` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub a: f64,
    #[serde(default)]
    pub gamma_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    pub tol: f64,
    pub window: usize,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec { tol: 1e-2, window: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiSpec {
    #[default]
    Plain,
    Clipped,
}

/// A named variant: dotted keys overriding the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingScheme,
    /// TBPTT truncation, `A=<exponent>` or `L=<length>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<String>,
    /// Update rule for rtrl/uoro/nobacktrack: `identity`, `precond:<name>`,
    /// `rmsprop`, `ong`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    #[serde(default)]
    pub phi: PhiSpec,
    #[serde(default)]
    pub force: bool,
    /// Experiment directory relative to the output root; defaults to `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub schedule: StepSchedule,
    pub system: ExampleSpec,
    #[serde(default)]
    pub adaptive: AdaptiveSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSpec>,
    #[serde(default)]
    pub convergence: ConvergenceSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<Arm>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn default_record_every() -> usize {
    1
}

fn default_sampling() -> SamplingScheme {
    SamplingScheme::Cycling
}

const CANNED: &[(&str, &str)] = &[
    ("cycling_vs_iid", include_str!("../configs/cycling_vs_iid.toml")),
    ("adam_beta2", include_str!("../configs/adam_beta2.toml")),
    ("tbptt_influence", include_str!("../configs/tbptt_influence.toml")),
    ("rnn", include_str!("../configs/rnn.toml")),
    ("sweep_b_sampling", include_str!("../configs/sweep_b_sampling.toml")),
    ("sweep_tbptt", include_str!("../configs/sweep_tbptt.toml")),
];

pub fn canned_names() -> impl Iterator<Item = &'static str> {
    CANNED.iter().map(|(n, _)| *n)
}

/// A shipped config by name.
pub fn canned(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = CANNED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::config(format!("no canned config `{name}`")))?;
    ExperimentConfig::from_toml(text)
}

/// Canned name or path to a TOML file.
pub fn load_config(name_or_path: &str) -> Result<ExperimentConfig> {
    let path = Path::new(name_or_path);
    if !path.exists() && canned_names().any(|n| n == name_or_path) {
        return canned(name_or_path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Parses `value` as a TOML value, falling back to a bare string.
pub fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config(format!("empty override key `{key}`")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// A copy with dotted-key overrides applied.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, toml::Value)>) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v)?;
        }
        table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
    }

    /// The variants to run: one per arm, or the config itself.
    pub fn resolve_arms(&self) -> Result<Vec<(Option<String>, ExperimentConfig)>> {
        let mut base = self.clone();
        base.arms.clear();
        base.sweep.clear();
        if self.arms.is_empty() {
            return Ok(vec![(None, base)]);
        }
        let mut seen = std::collections::BTreeSet::new();
        self.arms
            .iter()
            .map(|arm| {
                if arm.name.is_empty() || arm.name.contains(['/', '\\']) || !seen.insert(arm.name.as_str()) {
                    return Err(Error::config(format!("arm name `{}` must be unique, non-empty and path-free", arm.name)));
                }
                let cfg = base.with_overrides(arm.set.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
                Ok((Some(arm.name.clone()), cfg))
            })
            .collect()
    }

    pub fn truncation_schedule(&self) -> Result<Option<TruncationSchedule>> {
        self.truncation.as_deref().map(str::parse).transpose()
    }

    pub fn exponent_profile(&self) -> Result<ExponentProfile> {
        let spec = self.profile.unwrap_or(ProfileSpec {
            a: if self.sampling == SamplingScheme::Iid { 0.5 } else { 0.0 },
            gamma_loss: 0.0,
        });
        let truncation = match self.truncation_schedule()? {
            Some(t) => t.exponent(),
            None => None,
        };
        Ok(ExponentProfile { a: spec.a, gamma_loss: spec.gamma_loss, class: self.algorithm.class(), truncation })
    }

    /// Structural checks, then the exponent constraints unless `force`.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("experiment name must be non-empty and path-free"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.convergence.tol >= 0.0) {
            return Err(Error::config("convergence tolerance must be non-negative"));
        }
        self.schedule.validate()?;
        let trunc = self.truncation_schedule()?;
        if self.algorithm == Algorithm::Tbptt && trunc.is_none() {
            return Err(Error::config("tbptt needs `truncation` (A=<exponent> or L=<length>)"));
        }
        if matches!(self.algorithm, Algorithm::Adam | Algorithm::Rmsprop | Algorithm::Ong) {
            self.adaptive.inertia()?;
            self.adaptive.timing()?;
        }
        if self.force {
            return Ok(());
        }
        let verdict = validate_exponents(&self.exponent_profile()?, self.schedule.b);
        if !verdict.valid {
            return Err(Error::config(format!("invalid exponents (use --force to run anyway): {}", verdict.violations.join("; "))));
        }
        if let (Some(c), true) = (self.adaptive.c, matches!(self.algorithm, Algorithm::Adam | Algorithm::Rmsprop | Algorithm::Ong)) {
            if c * self.schedule.gamma > 1.0 {
                return Err(Error::config(format!("adaptive c={c} with gamma={} gives c*eta_1 > 1", self.schedule.gamma)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, ignoring seeds, output
    /// location, arms/sweep tables, `force`, and the choice of error
    /// injector among the RTRL variants.
    pub fn config_hash(&self) -> Result<u64> {
        let mut canon = self.clone();
        canon.seeds.clear();
        canon.output = None;
        canon.arms.clear();
        canon.sweep.clear();
        canon.force = false;
        if matches!(canon.algorithm, Algorithm::Uoro | Algorithm::Nobacktrack) {
            canon.algorithm = Algorithm::Rtrl;
        }
        Ok(stable_hash(canon.to_toml()?.as_bytes()))
    }

    fn build_rule(&self, built: &BuiltExample, stat: Statistic) -> Result<Adaptive> {
        let source = if self.adaptive.sample_statistic {
            let loss = built
                .sample_loss
                .clone()
                .ok_or_else(|| Error::config("sample_statistic needs a per-sample loss system"))?;
            StatSource::Sample(loss)
        } else {
            StatSource::Direction
        };
        let mut rule = Adaptive::new(stat, self.adaptive.inertia()?)?.with_source(source).with_timing(self.adaptive.timing()?);
        if let Some(eps) = self.adaptive.eps {
            rule = rule.with_eps(eps);
        }
        Ok(rule)
    }
}

/// Everything a single trial needs, built from a config and a seed.
pub struct TrialSetup {
    pub system: Arc<dyn System>,
    pub rule: Box<dyn UpdateRule>,
    pub phi: Box<dyn ParamUpdateOp>,
    pub injector: Box<dyn ErrorInjector>,
    pub s0: DVector<f64>,
    pub theta0: DVector<f64>,
    pub optimum: Option<DVector<f64>>,
}

impl fmt::Debug for TrialSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrialSetup")
            .field("rule", &self.rule.name())
            .field("injector", &self.injector.name())
            .field("theta0", &self.theta0)
            .finish()
    }
}

/// Builds system, rule, Φ, injector and starting point for one seed.
pub fn setup_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialSetup> {
    let ctx = BuildContext::new(cfg.sampling, cfg.horizon, cfg.name.clone(), seed);
    let built = make_example(&cfg.system, &ctx)?;
    let mut system = built.system.clone();
    let mut s0 = built.s0.clone();
    let rule: Box<dyn UpdateRule> = match cfg.algorithm {
        Algorithm::Adam => {
            let loss = built
                .sample_loss
                .clone()
                .ok_or_else(|| Error::config("adam needs a per-sample loss system (linear_regression or periodic_linear)"))?;
            let mut adam = AdamConfig::new(cfg.adaptive.beta1, 1.0);
            adam.inertia = cfg.adaptive.inertia()?;
            adam.timing = cfg.adaptive.timing.as_deref().map_or(Ok(Timing::PsiFirst), str::parse)?;
            if let Some(eps) = cfg.adaptive.eps {
                adam.eps = eps;
            }
            let (momentum, rule) = adam.build(loss)?;
            system = Arc::new(momentum);
            s0 = DVector::zeros(1);
            Box::new(rule)
        }
        Algorithm::Rmsprop => Box::new(cfg.build_rule(&built, Statistic::Rmsprop)?),
        Algorithm::Ong => Box::new(cfg.build_rule(&built, Statistic::Ong)?),
        Algorithm::Tbptt | Algorithm::Sgd => {
            if cfg.rule.as_deref().is_some_and(|r| r != "identity" && r != "sgd") {
                return Err(Error::config(format!("{:?} only supports the identity rule", cfg.algorithm)));
            }
            Box::new(Identity)
        }
        Algorithm::Rtrl | Algorithm::Uoro | Algorithm::Nobacktrack => {
            match cfg.rule.as_deref().map_or(Ok(RuleSpec::Identity), str::parse)? {
                RuleSpec::Identity => Box::new(Identity),
                RuleSpec::Precond(p) => Box::new(p.build(system.param_dim())?),
                RuleSpec::Rmsprop => Box::new(cfg.build_rule(&built, Statistic::Rmsprop)?),
                RuleSpec::Ong => Box::new(cfg.build_rule(&built, Statistic::Ong)?),
                RuleSpec::Adam => return Err(Error::config("use `algorithm = \"adam\"` for Adam")),
            }
        }
    };
    let injector: Box<dyn ErrorInjector> = match cfg.algorithm {
        Algorithm::Uoro => Box::new(RankOneInjector(Reducer::Uoro)),
        Algorithm::Nobacktrack => Box::new(RankOneInjector(Reducer::NoBackTrack)),
        _ => Box::new(ExactRtrl),
    };
    let p = system.param_dim();
    let phi: Box<dyn ParamUpdateOp> = match (built.bounds, cfg.phi) {
        (Some((lo, hi)), _) => Box::new(PhiProjected { lo, hi, dims: p }),
        (None, PhiSpec::Plain) => Box::new(PhiPlain),
        (None, PhiSpec::Clipped) => Box::new(PhiClipped),
    };
    let mut theta0 = match (&cfg.init.theta0, &built.optimum) {
        (Some(v), _) if v.len() == p => DVector::from_column_slice(v),
        (Some(v), _) => return Err(Error::config(format!("init.theta0 has length {}, the system has {p} parameters", v.len()))),
        (None, Some(star)) if cfg.init.around_optimum => star.clone(),
        (None, None) if cfg.init.around_optimum => return Err(Error::config("init.around_optimum needs a known optimum")),
        _ => DVector::zeros(p),
    };
    if cfg.init.scale > 0.0 {
        let mut rng = substream(&cfg.name, seed, "init");
        let s = cfg.init.scale;
        theta0.iter_mut().for_each(|x| *x += rng.random_range(-s..=s));
    }
    if let Some((lo, hi)) = built.bounds {
        theta0.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
    }
    Ok(TrialSetup { system, rule, phi, injector, s0, theta0, optimum: built.optimum })
}

/// Runs one seed of an already validated config.
pub fn run_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialRecord> {
    let setup = setup_trial(cfg, seed)?;
    let mut opts = RunOptions::new(cfg.horizon);
    opts.record_every = cfg.record_every.max(1);
    opts.theta_star = setup.optimum.clone();
    opts.config_hash = cfg.config_hash()?;
    if cfg.algorithm == Algorithm::Tbptt {
        let trunc = cfg.truncation_schedule()?.ok_or_else(|| Error::config("tbptt needs `truncation`"))?;
        let mut topts = TbpttOptions::new(cfg.horizon);
        topts.run = opts;
        topts.force = true;
        return run_tbptt(setup.system.as_ref(), &setup.s0, &setup.theta0, &cfg.schedule, &trunc, setup.phi.as_ref(), &topts);
    }
    let learner = Learner {
        sys: setup.system.as_ref(),
        rule: setup.rule.as_ref(),
        phi: setup.phi.as_ref(),
        inj: setup.injector.as_ref(),
    };
    let init = LearnerState::new(setup.system.as_ref(), setup.rule.as_ref(), setup.s0.clone(), setup.theta0.clone())?;
    let mut rng = trial_rng(&cfg.name, seed);
    run_learning(&learner, init, &cfg.schedule, &opts, &mut rng)
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub arm: Option<String>,
    pub seed: u64,
    pub outcome: Convergence,
    pub final_dist: f64,
    pub abort_t: Option<usize>,
}

impl SummaryRow {
    pub fn from_record(arm: Option<String>, seed: u64, rec: &TrialRecord, conv: &ConvergenceSpec) -> Self {
        SummaryRow {
            arm,
            seed,
            outcome: convergence_detector(rec, conv.tol, conv.window),
            final_dist: rec.final_dist(),
            abort_t: rec.abort_t,
        }
    }

    pub fn converged(&self) -> bool {
        matches!(self.outcome, Convergence::Converged { .. })
    }
}

pub const SUMMARY_HEADER: &str = "arm,seed,converged,converged_t,final_dist,abort_t";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let conv_t = match r.outcome {
            Convergence::Converged { t } => t.to_string(),
            _ => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arm.as_deref().unwrap_or(""),
            r.seed,
            u8::from(r.converged()),
            conv_t,
            r.final_dist,
            r.abort_t.map_or_else(String::new, |t| t.to_string())
        ));
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path().to_path_buf(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub rows: Vec<SummaryRow>,
    pub trial_files: Vec<PathBuf>,
}

impl RunSummary {
    /// Median final distance of one arm (`None` selects the unnamed arm).
    pub fn median_final_dist(&self, arm: Option<&str>) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.arm.as_deref() == arm).map(|r| r.final_dist).collect();
        median(&mut v)
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every arm and seed, writing `<root>/<output>/[<arm>/]<seed>.csv`,
/// the resolved `config.toml` per arm, and `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunSummary> {
    let arms = cfg.resolve_arms()?;
    for (_, a) in &arms {
        a.validate()?;
    }
    let dir = root.join(cfg.output.clone().unwrap_or_else(|| PathBuf::from(&cfg.name)));
    let jobs: Vec<(usize, u64)> = (0..arms.len()).flat_map(|i| arms[i].1.seeds.iter().map(move |&s| (i, s))).collect();
    let results = map_slice(&jobs, |&(i, seed)| -> Result<(SummaryRow, PathBuf)> {
        let (arm, acfg) = &arms[i];
        let rec = run_trial(acfg, seed)?;
        let arm_dir = arm.as_ref().map_or_else(|| dir.clone(), |a| dir.join(a));
        let path = arm_dir.join(format!("{seed}.csv"));
        write_atomic(&path, &rec.to_csv()?)?;
        Ok((SummaryRow::from_record(arm.clone(), seed, &rec, &acfg.convergence), path))
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut trial_files = Vec::with_capacity(results.len());
    for r in results {
        let (row, path) = r?;
        rows.push(row);
        trial_files.push(path);
    }
    for (arm, acfg) in &arms {
        let arm_dir = arm.as_ref().map_or_else(|| dir.clone(), |a| dir.join(a));
        write_atomic(&arm_dir.join("config.toml"), acfg.to_toml()?.as_bytes())?;
    }
    write_atomic(&dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    Ok(RunSummary { dir, rows, trial_files })
}

/// One aggregated grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub arm: Option<String>,
    /// `(dotted key, value)` of the grid point, in key order.
    pub point: Vec<(String, String)>,
    pub seeds: usize,
    pub mean_final_dist: f64,
    pub converged_fraction: f64,
    pub error: Option<String>,
}

fn grid_points(grid: &BTreeMap<String, Vec<toml::Value>>) -> Result<Vec<Vec<(String, toml::Value)>>> {
    let mut points = vec![Vec::new()];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::config(format!("sweep key `{key}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Runs the `[sweep]` grid (times the arms) and writes `sweep.csv`. A grid
/// point that fails to validate or run is recorded with its error.
pub fn run_sweep(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<SweepRow>> {
    let arms = cfg.resolve_arms()?;
    let points = grid_points(&cfg.sweep)?;
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..points.len()).map(move |p| (a, p))).collect();
    let rows = map_slice(&jobs, |&(a, p)| {
        let (arm, acfg) = &arms[a];
        let point = &points[p];
        let labels = point.iter().map(|(k, v)| (k.clone(), value_label(v))).collect();
        let attempt = || -> Result<(usize, f64, f64)> {
            let pcfg = acfg.with_overrides(point.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
            pcfg.validate()?;
            let recs = map_slice(&pcfg.seeds, |&seed| run_trial(&pcfg, seed));
            let mut dists = Vec::with_capacity(recs.len());
            let mut conv = 0usize;
            for r in recs {
                let r = r?;
                if matches!(convergence_detector(&r, pcfg.convergence.tol, pcfg.convergence.window), Convergence::Converged { .. }) {
                    conv += 1;
                }
                dists.push(r.final_dist());
            }
            let n = dists.len();
            Ok((n, dists.iter().sum::<f64>() / n as f64, conv as f64 / n as f64))
        };
        match attempt() {
            Ok((seeds, mean, frac)) => {
                SweepRow { arm: arm.clone(), point: labels, seeds, mean_final_dist: mean, converged_fraction: frac, error: None }
            }
            Err(e) => SweepRow {
                arm: arm.clone(),
                point: labels,
                seeds: 0,
                mean_final_dist: f64::NAN,
                converged_fraction: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    });
    let dir = root.join(cfg.output.clone().unwrap_or_else(|| PathBuf::from(&cfg.name)));
    write_atomic(&dir.join("sweep.csv"), sweep_csv(&cfg.sweep, &rows)?.as_slice())?;
    Ok(rows)
}

pub fn sweep_csv(grid: &BTreeMap<String, Vec<toml::Value>>, rows: &[SweepRow]) -> Result<Vec<u8>> {
    let to_err = |e: csv::Error| Error::Csv { path: "sweep.csv".into(), source: e };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["arm".to_string()];
    header.extend(grid.keys().cloned());
    header.extend(["seeds", "mean_final_dist", "converged_fraction", "error"].map(String::from));
    w.write_record(&header).map_err(to_err)?;
    for r in rows {
        let mut rec = vec![r.arm.clone().unwrap_or_default()];
        rec.extend(r.point.iter().map(|(_, v)| v.clone()));
        rec.push(r.seeds.to_string());
        rec.push(r.mean_final_dist.to_string());
        rec.push(r.converged_fraction.to_string());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::io("sweep.csv", e.into_error()))
}

/// Parses `key=value` (value as TOML, falling back to a string).
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("expected key=value, got `{s}`")))?;
    if k.trim().is_empty() {
        return Err(Error::config(format!("empty key in `{s}`")));
    }
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Applies `key=value` assignments and `key=[v1, v2]` grid entries.
pub fn apply_cli(cfg: &ExperimentConfig, set: &[String], grid: &[String]) -> Result<ExperimentConfig> {
    let sets = set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    let mut out = cfg.with_overrides(sets.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    for g in grid {
        let (k, v) = parse_assignment(g)?;
        let values = match v {
            toml::Value::Array(a) => a,
            other => vec![other],
        };
        out.sweep.insert(k, values);
    }
    Ok(out)
}

/// The reference parameter of a config: θ* when known, else seed 0's θ₀.
fn reference_point(cfg: &ExperimentConfig) -> Result<TrialSetup> {
    let mut setup = setup_trial(cfg, cfg.seeds.first().copied().unwrap_or(0))?;
    if let Some(star) = &setup.optimum {
        setup.theta0 = star.clone();
    }
    Ok(setup)
}

/// Spectral radius of `∂sT` along the trajectory at the reference parameter.
pub fn check_config_stability(cfg: &ExperimentConfig, window: usize, k_max: usize) -> Result<crate::diagnostics::HorizonProfile> {
    let setup = reference_point(cfg)?;
    crate::diagnostics::check_stability(setup.system.as_ref(), &setup.theta0, &setup.s0, window, k_max)
}

/// Local optimality report at the reference parameter. Rules with
/// auxiliary coordinates are not supported.
pub fn check_config_optimum(cfg: &ExperimentConfig, horizon: usize) -> Result<crate::diagnostics::LocalOptimumReport> {
    let setup = reference_point(cfg)?;
    let p = setup.system.param_dim();
    if setup.rule.aux_dim(p) > 0 {
        return Err(Error::config(format!("optimum check does not support rule `{}` with auxiliary state", setup.rule.name())));
    }
    crate::diagnostics::local_optimum_report(setup.system.as_ref(), setup.rule.as_ref(), &setup.s0, &setup.theta0, horizon)
}
