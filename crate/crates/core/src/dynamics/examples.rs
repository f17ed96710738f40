//! Config-driven factory for the shipped example systems.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::systems::{InfluenceBalancing, LinearSystem, ParamAsState, PeriodicLinear, Regression, Rnn, SampleLoss};
use super::{run_trajectory, DataStream, Dataset, SampleOrder, StateLoss, System, Targets};
use crate::error::{Error, Result};
use crate::linalg::{op_norm, random_matrix, random_vector};
use crate::rng::{substream, trial_rng};
use crate::schedules::SamplingScheme;

/// Serializable description of an example system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExampleSpec {
    /// `s_t = A s_{t−1} + B θ + C x_t`; `C` requires `data`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<DataSpec>,
        #[serde(default)]
        loss: LossSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s0: Option<Vec<f64>>,
    },
    /// Non-recurrent least squares `s_t = W x_t`.
    LinearRegression { data: DataSpec },
    /// Student RNN fitting the states of a random teacher RNN.
    Rnn {
        state_dim: usize,
        input_dim: usize,
        /// Operator norm of the teacher's recurrent matrix.
        #[serde(default = "default_recurrent_norm")]
        recurrent_norm: f64,
        /// Teacher sequence length; 0 means the run horizon.
        #[serde(default)]
        seq_len: usize,
        #[serde(default)]
        data_seed: u64,
    },
    /// `s_t = β s_{t−1} + (1 − β) ℓ(x_t, y_t, θ)` over a per-sample loss.
    Momentum { beta: f64, base: Box<ExampleSpec> },
    InfluenceBalancing {
        #[serde(default = "default_ib_n")]
        n: usize,
        #[serde(default = "default_ib_n_plus")]
        n_plus: usize,
        #[serde(default = "default_half")]
        diag: f64,
        #[serde(default = "default_half")]
        coupling: f64,
        #[serde(default = "default_one")]
        target: f64,
    },
    /// Scalar linear losses `big·θ` once per period and `−θ` otherwise,
    /// with θ confined to `[−1, 1]`.
    PeriodicLinear { period: usize, big: f64 },
}

fn default_recurrent_norm() -> f64 {
    2.0
}
fn default_ib_n() -> usize {
    6
}
fn default_ib_n_plus() -> usize {
    1
}
fn default_half() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    Zero,
    /// Sum of state coordinates.
    #[default]
    Sum,
    Linear { weights: Vec<f64> },
    /// `‖R s − y‖²`; `R` defaults to the identity.
    Squared {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        readout: Option<Vec<Vec<f64>>>,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Noisy random linear teacher, fixed by `data_seed`.
    Synthetic {
        n: usize,
        inputs: usize,
        #[serde(default = "default_outputs")]
        outputs: usize,
        /// Inputs are uniform on `[−input_scale, input_scale]`.
        #[serde(default = "default_one")]
        input_scale: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        data_seed: u64,
    },
    Csv { path: PathBuf },
}

fn default_outputs() -> usize {
    1
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic { n, inputs, outputs, input_scale, noise, data_seed } => {
                if *n == 0 || *inputs == 0 || *outputs == 0 || !(*input_scale > 0.0) {
                    return Err(Error::config("synthetic dataset needs positive n, inputs, outputs and input_scale"));
                }
                let mut rng = trial_rng("dataset", *data_seed);
                Dataset::synthetic_linear(&mut rng, *n, *inputs, *outputs, *input_scale, *noise)
            }
            DataSpec::Csv { path } => Dataset::from_csv(path),
        }
    }
}

/// Per-trial context: sampling scheme, horizon and RNG identity.
#[derive(Debug, Clone)]
pub struct BuildContext {
    pub scheme: SamplingScheme,
    pub horizon: usize,
    pub experiment: String,
    pub seed: u64,
}

impl BuildContext {
    pub fn new(scheme: SamplingScheme, horizon: usize, experiment: impl Into<String>, seed: u64) -> Self {
        BuildContext { scheme, horizon, experiment: experiment.into(), seed }
    }

    fn stream(&self, dataset: Arc<Dataset>) -> Result<DataStream> {
        let n = dataset.len();
        let rng = substream(&self.experiment, self.seed, "sampler");
        let order = SampleOrder::from_scheme(self.scheme, n, self.horizon, rng)?;
        DataStream::new(dataset, order)
    }
}

/// A constructed example with what the harness needs to run and score it.
#[derive(Debug, Clone)]
pub struct BuiltExample {
    pub system: Arc<dyn System>,
    /// Per-sample loss, for non-recurrent kinds (momentum and Adam wrap it).
    pub sample_loss: Option<Arc<dyn SampleLoss>>,
    /// Known optimum θ*, when the construction provides one.
    pub optimum: Option<DVector<f64>>,
    pub s0: DVector<f64>,
    /// Box constraint on θ, applied by projection.
    pub bounds: Option<(f64, f64)>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::config(format!("{what} must be a non-empty rectangular matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl LossSpec {
    fn build(&self, n: usize) -> Result<StateLoss> {
        Ok(match self {
            LossSpec::Zero => StateLoss::Zero,
            LossSpec::Sum => StateLoss::Linear(DVector::from_element(n, 1.0)),
            LossSpec::Linear { weights } => StateLoss::Linear(DVector::from_column_slice(weights)),
            LossSpec::Squared { readout, target } => {
                let readout = match readout {
                    Some(r) => matrix(r, "loss readout")?,
                    None => DMatrix::identity(n, n),
                };
                if readout.nrows() != target.len() {
                    return Err(Error::config("loss target length must match readout rows"));
                }
                StateLoss::Squared { readout, targets: Targets::Constant(DVector::from_column_slice(target)) }
            }
        })
    }
}

pub fn make_example(spec: &ExampleSpec, ctx: &BuildContext) -> Result<BuiltExample> {
    match spec {
        ExampleSpec::Linear { a, b, c, data, loss, s0 } => {
            let a = matrix(a, "A")?;
            let b = matrix(b, "B")?;
            let n = a.nrows();
            let input = match (c, data) {
                (Some(c), Some(d)) => Some((matrix(c, "C")?, ctx.stream(Arc::new(d.load()?))?)),
                (None, None) => None,
                _ => return Err(Error::config("linear system input needs both `c` and `data`")),
            };
            let system = LinearSystem::new(a, b, input, loss.build(n)?)?;
            let s0 = match s0 {
                Some(v) if v.len() == n => DVector::from_column_slice(v),
                Some(_) => return Err(Error::config("s0 length must match the state dimension")),
                None => DVector::zeros(n),
            };
            Ok(BuiltExample { system: Arc::new(system), sample_loss: None, optimum: None, s0, bounds: None })
        }
        ExampleSpec::LinearRegression { data } => {
            let dataset = Arc::new(data.load()?);
            let optimum = Regression::least_squares_optimum(&dataset).ok();
            let reg = Arc::new(Regression::new(ctx.stream(dataset.clone())?));
            Ok(BuiltExample {
                s0: DVector::zeros(dataset.output_dim()),
                system: reg.clone(),
                sample_loss: Some(reg),
                optimum,
                bounds: None,
            })
        }
        ExampleSpec::Rnn { state_dim, input_dim, recurrent_norm, seq_len, data_seed } => {
            let n = *state_dim;
            if n == 0 || *input_dim == 0 || !(*recurrent_norm >= 0.0) {
                return Err(Error::config("rnn needs positive state_dim, input_dim and a non-negative recurrent_norm"));
            }
            let len = if *seq_len == 0 { ctx.horizon.max(1) } else { *seq_len };
            let mut rng = trial_rng("rnn-teacher", *data_seed);
            let mut w = random_matrix(&mut rng, n, n, 1.0);
            let norm = op_norm(&w);
            if norm > 0.0 {
                w *= recurrent_norm / norm;
            }
            let u = random_matrix(&mut rng, n, *input_dim, 1.0);
            let bias = random_vector(&mut rng, n, 0.5);
            let xs: Vec<DVector<f64>> = (0..len).map(|_| random_vector(&mut rng, *input_dim, 1.0)).collect();
            let teacher_theta = Rnn::pack(&w, &u, &bias);
            let placeholder = Arc::new(Dataset::new(xs.clone(), vec![DVector::zeros(n); len])?);
            let teacher = Rnn::full(n, Some(DataStream::cycling(placeholder)), StateLoss::Zero)?;
            // Burn in to the teacher's periodic orbit so that the targets
            // wrap around consistently and θ_teacher has zero loss.
            let periods = 200usize.div_ceil(len).max(2);
            let traj = run_trajectory(&teacher, &DVector::zeros(n), &teacher_theta, periods * len)?;
            let last = (periods - 1) * len;
            let orbit_start = traj.states[last].clone();
            let data = Arc::new(Dataset::new(xs, traj.states[last + 1..=last + len].to_vec())?);
            let stream = DataStream::cycling(data);
            let loss = StateLoss::Squared { readout: DMatrix::identity(n, n), targets: Targets::Stream(stream.clone()) };
            let student = Rnn::full(n, Some(stream), loss)?;
            Ok(BuiltExample {
                system: Arc::new(student),
                sample_loss: None,
                optimum: Some(teacher_theta),
                s0: orbit_start,
                bounds: None,
            })
        }
        ExampleSpec::Momentum { beta, base } => {
            let inner = make_example(base, ctx)?;
            let loss = inner
                .sample_loss
                .ok_or_else(|| Error::config("momentum base must be a per-sample loss (linear_regression or periodic_linear)"))?;
            let system = super::Momentum::new(*beta, loss.clone())?;
            Ok(BuiltExample {
                system: Arc::new(system),
                sample_loss: Some(loss),
                optimum: inner.optimum,
                s0: DVector::zeros(1),
                bounds: inner.bounds,
            })
        }
        ExampleSpec::InfluenceBalancing { n, n_plus, diag, coupling, target } => {
            let ib = InfluenceBalancing { n: *n, n_plus: *n_plus, diag: *diag, coupling: *coupling, target: *target };
            let system = ib.build()?;
            let optimum = ib.optimum().ok().map(|v| DVector::from_element(1, v));
            Ok(BuiltExample { system: Arc::new(system), sample_loss: None, optimum, s0: DVector::zeros(*n), bounds: None })
        }
        ExampleSpec::PeriodicLinear { period, big } => {
            let pl = PeriodicLinear::new(*period, *big)?;
            let loss: Arc<dyn SampleLoss> = Arc::new(pl);
            Ok(BuiltExample {
                system: Arc::new(ParamAsState::new(loss.clone())),
                sample_loss: Some(loss),
                optimum: Some(DVector::from_element(1, pl.optimum())),
                s0: DVector::zeros(1),
                bounds: Some((-1.0, 1.0)),
            })
        }
    }
}
