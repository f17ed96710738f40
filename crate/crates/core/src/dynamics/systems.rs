//! Concrete systems: linear, non-recurrent regression, parameter-as-state,
//! momentum, simple RNN, influence balancing, and a few synthetic ones.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{DataStream, Dataset, StateLoss, System, Targets};
use crate::error::{Error, Result};
use crate::linalg::sigmoid;

/// Per-sample loss `ℓ(x_{i_t}, y_{i_t}, θ)` of a dataset read in time order.
pub trait SampleLoss: Send + Sync + Debug {
    fn param_dim(&self) -> usize;
    fn value(&self, t: usize, theta: &DVector<f64>) -> f64;
    fn grad(&self, t: usize, theta: &DVector<f64>) -> DVector<f64>;
}

/// `s_t = A s_{t−1} + B θ + C x_t`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    input: Option<(DMatrix<f64>, DataStream)>,
    loss: StateLoss,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, input: Option<(DMatrix<f64>, DataStream)>, loss: StateLoss) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::config(format!(
                "linear system needs square A and B with matching rows, got A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if let Some((c, stream)) = &input {
            if c.nrows() != n || c.ncols() != stream.dataset.input_dim() {
                return Err(Error::config("input matrix C does not match state and input dimensions"));
            }
        }
        check_loss_dims(&loss, n)?;
        Ok(LinearSystem { a, b, input, loss })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

fn check_loss_dims(loss: &StateLoss, n: usize) -> Result<()> {
    match loss {
        StateLoss::Zero => Ok(()),
        StateLoss::Linear(w) if w.len() == n => Ok(()),
        StateLoss::Squared { readout, .. } if readout.ncols() == n => Ok(()),
        _ => Err(Error::config(format!("loss does not act on a state of dimension {n}"))),
    }
}

impl System for LinearSystem {
    fn param_dim(&self) -> usize {
        self.b.ncols()
    }

    fn state_dim(&self, _t: usize) -> usize {
        self.a.nrows()
    }

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * s + &self.b * theta;
        if let Some((c, stream)) = &self.input {
            next += c * stream.x(t);
        }
        next
    }

    fn jac_state(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn jac_param(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64 {
        self.loss.value(t, s)
    }

    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.loss.grad(t, s)
    }

    fn is_recurrent(&self) -> bool {
        self.a.iter().any(|&v| v != 0.0)
    }

    fn describe(&self) -> String {
        format!("linear(n={}, p={})", self.a.nrows(), self.b.ncols())
    }
}

/// Non-recurrent linear regression: the state is the prediction
/// `s_t = W x_{i_t}` and `ℓ_t(s) = ‖s − y_{i_t}‖²`. The parameter is `W`
/// flattened row-major.
#[derive(Debug, Clone)]
pub struct Regression {
    data: DataStream,
}

impl Regression {
    pub fn new(data: DataStream) -> Self {
        Regression { data }
    }

    fn inputs(&self) -> usize {
        self.data.dataset.input_dim()
    }

    fn outputs(&self) -> usize {
        self.data.dataset.output_dim()
    }

    fn weights(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.outputs(), self.inputs(), theta.as_slice())
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data.dataset
    }

    /// Minimiser of the dataset-average loss from the normal equations.
    pub fn least_squares_optimum(dataset: &Dataset) -> Result<DVector<f64>> {
        let (d, m) = (dataset.input_dim(), dataset.output_dim());
        let mut xx = DMatrix::zeros(d, d);
        let mut yx = DMatrix::zeros(m, d);
        for (x, y) in dataset.xs.iter().zip(&dataset.ys) {
            xx += x * x.transpose();
            yx += y * x.transpose();
        }
        let inv = xx
            .try_inverse()
            .ok_or_else(|| Error::domain("singular design matrix: least-squares optimum is not unique"))?;
        let w = yx * inv;
        Ok(DVector::from_iterator(m * d, w.transpose().iter().copied()))
    }

    /// Dataset-average Hessian of the loss in θ.
    pub fn average_hessian(dataset: &Dataset) -> DMatrix<f64> {
        let (d, m) = (dataset.input_dim(), dataset.output_dim());
        let mut xx = DMatrix::zeros(d, d);
        for x in &dataset.xs {
            xx += x * x.transpose();
        }
        xx *= 2.0 / dataset.len() as f64;
        let mut h = DMatrix::zeros(m * d, m * d);
        for i in 0..m {
            h.view_mut((i * d, i * d), (d, d)).copy_from(&xx);
        }
        h
    }
}

impl System for Regression {
    fn param_dim(&self) -> usize {
        self.inputs() * self.outputs()
    }

    fn state_dim(&self, _t: usize) -> usize {
        self.outputs()
    }

    fn transition(&self, t: usize, _s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.weights(theta) * self.data.x(t)
    }

    fn jac_state(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.outputs(), self.outputs())
    }

    fn jac_param(&self, t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        let (d, m) = (self.inputs(), self.outputs());
        let x = self.data.x(t);
        let mut j = DMatrix::zeros(m, m * d);
        for i in 0..m {
            for k in 0..d {
                j[(i, i * d + k)] = x[k];
            }
        }
        j
    }

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64 {
        (s - self.data.y(t)).norm_squared()
    }

    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        (s - self.data.y(t)) * 2.0
    }

    fn is_recurrent(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("regression(n={}, d={}, m={})", self.data.dataset.len(), self.inputs(), self.outputs())
    }
}

impl SampleLoss for Regression {
    fn param_dim(&self) -> usize {
        self.inputs() * self.outputs()
    }

    fn value(&self, t: usize, theta: &DVector<f64>) -> f64 {
        (self.weights(theta) * self.data.x(t) - self.data.y(t)).norm_squared()
    }

    fn grad(&self, t: usize, theta: &DVector<f64>) -> DVector<f64> {
        let x = self.data.x(t);
        let r = (self.weights(theta) * x - self.data.y(t)) * 2.0;
        let g = r * x.transpose();
        DVector::from_iterator(g.len(), g.transpose().iter().copied())
    }
}

/// The non-recurrent case written with the parameter as state:
/// `s_t = θ` and `ℓ_t(s) = ℓ(x_{i_t}, y_{i_t}, s)`.
#[derive(Debug, Clone)]
pub struct ParamAsState<L> {
    loss: L,
}

impl<L: SampleLoss> ParamAsState<L> {
    pub fn new(loss: L) -> Self {
        ParamAsState { loss }
    }

    pub fn sample_loss(&self) -> &L {
        &self.loss
    }
}

impl<L: SampleLoss> System for ParamAsState<L> {
    fn param_dim(&self) -> usize {
        self.loss.param_dim()
    }

    fn state_dim(&self, _t: usize) -> usize {
        self.loss.param_dim()
    }

    fn transition(&self, _t: usize, _s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        theta.clone()
    }

    fn jac_state(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.loss.param_dim();
        DMatrix::zeros(p, p)
    }

    fn jac_param(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.loss.param_dim();
        DMatrix::identity(p, p)
    }

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64 {
        self.loss.value(t, s)
    }

    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.loss.grad(t, s)
    }

    fn is_recurrent(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("param_as_state({:?})", self.loss)
    }
}

/// `s_t = β s_{t−1} + (1 − β) ℓ(x_{i_t}, y_{i_t}, θ)` with `ℓ_t(s) = s`;
/// RTRL on this system is SGD with momentum `β`.
#[derive(Debug, Clone)]
pub struct Momentum<L> {
    beta: f64,
    loss: L,
}

impl<L: SampleLoss> Momentum<L> {
    pub fn new(beta: f64, loss: L) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::config(format!("momentum beta={beta} must lie in [0, 1)")));
        }
        Ok(Momentum { beta, loss })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sample_loss(&self) -> &L {
        &self.loss
    }
}

impl<L: SampleLoss> System for Momentum<L> {
    fn param_dim(&self) -> usize {
        self.loss.param_dim()
    }

    fn state_dim(&self, _t: usize) -> usize {
        1
    }

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.beta * s[0] + (1.0 - self.beta) * self.loss.value(t, theta))
    }

    fn jac_state(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.beta)
    }

    fn jac_param(&self, t: usize, _s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let g = self.loss.grad(t, theta) * (1.0 - self.beta);
        DMatrix::from_row_slice(1, g.len(), g.as_slice())
    }

    fn loss(&self, _t: usize, s: &DVector<f64>) -> f64 {
        s[0]
    }

    fn loss_grad(&self, _t: usize, _s: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }

    fn is_recurrent(&self) -> bool {
        self.beta != 0.0
    }

    fn describe(&self) -> String {
        format!("momentum(beta={}, {:?})", self.beta, self.loss)
    }
}

/// Simple RNN `s_t = sigmoid(W s_{t−1} + U x_t + B)`.
///
/// The raw weights `(W, U, B)` (row-major, concatenated) are an affine image
/// `E θ + o` of the trained parameter, so subsets or random low-dimensional
/// slices of the weights can be trained.
#[derive(Debug, Clone)]
pub struct Rnn {
    n: usize,
    d: usize,
    embedding: DMatrix<f64>,
    offset: DVector<f64>,
    inputs: Option<DataStream>,
    loss: StateLoss,
}

impl Rnn {
    pub fn raw_len(n: usize, d: usize) -> usize {
        n * n + n * d + n
    }

    /// All weights trained: `θ = (W, U, B)`.
    pub fn full(n: usize, inputs: Option<DataStream>, loss: StateLoss) -> Result<Self> {
        let d = inputs.as_ref().map_or(0, |s| s.dataset.input_dim());
        let len = Self::raw_len(n, d);
        Self::embedded(n, DMatrix::identity(len, len), DVector::zeros(len), inputs, loss)
    }

    pub fn embedded(
        n: usize,
        embedding: DMatrix<f64>,
        offset: DVector<f64>,
        inputs: Option<DataStream>,
        loss: StateLoss,
    ) -> Result<Self> {
        let d = inputs.as_ref().map_or(0, |s| s.dataset.input_dim());
        let len = Self::raw_len(n, d);
        if n == 0 || embedding.nrows() != len || offset.len() != len {
            return Err(Error::config(format!(
                "rnn embedding must have {len} rows for n={n}, d={d}, got {:?}",
                embedding.shape()
            )));
        }
        check_loss_dims(&loss, n)?;
        Ok(Rnn { n, d, embedding, offset, inputs, loss })
    }

    /// Flattens `(W, U, B)` into raw weight order.
    pub fn pack(w: &DMatrix<f64>, u: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut out: Vec<f64> = w.transpose().iter().copied().collect();
        out.extend(u.transpose().iter());
        out.extend(b.iter());
        DVector::from_vec(out)
    }

    fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let raw = &self.embedding * theta + &self.offset;
        let (n, d) = (self.n, self.d);
        let w = DMatrix::from_row_slice(n, n, &raw.as_slice()[..n * n]);
        let u = DMatrix::from_row_slice(n, d, &raw.as_slice()[n * n..n * n + n * d]);
        let b = DVector::from_column_slice(&raw.as_slice()[n * n + n * d..]);
        (w, u, b)
    }

    fn preactivation(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (w, u, b) = self.unpack(theta);
        let mut z = &w * s + b;
        if let Some(stream) = &self.inputs {
            z += &u * stream.x(t);
        }
        (z, w)
    }

    pub fn recurrent_weights(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.unpack(theta).0
    }
}

impl System for Rnn {
    fn param_dim(&self) -> usize {
        self.embedding.ncols()
    }

    fn state_dim(&self, _t: usize) -> usize {
        self.n
    }

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.preactivation(t, s, theta).0.map(sigmoid)
    }

    fn jac_state(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let (z, w) = self.preactivation(t, s, theta);
        let mut j = w;
        for i in 0..self.n {
            let sg = sigmoid(z[i]);
            j.row_mut(i).scale_mut(sg * (1.0 - sg));
        }
        j
    }

    fn jac_param(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let (z, _) = self.preactivation(t, s, theta);
        let (n, d) = (self.n, self.d);
        let mut raw = DMatrix::zeros(n, Self::raw_len(n, d));
        let x = self.inputs.as_ref().map(|st| st.x(t));
        for i in 0..n {
            let sg = sigmoid(z[i]);
            let ds = sg * (1.0 - sg);
            for j in 0..n {
                raw[(i, i * n + j)] = ds * s[j];
            }
            if let Some(x) = x {
                for j in 0..d {
                    raw[(i, n * n + i * d + j)] = ds * x[j];
                }
            }
            raw[(i, n * n + n * d + i)] = ds;
        }
        raw * &self.embedding
    }

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64 {
        self.loss.value(t, s)
    }

    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.loss.grad(t, s)
    }

    fn describe(&self) -> String {
        format!("rnn(n={}, d={}, p={})", self.n, self.d, self.embedding.ncols())
    }
}

/// Linear chain whose parameter helps the read-out coordinate in the short
/// term and hurts it in the long run.
///
/// `s_t = A s_{t−1} + u θ` with `A` lower-bidiagonal (`diag` on the
/// diagonal, `coupling` below it, so influence flows towards the last
/// coordinate), `u_i = +1` on the last `n_plus` coordinates and `−1`
/// elsewhere, and `ℓ_t(s) = (s_n − target)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceBalancing {
    pub n: usize,
    pub n_plus: usize,
    pub diag: f64,
    pub coupling: f64,
    pub target: f64,
}

impl Default for InfluenceBalancing {
    fn default() -> Self {
        InfluenceBalancing { n: 6, n_plus: 1, diag: 0.5, coupling: 0.5, target: 1.0 }
    }
}

impl InfluenceBalancing {
    fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if self.n == 0 || self.n_plus > self.n {
            return Err(Error::config(format!("influence balancing needs 0 < n_plus <= n, got n={}, n_plus={}", self.n, self.n_plus)));
        }
        if self.diag.abs() >= 1.0 {
            return Err(Error::config(format!("influence balancing diag={} must have |diag| < 1 for stability", self.diag)));
        }
        let n = self.n;
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = self.diag;
            if i + 1 < n {
                a[(i + 1, i)] = self.coupling;
            }
        }
        let u = DMatrix::from_fn(n, 1, |i, _| if i >= n - self.n_plus { 1.0 } else { -1.0 });
        Ok((a, u))
    }

    pub fn build(&self) -> Result<LinearSystem> {
        let (a, u) = self.matrices()?;
        let mut readout = DMatrix::zeros(1, self.n);
        readout[(0, self.n - 1)] = 1.0;
        LinearSystem::new(
            a,
            u,
            None,
            StateLoss::Squared { readout, targets: Targets::Constant(DVector::from_element(1, self.target)) },
        )
    }

    /// Long-run gain `e_nᵀ (I − A)^{-1} u` of the read-out coordinate.
    pub fn steady_gain(&self) -> Result<f64> {
        let (a, u) = self.matrices()?;
        let fixed = (DMatrix::identity(self.n, self.n) - a)
            .lu()
            .solve(&u)
            .ok_or_else(|| Error::domain("I - A is singular"))?;
        Ok(fixed[(self.n - 1, 0)])
    }

    /// One-step gain of the read-out coordinate (`u_n`).
    pub fn one_step_gain(&self) -> f64 {
        1.0
    }

    /// Parameter whose fixed point puts the read-out on target.
    pub fn optimum(&self) -> Result<f64> {
        let g = self.steady_gain()?;
        if g == 0.0 {
            return Err(Error::domain("zero steady gain: optimum undefined"));
        }
        Ok(self.target / g)
    }
}

/// Period-`n` linear losses on a scalar parameter: `ℓ_t(θ) = big·θ` when
/// `t ≡ 1 (mod n)`, `−θ` otherwise. Used with θ projected on `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicLinear {
    pub period: usize,
    pub big: f64,
}

impl PeriodicLinear {
    pub fn new(period: usize, big: f64) -> Result<Self> {
        if period < 2 {
            return Err(Error::config("periodic linear loss needs period >= 2"));
        }
        Ok(PeriodicLinear { period, big })
    }

    fn slope(&self, t: usize) -> f64 {
        if (t.max(1) - 1).is_multiple_of(self.period) {
            self.big
        } else {
            -1.0
        }
    }

    /// Average slope over a period.
    pub fn mean_slope(&self) -> f64 {
        (self.big - (self.period - 1) as f64) / self.period as f64
    }

    /// Minimiser of the average loss over `[−1, 1]`.
    pub fn optimum(&self) -> f64 {
        if self.mean_slope() > 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

impl SampleLoss for PeriodicLinear {
    fn param_dim(&self) -> usize {
        1
    }

    fn value(&self, t: usize, theta: &DVector<f64>) -> f64 {
        self.slope(t) * theta[0]
    }

    fn grad(&self, t: usize, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.slope(t))
    }
}

impl<L: SampleLoss + ?Sized> SampleLoss for Arc<L> {
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }

    fn value(&self, t: usize, theta: &DVector<f64>) -> f64 {
        (**self).value(t, theta)
    }

    fn grad(&self, t: usize, theta: &DVector<f64>) -> DVector<f64> {
        (**self).grad(t, theta)
    }
}

/// `T_t ≡ 0` with zero loss.
#[derive(Debug, Clone, Copy)]
pub struct ZeroSystem {
    pub dim: usize,
    pub params: usize,
}

impl System for ZeroSystem {
    fn param_dim(&self) -> usize {
        self.params
    }

    fn state_dim(&self, _t: usize) -> usize {
        self.dim
    }

    fn transition(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn jac_state(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }

    fn jac_param(&self, _t: usize, _s: &DVector<f64>, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.params)
    }

    fn loss(&self, _t: usize, _s: &DVector<f64>) -> f64 {
        0.0
    }

    fn loss_grad(&self, _t: usize, _s: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn is_recurrent(&self) -> bool {
        false
    }
}

/// Synthetic system whose state dimension alternates between 2 (even `t`)
/// and 3 (odd `t`): `s_t = tanh(M_t s_{t−1} + N_t θ)`, `ℓ_t(s) = ½‖s‖²`.
#[derive(Debug, Clone, Copy)]
pub struct AlternatingDim {
    pub params: usize,
}

impl AlternatingDim {
    fn coupling(&self, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (rows, cols) = (self.state_dim(t), self.state_dim(t - 1));
        let phase = (t % 2) as f64;
        let m = DMatrix::from_fn(rows, cols, |i, j| 0.4 * ((i + 2 * j) as f64 + phase).sin());
        let n = DMatrix::from_fn(rows, self.params, |i, j| 0.5 * ((2 * i + j) as f64 - phase).cos());
        (m, n)
    }
}

impl System for AlternatingDim {
    fn param_dim(&self) -> usize {
        self.params
    }

    fn state_dim(&self, t: usize) -> usize {
        if t.is_multiple_of(2) {
            2
        } else {
            3
        }
    }

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (m, n) = self.coupling(t);
        (m * s + n * theta).map(f64::tanh)
    }

    fn jac_state(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let (m, n) = self.coupling(t);
        let z = &m * s + n * theta;
        let mut j = m;
        for i in 0..z.len() {
            j.row_mut(i).scale_mut(1.0 - z[i].tanh().powi(2));
        }
        j
    }

    fn jac_param(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let (m, n) = self.coupling(t);
        let z = m * s + &n * theta;
        let mut j = n;
        for i in 0..z.len() {
            j.row_mut(i).scale_mut(1.0 - z[i].tanh().powi(2));
        }
        j
    }

    fn loss(&self, _t: usize, s: &DVector<f64>) -> f64 {
        0.5 * s.norm_squared()
    }

    fn loss_grad(&self, _t: usize, s: &DVector<f64>) -> DVector<f64> {
        s.clone()
    }
}

/// Resets the state to `reset` before every `every`-th transition
/// (`t = every + 1, 2·every + 1, …`), as an end-of-sequence marker would.
/// Losses at reset steps are counted normally.
#[derive(Debug, Clone)]
pub struct WithResets<S> {
    inner: S,
    every: usize,
    reset: DVector<f64>,
}

impl<S: System> WithResets<S> {
    pub fn new(inner: S, every: usize, reset: DVector<f64>) -> Result<Self> {
        if every == 0 {
            return Err(Error::config("reset period must be positive"));
        }
        if reset.len() != inner.state_dim(0) {
            return Err(Error::config("reset state has the wrong dimension"));
        }
        Ok(WithResets { inner, every, reset })
    }

    pub fn is_reset(&self, t: usize) -> bool {
        t > 1 && (t - 1).is_multiple_of(self.every)
    }
}

impl<S: System> System for WithResets<S> {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }

    fn state_dim(&self, t: usize) -> usize {
        self.inner.state_dim(t)
    }

    fn transition(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        if self.is_reset(t) {
            self.inner.transition(t, &self.reset, theta)
        } else {
            self.inner.transition(t, s, theta)
        }
    }

    fn jac_state(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        if self.is_reset(t) {
            DMatrix::zeros(self.inner.state_dim(t), self.inner.state_dim(t - 1))
        } else {
            self.inner.jac_state(t, s, theta)
        }
    }

    fn jac_param(&self, t: usize, s: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        if self.is_reset(t) {
            self.inner.jac_param(t, &self.reset, theta)
        } else {
            self.inner.jac_param(t, s, theta)
        }
    }

    fn loss(&self, t: usize, s: &DVector<f64>) -> f64 {
        self.inner.loss(t, s)
    }

    fn loss_grad(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.inner.loss_grad(t, s)
    }

    fn describe(&self) -> String {
        format!("resets(every={}, {})", self.every, self.inner.describe())
    }
}
