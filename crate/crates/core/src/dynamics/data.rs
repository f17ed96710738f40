//! Finite datasets and the sample-index sequences that make a system's
//! time dependency explicit.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::random_vector;
use crate::schedules::{sampler, SamplingScheme};

/// In-memory `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<DVector<f64>>,
    pub ys: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(xs: Vec<DVector<f64>>, ys: Vec<DVector<f64>>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::contract(format!("{} inputs but {} targets", xs.len(), ys.len())));
        }
        if xs.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        let (dx, dy) = (xs[0].len(), ys[0].len());
        if xs.iter().any(|x| x.len() != dx) || ys.iter().any(|y| y.len() != dy) {
            return Err(Error::contract("ragged dataset rows"));
        }
        if xs.iter().chain(ys.iter()).any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(Error::contract("non-finite dataset entry"));
        }
        Ok(Dataset { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.xs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.ys[0].len()
    }

    /// Reads a CSV with one row per sample. Columns whose header starts with
    /// `x` are inputs, columns starting with `y` are targets, in file order.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        let x_cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.trim().starts_with('x')).map(|(i, _)| i).collect();
        let y_cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.trim().starts_with('y')).map(|(i, _)| i).collect();
        if x_cols.is_empty() || y_cols.is_empty() {
            return Err(Error::config(format!(
                "{}: dataset needs at least one x… and one y… column",
                path.display()
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let parse = |cols: &[usize]| -> Result<DVector<f64>> {
                let vals = cols
                    .iter()
                    .map(|&c| {
                        record.get(c).unwrap_or("").trim().parse::<f64>().map_err(|e| {
                            Error::config(format!("{}: row {}, column {}: {e}", path.display(), row + 1, c + 1))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(DVector::from_vec(vals))
            };
            xs.push(parse(&x_cols)?);
            ys.push(parse(&y_cols)?);
        }
        Dataset::new(xs, ys)
    }

    /// Noisy linear teacher `y = W x + noise·u`, `x, u` uniform in `[-1, 1]`.
    pub fn synthetic_linear<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        input_dim: usize,
        output_dim: usize,
        input_scale: f64,
        noise: f64,
    ) -> Result<Self> {
        let w = crate::linalg::random_matrix(rng, output_dim, input_dim, 1.0);
        let xs: Vec<DVector<f64>> = (0..n).map(|_| random_vector(rng, input_dim, input_scale)).collect();
        let ys = xs.iter().map(|x| &w * x + random_vector(rng, output_dim, noise)).collect();
        Dataset::new(xs, ys)
    }
}

/// Which sample is presented at each time step.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOrder {
    /// `i_t = (t − 1) mod n`.
    Cycling(usize),
    /// A materialised index sequence; times past its end wrap around.
    Fixed(Arc<[usize]>),
}

impl SampleOrder {
    /// Materialises `len` indices from a sampler (cycling stays symbolic).
    pub fn from_scheme<R: Rng>(scheme: SamplingScheme, n: usize, len: usize, rng: R) -> Result<Self> {
        if scheme == SamplingScheme::Cycling {
            if n == 0 {
                return Err(Error::contract("sampler over an empty dataset"));
            }
            return Ok(SampleOrder::Cycling(n));
        }
        let idx: Vec<usize> = sampler(scheme, n, rng)?.take(len.max(1)).collect();
        Ok(SampleOrder::Fixed(idx.into()))
    }

    /// Sample index used at time `t ≥ 1`.
    pub fn index(&self, t: usize) -> usize {
        let k = t.saturating_sub(1);
        match self {
            SampleOrder::Cycling(n) => k % n,
            SampleOrder::Fixed(seq) => seq[k % seq.len()],
        }
    }
}

/// A dataset read through a sample order.
#[derive(Debug, Clone)]
pub struct DataStream {
    pub dataset: Arc<Dataset>,
    pub order: SampleOrder,
}

impl DataStream {
    pub fn new(dataset: Arc<Dataset>, order: SampleOrder) -> Result<Self> {
        if let SampleOrder::Fixed(seq) = &order {
            if seq.iter().any(|&i| i >= dataset.len()) {
                return Err(Error::contract("sample order indexes past the dataset"));
            }
        }
        if let SampleOrder::Cycling(n) = order {
            if n != dataset.len() {
                return Err(Error::contract(format!("cycling over {n} samples of a {}-sample dataset", dataset.len())));
            }
        }
        Ok(DataStream { dataset, order })
    }

    pub fn cycling(dataset: Arc<Dataset>) -> Self {
        let n = dataset.len();
        DataStream { dataset, order: SampleOrder::Cycling(n) }
    }

    pub fn x(&self, t: usize) -> &DVector<f64> {
        &self.dataset.xs[self.order.index(t)]
    }

    pub fn y(&self, t: usize) -> &DVector<f64> {
        &self.dataset.ys[self.order.index(t)]
    }
}
