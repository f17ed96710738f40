//! Small dense linear-algebra helpers shared by the algorithm modules.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Any entry with magnitude above this aborts a run as a divergence.
pub const OVERFLOW_THRESHOLD: f64 = 1e12;

/// Finite-difference step used by every Jacobian check in the crate.
pub const FD_STEP: f64 = 1e-6;

/// Fails with `NumericOverflow` if any value is non-finite or above the
/// overflow threshold.
pub fn guard(stage: &'static str, t: usize, values: &[f64]) -> Result<()> {
    if values
        .iter()
        .all(|v| v.is_finite() && v.abs() <= OVERFLOW_THRESHOLD)
    {
        Ok(())
    } else {
        Err(Error::NumericOverflow { stage, t })
    }
}

/// Largest singular value; zero for empty matrices.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.singular_values().max()
}

/// Eigenvalues of a real square matrix via the real Schur form.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if m.nrows() != m.ncols() {
        return Err(Error::contract(format!(
            "eigenvalues of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    // Repeated eigenvalues can stall the iteration at machine epsilon.
    [f64::EPSILON, 1e-14, 1e-12]
        .iter()
        .find_map(|&eps| Schur::try_new(m.clone(), eps, 10_000))
        .map(|schur| schur.complex_eigenvalues().iter().copied().collect())
        .ok_or_else(|| Error::Eigen(format!("Schur iteration did not converge ({}x{})", m.nrows(), m.ncols())))
}

/// Matches two eigenvalue multisets greedily by nearest distance and returns
/// the largest matched distance. Infinite if sizes differ.
pub fn spectrum_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for x in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, y)| (j, (x - y).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Max-entry relative error of `approx` against `reference`, with the scale
/// floored at one so that near-zero references are compared absolutely.
pub fn rel_error(approx: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    assert_eq!(approx.shape(), reference.shape());
    let scale = reference.amax().max(1.0);
    (approx - reference).amax() / scale
}

pub fn rel_error_vec(approx: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    assert_eq!(approx.len(), reference.len());
    let scale = reference.amax().max(1.0);
    (approx - reference).amax() / scale
}

/// Central finite-difference Jacobian of a vector map.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut cols = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        cols.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    let rows = cols.first().map_or_else(|| f(x).len(), |c| c.len());
    DMatrix::from_fn(rows, x.len(), |i, k| cols[k][i])
}

/// Central finite-difference gradient of a scalar map.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    DVector::from_fn(x.len(), |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

pub fn outer(u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    u * v.transpose()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matrix with i.i.d. entries uniform in `[-scale, scale]`.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

pub fn random_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..=scale))
}

/// Random symmetric positive definite matrix `G Gᵀ + shift·I`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, shift: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, 1.0);
    &g * g.transpose() + DMatrix::identity(n, n) * shift
}

/// Random matrix whose symmetric part is positive definite: `S + K` with
/// `S` SPD and `K` skew-symmetric.
pub fn random_positive_real<R: Rng + ?Sized>(rng: &mut R, n: usize, shift: f64) -> DMatrix<f64> {
    let s = random_spd(rng, n, shift);
    let k = random_matrix(rng, n, n, 1.0);
    s + (&k - k.transpose())
}

/// Horizontal concatenation `[a b]`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}
