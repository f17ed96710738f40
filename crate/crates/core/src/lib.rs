//! Online learning algorithms for parameterized dynamical systems.
//!
//! The crate implements real-time recurrent learning (exact, extended and
//! imperfect), the rank-one approximations NoBackTrack and UORO, truncated
//! backpropagation through time with growing truncation intervals, and
//! adaptive preconditioned updates (RMSProp, online natural gradient, Adam
//! without bias correction). Alongside the algorithms sit executable
//! checkers for the hypotheses of local convergence: spectral radius of
//! operator sequences at a horizon, positive-stability of the averaged
//! extended Hessian with its Lyapunov matrix, error gauges for imperfect
//! Jacobians, and step-size exponent constraints.
//!
//! The `harness` module binds everything into seeded, reproducible
//! experiments that write CSV output.

pub mod approx;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod rtrl;
pub mod schedules;
pub mod tbptt;
pub mod updates;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
