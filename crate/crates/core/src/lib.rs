//! Hamiltonian Boundary Value Methods HBVM(k,s): implicit Runge–Kutta methods on the
//! shifted Legendre basis which conserve polynomial Hamiltonians exactly and general
//! ones to round-off, plus comparator integrators and diagnostics.

pub mod diagnostics;
pub mod error;
pub mod gradientmethods;
pub mod integrator;
pub mod numfmt;
pub mod polybasis;
pub mod problems;
pub mod tableau;

pub use error::{Error, Result};
