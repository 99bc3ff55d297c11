//! Numerical laboratory for variable-exponent double obstacle problems with
//! measure data: grids, fluxes, measures, maximal functions, a projected
//! Gauss-Seidel solver, the comparison chain and the estimate harness.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod field;
pub mod exponent;
pub mod measure;
pub mod maximal;
pub mod solver;
pub mod harness;
pub mod chain;
pub mod config;
pub mod report;
pub mod run;
pub mod selftest;

pub use error::{LabError, Result};
