//! Generic reductions of symbolic pairwise formulas,
//! `a_i = Reduction_j F(p, x_i, y_j)`, evaluated tile by tile so that memory
//! stays linear in the number of points.
//!
//! The crate is layered:
//!
//! * [`formula`] builds dimension-checked expression trees and evaluates one
//!   `(i, j)` pair; [`parser`] reads and prints them as text.
//! * [`autodiff`] differentiates formulas and reductions symbolically.
//! * [`reduction`] holds the streaming accumulators.
//! * [`engine`] runs a reduction over bound arrays with a tiled interpreter,
//!   and hosts the dense reference implementation.
//! * [`lazy`] is the array-wrapping front end, and [`solver`] a matrix-free
//!   conjugate gradient for kernel systems.

pub mod autodiff;
pub mod engine;
pub mod formula;
pub mod lazy;
pub mod parser;
pub mod reduction;
pub mod scalar;
pub mod solver;

pub use engine::{Binding, DenseOracle, Engine, EvalOutput, EvalRequest, EvalStats, RangeSpec};
pub use formula::{Category, Formula, FormulaError, Op, VarSpec};
pub use parser::{format_formula, format_reduction, parse_formula, parse_reduction, ParseError};
pub use reduction::{AccState, Axis, ReductionKind, ReductionSpec};
pub use scalar::Scalar;
