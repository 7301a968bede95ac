//! Array-wrapping front end.
//!
//! Wrapping an array only records it: its shape decides whether it becomes
//! an `i` variable, a `j` variable or a parameter, and the next free slot of
//! that category is taken. Operations compose formulas. A reduction method
//! is the single place where the engine runs.
//!
//! ```
//! use genred::lazy::Session;
//! use genred::Axis;
//!
//! let s = Session::new();
//! let x = [0.0, 0.0, 1.0, 0.0];
//! let y = [0.0, 0.0, 0.0, 1.0, 2.0, 2.0];
//! let b = [1.0, 1.0, 1.0];
//! let x_i = s.wrap(&x, &[2, 1, 2]).unwrap();
//! let y_j = s.wrap(&y, &[1, 3, 2]).unwrap();
//! let b_j = s.wrap(&b, &[1, 3, 1]).unwrap();
//! let k = x_i.sqdist(&y_j).unwrap().neg().exp();
//! let out = k.mul(&b_j).unwrap().sum(Axis::OverJ).unwrap();
//! assert_eq!(out.shape, vec![2, 1]);
//! ```
//!
//! Arrays are borrowed, not copied: a handle lives no longer than the data
//! it was built from.

use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

use crate::engine::{Binding, Engine, EngineError, EvalOutput, EvalRequest, RangeSpec};
use crate::formula::{Category, Formula, FormulaError, Op, VarSpec};
use crate::reduction::{Axis, ReductionKind, ReductionSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LazyError {
    #[error("shape {0:?} is ambiguous: use as_i, as_j or as_param to choose a role")]
    AmbiguousShape(Vec<usize>),
    #[error("shape {shape:?}: {reason}")]
    BadShape { shape: Vec<usize>, reason: String },
    #[error("shape {shape:?} needs {expected} elements, the array has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op} of shapes {left:?} and {right:?}: {reason}")]
    Mismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
        reason: String,
    },
    #[error("handles come from different sessions")]
    ForeignSession,
    #[error("gradients are taken with respect to a wrapped array, not {0}")]
    NotAVariable(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Slot allocator and engine shared by the handles it creates.
#[derive(Debug, Default)]
pub struct Session {
    engine: Engine,
    next: [AtomicUsize; 3],
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_engine(engine: Engine) -> Self {
        Self {
            engine,
            next: Default::default(),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub(crate) fn slot(&self, cat: Category) -> usize {
        let k = match cat {
            Category::I => 0,
            Category::J => 1,
            Category::P => 2,
        };
        self.next[k].fetch_add(1, Ordering::Relaxed)
    }

    /// Wraps `data`, laid out row-major with `shape`, inferring its role:
    ///
    /// * `(..., M, 1, D)` is an `i` variable,
    /// * `(..., 1, N, D)` is a `j` variable,
    /// * `(D,)` is a parameter.
    ///
    /// Leading dimensions are batch dimensions. `(..., 1, 1, D)` fits both
    /// variable roles and is rejected.
    pub fn wrap<'a, T: Scalar>(&'a self, data: &'a [T], shape: &[usize]) -> Result<LazyTensor<'a, T>, LazyError> {
        let bad = |reason: &str| LazyError::BadShape {
            shape: shape.to_vec(),
            reason: reason.into(),
        };
        match *shape {
            [d] => self.as_param(data, d),
            [] | [_, _] => Err(bad("expected (D,), (..., M, 1, D) or (..., 1, N, D)")),
            [.., m, n, d] => {
                let batch = &shape[..shape.len() - 3];
                match (m, n) {
                    (1, 1) => Err(LazyError::AmbiguousShape(shape.to_vec())),
                    (_, 1) => self.variable(Category::I, data, batch, m, d, shape),
                    (1, _) => self.variable(Category::J, data, batch, n, d, shape),
                    _ => Err(bad("one of the two point axes must have size 1")),
                }
            }
        }
    }

    /// Wraps `data` as an `i` variable of `rows × dim` per batch entry.
    pub fn as_i<'a, T: Scalar>(
        &'a self,
        data: &'a [T],
        batch: &[usize],
        rows: usize,
        dim: usize,
    ) -> Result<LazyTensor<'a, T>, LazyError> {
        let shape: Vec<usize> = batch.iter().copied().chain([rows, 1, dim]).collect();
        self.variable(Category::I, data, batch, rows, dim, &shape)
    }

    /// Wraps `data` as a `j` variable of `rows × dim` per batch entry.
    pub fn as_j<'a, T: Scalar>(
        &'a self,
        data: &'a [T],
        batch: &[usize],
        rows: usize,
        dim: usize,
    ) -> Result<LazyTensor<'a, T>, LazyError> {
        let shape: Vec<usize> = batch.iter().copied().chain([1, rows, dim]).collect();
        self.variable(Category::J, data, batch, rows, dim, &shape)
    }

    pub fn as_param<'a, T: Scalar>(&'a self, data: &'a [T], dim: usize) -> Result<LazyTensor<'a, T>, LazyError> {
        self.variable(Category::P, data, &[], 1, dim, &[dim])
    }

    fn variable<'a, T: Scalar>(
        &'a self,
        cat: Category,
        data: &'a [T],
        batch: &[usize],
        rows: usize,
        dim: usize,
        shape: &[usize],
    ) -> Result<LazyTensor<'a, T>, LazyError> {
        if dim == 0 || rows == 0 || batch.contains(&0) {
            return Err(LazyError::BadShape {
                shape: shape.to_vec(),
                reason: "sizes must be positive".into(),
            });
        }
        let expected = batch.iter().product::<usize>() * rows * dim;
        if data.len() != expected {
            return Err(LazyError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        let slot = self.slot(cat);
        let v = VarSpec::new(cat, slot, dim)?;
        let mut rows_ij = [None, None];
        match cat {
            Category::I => rows_ij[0] = Some(rows),
            Category::J => rows_ij[1] = Some(rows),
            Category::P => {}
        }
        Ok(LazyTensor {
            session: self,
            formula: Formula::from_var(v),
            bindings: vec![Binding::batched(cat, slot, data, batch)],
            batch: batch.to_vec(),
            rows: rows_ij,
        })
    }
}

/// A symbolic formula together with the arrays its variables refer to.
#[derive(Clone, Debug)]
pub struct LazyTensor<'a, T> {
    session: &'a Session,
    formula: Formula,
    bindings: Vec<Binding<'a, T>>,
    batch: Vec<usize>,
    rows: [Option<usize>; 2],
}

impl<'a, T: Scalar> LazyTensor<'a, T> {
    pub fn session(&self) -> &'a Session {
        self.session
    }

    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    pub fn dim(&self) -> usize {
        self.formula.dim()
    }

    pub fn batch_shape(&self) -> &[usize] {
        &self.batch
    }

    /// `(batch..., M or 1, N or 1, dim)`.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.rows[0].unwrap_or(1), self.rows[1].unwrap_or(1), self.dim()]);
        s
    }

    fn unary(&self, f: Formula) -> LazyTensor<'a, T> {
        LazyTensor {
            formula: f,
            ..self.clone()
        }
    }

    fn combine(
        &self,
        op: &'static str,
        rhs: &LazyTensor<'a, T>,
        build: impl FnOnce(&Formula, &Formula) -> Result<Formula, FormulaError>,
    ) -> Result<LazyTensor<'a, T>, LazyError> {
        if !std::ptr::eq(self.session, rhs.session) {
            return Err(LazyError::ForeignSession);
        }
        let mismatch = |reason: String| LazyError::Mismatch {
            op,
            left: self.shape(),
            right: rhs.shape(),
            reason,
        };
        let batch = broadcast(&self.batch, &rhs.batch)
            .ok_or_else(|| mismatch("batch dimensions do not broadcast".into()))?;
        let mut rows = self.rows;
        for (k, (r, o)) in rows.iter_mut().zip(rhs.rows).enumerate() {
            match (*r, o) {
                (Some(a), Some(b)) if a != b => {
                    let which = if k == 0 { "M" } else { "N" };
                    return Err(mismatch(format!("{which} = {a} against {which} = {b}")));
                }
                (None, b) => *r = b,
                _ => {}
            }
        }
        let formula = build(&self.formula, &rhs.formula).map_err(|e| mismatch(e.to_string()))?;
        let mut bindings = self.bindings.clone();
        for b in &rhs.bindings {
            if !bindings.iter().any(|a| a.category == b.category && a.slot == b.slot) {
                bindings.push(b.clone());
            }
        }
        Ok(LazyTensor {
            session: self.session,
            formula,
            bindings,
            batch,
            rows,
        })
    }

    pub fn add(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Add", rhs, Formula::add)
    }

    pub fn sub(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Sub", rhs, Formula::sub)
    }

    /// Elementwise product; a dim-1 operand is broadcast.
    pub fn mul(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Mult", rhs, Formula::mult)
    }

    pub fn div(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Divide", rhs, Formula::divide)
    }

    /// `self` (dim 1) times the vector `rhs`.
    pub fn scal(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Scal", rhs, Formula::scal)
    }

    pub fn dot(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Dot", rhs, Formula::dot)
    }

    pub fn sqdist(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("SqDist", rhs, Formula::sqdist)
    }

    pub fn concat(&self, rhs: &LazyTensor<'a, T>) -> Result<LazyTensor<'a, T>, LazyError> {
        self.combine("Concat", rhs, |a, b| Formula::concat(&[a.clone(), b.clone()]))
    }

    /// Multiplies by a constant.
    pub fn mul_scalar(&self, c: f64) -> LazyTensor<'a, T> {
        let f = Formula::scalar(c).scal(&self.formula).expect("dim-1 scale");
        self.unary(f)
    }

    /// Adds a constant to every coordinate.
    pub fn add_scalar(&self, c: f64) -> LazyTensor<'a, T> {
        let f = self.formula.add(&Formula::scalar(c)).expect("dim-1 broadcast");
        self.unary(f)
    }

    pub fn neg(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.neg())
    }

    pub fn exp(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.exp())
    }

    pub fn log(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.log())
    }

    pub fn sqrt(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.sqrt())
    }

    pub fn abs(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.abs())
    }

    pub fn sign(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.sign())
    }

    pub fn powi(&self, n: i32) -> LazyTensor<'a, T> {
        self.unary(self.formula.powi(n))
    }

    pub fn sqnorm2(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.sqnorm2())
    }

    /// Sum over the coordinates of each `(i, j)` value.
    pub fn sum_coords(&self) -> LazyTensor<'a, T> {
        self.unary(self.formula.sum())
    }

    pub fn extract(&self, start: usize, len: usize) -> Result<LazyTensor<'a, T>, LazyError> {
        Ok(self.unary(self.formula.extract(start, len)?))
    }

    pub(crate) fn request(&self, spec: ReductionSpec, ranges: Option<RangeSpec>) -> EvalRequest<'a, T> {
        let mut req = EvalRequest::new(self.formula.clone(), spec).with_batch(&self.batch);
        req.bindings = self.bindings.clone();
        req.ranges = ranges;
        req.rows_i = self.rows[0];
        req.rows_j = self.rows[1];
        req
    }

    /// Runs `spec` on the engine. `ranges` restricts the admitted pairs.
    pub fn reduce(&self, spec: ReductionSpec, ranges: Option<RangeSpec>) -> Result<EvalOutput<T>, LazyError> {
        Ok(self.session.engine.evaluate(&self.request(spec, ranges))?)
    }

    /// Sum over the index named by `axis`: `Axis::OverJ` leaves one value
    /// per `i`, `Axis::OverI` one per `j`.
    pub fn sum(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::Sum, axis), None)
    }

    pub fn logsumexp(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::LogSumExp, axis), None)
    }

    pub fn max(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::Max, axis), None)
    }

    pub fn min(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::Min, axis), None)
    }

    pub fn argmax(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::ArgMax, axis), None)
    }

    pub fn argmin(&self, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::new(ReductionKind::ArgMin, axis), None)
    }

    /// The `k` smallest values and their indices, in increasing order.
    pub fn argkmin(&self, k: usize, axis: Axis) -> Result<EvalOutput<T>, LazyError> {
        self.reduce(ReductionSpec::arg_k_min(axis, k), None)
    }

    /// Gradient of `⟨cotangent, reduce(spec)⟩` with respect to the array
    /// wrapped as `wrt`, shaped like that array.
    pub fn vjp(
        &self,
        spec: ReductionSpec,
        ranges: Option<RangeSpec>,
        wrt: &LazyTensor<'a, T>,
        cotangent: &[T],
    ) -> Result<Vec<T>, LazyError> {
        if !std::ptr::eq(self.session, wrt.session) {
            return Err(LazyError::ForeignSession);
        }
        let Op::Var(v) = wrt.formula.op() else {
            return Err(LazyError::NotAVariable(wrt.formula.to_string()));
        };
        let req = self.request(spec, ranges);
        Ok(self
            .session
            .engine
            .evaluate_vjp(&req, (v.category, v.slot), cotangent)?)
    }
}

/// Right-aligned broadcast of two batch shapes.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let at = |s: &[usize], k: usize| if k + s.len() >= n { s[k + s.len() - n] } else { 1 };
    (0..n)
        .map(|k| match (at(a, k), at(b, k)) {
            (x, y) if x == y || y == 1 => Some(x),
            (1, y) => Some(y),
            _ => None,
        })
        .collect()
}
