//! Matrix-free conjugate gradient for `(K + αI) x = b` with `K` symmetric
//! positive definite and available only through its product with a vector.

use thiserror::Error;

use crate::engine::{Binding, EngineError};
use crate::formula::{Category, Formula, FormulaError};
use crate::lazy::{LazyError, LazyTensor};
use crate::reduction::{Axis, ReductionKind, ReductionSpec};
use crate::scalar::Scalar;

type MatVec<'f, T> = dyn FnMut(&[T], &mut [T]) -> Result<(), SolverError> + 'f;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("right-hand side has {got} entries, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error("pᵀAp = {curvature} at iteration {iteration}: the operator is not positive definite")]
    Breakdown { iteration: usize, curvature: f64 },
    #[error("residual became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("kernel must be scalar-valued over a square set of points: {0}")]
    NotAKernel(String),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Lazy(#[from] LazyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveConfig {
    /// Ridge added to the diagonal.
    pub alpha: f64,
    /// Target of `‖(K + αI)x − b‖ / ‖b‖`.
    pub tol: f64,
    /// Iteration cap; the system size when `None`.
    pub maxiter: Option<usize>,
    pub record_history: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            tol: 1e-6,
            maxiter: None,
            record_history: false,
        }
    }
}

impl SolveConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(SolverError::InvalidConfig(format!("tol = {}", self.tol)));
        }
        if self.maxiter == Some(0) {
            return Err(SolverError::InvalidConfig("maxiter = 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    /// Relative residual of `x`, recomputed with a fresh product.
    pub residual: f64,
    pub converged: bool,
    /// Relative residual after each iteration, if requested.
    pub history: Vec<f64>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

/// Solves `(A + αI) x = b` by conjugate gradient from `x = 0`.
///
/// `matvec(v, out)` writes `A v` into `out`. It must be linear and
/// symmetric positive definite on the vectors it is given; a non-positive
/// curvature `pᵀ(A + αI)p` is reported as [`SolverError::Breakdown`].
///
/// Reaching `maxiter` is not an error: the result has `converged = false`.
pub fn cg_solve<T: Scalar>(
    mut matvec: impl FnMut(&[T], &mut [T]) -> Result<(), SolverError>,
    b: &[T],
    cfg: &SolveConfig,
) -> Result<Solution<T>, SolverError> {
    cfg.validate()?;
    let n = b.len();
    let maxiter = cfg.maxiter.unwrap_or(n).max(1);
    let alpha = T::from_f64(cfg.alpha);
    let bnorm = dot(b, b).sqrt();
    if !bnorm.is_finite() {
        return Err(SolverError::NonFinite(0));
    }
    let mut x = vec![T::zero(); n];
    let mut history = Vec::new();
    if bnorm == 0.0 {
        return Ok(Solution {
            x,
            iterations: 0,
            residual: 0.0,
            converged: true,
            history,
        });
    }
    let mut apply = |v: &[T], out: &mut [T]| -> Result<(), SolverError> {
        matvec(v, out)?;
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = *o + alpha * vi;
        }
        Ok(())
    };
    let true_residual = |apply: &mut MatVec<'_, T>,
                         x: &[T],
                         r: &mut [T]|
     -> Result<f64, SolverError> {
        apply(x, r)?;
        for (ri, &bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        Ok(dot(r, r).sqrt() / bnorm)
    };

    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![T::zero(); n];
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    let mut residual = 1.0;
    while iterations < maxiter {
        apply(&p, &mut ap)?;
        let curvature = dot(&p, &ap);
        if !curvature.is_finite() {
            return Err(SolverError::NonFinite(iterations));
        }
        if curvature <= 0.0 {
            return Err(SolverError::Breakdown {
                iteration: iterations,
                curvature,
            });
        }
        let step = T::from_f64(rs / curvature);
        for k in 0..n {
            x[k] = x[k] + step * p[k];
            r[k] = r[k] - step * ap[k];
        }
        iterations += 1;
        let mut rs_new = dot(&r, &r);
        residual = rs_new.sqrt() / bnorm;
        if !residual.is_finite() {
            return Err(SolverError::NonFinite(iterations));
        }
        if residual <= cfg.tol {
            // The recurrence drifts from the true residual; only stop once
            // the latter agrees, restarting the directions otherwise.
            residual = true_residual(&mut apply, &x, &mut r)?;
            if residual <= cfg.tol {
                if cfg.record_history {
                    history.push(residual);
                }
                break;
            }
            rs_new = dot(&r, &r);
            p.copy_from_slice(&r);
            rs = rs_new;
            if cfg.record_history {
                history.push(residual);
            }
            continue;
        }
        if cfg.record_history {
            history.push(residual);
        }
        let beta = T::from_f64(rs_new / rs);
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rs = rs_new;
    }
    if residual > cfg.tol {
        residual = true_residual(&mut apply, &x, &mut r)?;
    }
    if !residual.is_finite() {
        return Err(SolverError::NonFinite(iterations));
    }
    Ok(Solution {
        x,
        iterations,
        residual,
        converged: residual <= cfg.tol,
        history,
    })
}

/// Solves each of the `cols` right-hand sides of the row-major `n × cols`
/// array `b` independently.
pub fn cg_solve_columns<T: Scalar>(
    mut matvec: impl FnMut(&[T], &mut [T]) -> Result<(), SolverError>,
    b: &[T],
    cols: usize,
    cfg: &SolveConfig,
) -> Result<Vec<Solution<T>>, SolverError> {
    if cols == 0 || !b.len().is_multiple_of(cols) {
        return Err(SolverError::Shape {
            expected: b.len().next_multiple_of(cols.max(1)),
            got: b.len(),
        });
    }
    (0..cols)
        .map(|c| {
            let column: Vec<T> = b.iter().skip(c).step_by(cols).copied().collect();
            cg_solve(&mut matvec, &column, cfg)
        })
        .collect()
}

/// Solves `(K + αI) x = b` where `K_ij` is the scalar formula `kernel` over
/// one set of points, bound both as `i` and as `j` variables.
///
/// Each product `K v` is a Sum reduction over `j` of `kernel · v_j`.
/// `kernel` must be symmetric in `(i, j)`; the points wrapped as `x_i` and
/// `x_j` should be the same array.
pub fn kernel_solve<T: Scalar>(
    kernel: &LazyTensor<'_, T>,
    b: &[T],
    cfg: &SolveConfig,
) -> Result<Solution<T>, SolverError> {
    if kernel.dim() != 1 {
        return Err(SolverError::NotAKernel(format!("output dimension {}", kernel.dim())));
    }
    if !kernel.batch_shape().is_empty() {
        return Err(SolverError::NotAKernel("batched kernel".into()));
    }
    let shape = kernel.shape();
    let (m, n) = (shape[0], shape[1]);
    if m != n {
        return Err(SolverError::NotAKernel(format!("{m} × {n} matrix")));
    }
    if b.len() != n {
        return Err(SolverError::Shape {
            expected: n,
            got: b.len(),
        });
    }
    let session = kernel.session();
    let slot = session.slot(Category::J);
    let formula = kernel.formula().mult(&Formula::vj(slot, 1)?)?;
    let spec = ReductionSpec::new(ReductionKind::Sum, Axis::OverJ);
    let base = kernel.request(spec, None);
    let matvec = |v: &[T], out: &mut [T]| -> Result<(), SolverError> {
        let mut req = base.clone();
        req.formula = formula.clone();
        req.rows_i = Some(n);
        req.rows_j = Some(n);
        req.bindings.push(Binding::new(Category::J, slot, v));
        let res = session.engine().evaluate(&req)?;
        out.copy_from_slice(&res.values);
        Ok(())
    };
    cg_solve(matvec, b, cfg)
}
