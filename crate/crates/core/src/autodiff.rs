//! Symbolic reverse-mode differentiation.
//!
//! [`grad`] turns a formula `F`, a variable `v` and a cotangent variable `g`
//! into a new formula computing `(∂F/∂v)ᵀ g` at a single `(i, j)` pair. The
//! result is an ordinary [`Formula`], so it can be printed, evaluated by the
//! engine, or differentiated again.
//!
//! [`grad_reduction`] lifts this to whole reductions: it decides which index
//! the gradient is reduced over and how the cotangent array is bound.

use thiserror::Error;

use crate::formula::{Category, Formula, FormulaError, Op, VarSpec};
use crate::reduction::{Axis, ReductionKind, ReductionSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("variable {0} does not occur in the formula")]
    VariableNotPresent(VarSpec),
    #[error("{} reductions are not differentiable", .0.name())]
    NonDifferentiableReduction(ReductionKind),
    #[error("cotangent variable {0} collides with a variable of the formula")]
    GradinConflict(VarSpec),
    #[error("cotangent has dimension {got}, the formula has dimension {expected}")]
    GradinDim { expected: usize, got: usize },
    #[error(transparent)]
    Formula(#[from] FormulaError),
}

/// Vector-Jacobian product of `formula` with respect to `wrt`, contracted
/// with the cotangent variable `gradin`. The result has dimension `wrt.dim`.
pub fn grad(formula: &Formula, wrt: VarSpec, gradin: VarSpec) -> Result<Formula, GradError> {
    if gradin.dim != formula.dim() {
        return Err(GradError::GradinDim {
            expected: formula.dim(),
            got: gradin.dim,
        });
    }
    if formula.find_var(gradin.category, gradin.slot).is_some() {
        return Err(GradError::GradinConflict(gradin));
    }
    grad_with(formula, wrt, &Formula::from_var(gradin))
}

/// Like [`grad`], with an arbitrary cotangent formula of dimension
/// `formula.dim()`.
pub fn grad_with(formula: &Formula, wrt: VarSpec, cotangent: &Formula) -> Result<Formula, GradError> {
    if formula.find_var(wrt.category, wrt.slot) != Some(wrt) {
        return Err(GradError::VariableNotPresent(wrt));
    }
    debug_assert_eq!(cotangent.dim(), formula.dim());
    match vjp(formula, wrt, cotangent)? {
        Some(g) => Ok(g),
        None => Ok(Formula::constant(vec![0.0; wrt.dim])?),
    }
}

fn scalar(v: f64) -> Formula {
    Formula::scalar(v)
}

/// Sums `g` down to dimension 1 when it was broadcast from a dim-1 operand.
fn unbroadcast(g: Formula, child_dim: usize) -> Formula {
    if child_dim == 1 && g.dim() > 1 {
        g.sum()
    } else {
        g
    }
}

fn add_opt(acc: Option<Formula>, term: Option<Formula>) -> Result<Option<Formula>, FormulaError> {
    Ok(match (acc, term) {
        (Some(a), Some(t)) => Some(a.add(&t)?),
        (a, None) => a,
        (None, t) => t,
    })
}

/// Backpropagates cotangent `g` (dimension `f.dim()`) through `f`; `None`
/// means `f` does not depend on `wrt`.
fn vjp(f: &Formula, wrt: VarSpec, g: &Formula) -> Result<Option<Formula>, FormulaError> {
    if f.find_var(wrt.category, wrt.slot).is_none() {
        return Ok(None);
    }
    let c = f.children();
    let child = |k: usize, gk: Formula| vjp(&c[k], wrt, &gk);
    let both = |ga: Formula, gb: Formula| -> Result<Option<Formula>, FormulaError> {
        let a = child(0, ga)?;
        let b = child(1, gb)?;
        add_opt(a, b)
    };
    match f.op() {
        Op::Var(v) => Ok((v.key() == wrt.key()).then(|| g.clone())),
        Op::Constant(_) => Ok(None),
        Op::Add => both(unbroadcast(g.clone(), c[0].dim()), unbroadcast(g.clone(), c[1].dim())),
        Op::Sub => both(
            unbroadcast(g.clone(), c[0].dim()),
            unbroadcast(g.neg(), c[1].dim()),
        ),
        Op::Mult => both(
            unbroadcast(g.mult(&c[1])?, c[0].dim()),
            unbroadcast(g.mult(&c[0])?, c[1].dim()),
        ),
        Op::Divide => {
            let ga = unbroadcast(g.divide(&c[1])?, c[0].dim());
            let gb = unbroadcast(g.mult(f)?.divide(&c[1])?.neg(), c[1].dim());
            both(ga, gb)
        }
        Op::Scal => both(g.dot(&c[1])?, c[0].scal(g)?),
        Op::Dot => both(g.scal(&c[1])?, g.scal(&c[0])?),
        Op::SqNorm2 => child(0, scalar(2.0).scal(g)?.scal(&c[0])?),
        Op::SqDist => {
            let two_g = scalar(2.0).scal(g)?;
            both(two_g.scal(&c[0].sub(&c[1])?)?, two_g.scal(&c[1].sub(&c[0])?)?)
        }
        Op::Exp => child(0, f.mult(g)?),
        Op::Log => child(0, g.divide(&c[0])?),
        Op::Sqrt => child(0, g.divide(&scalar(2.0).scal(f)?)?),
        Op::Abs => child(0, c[0].sign().mult(g)?),
        Op::Sign => Ok(None),
        Op::Powi(0) => Ok(None),
        Op::Powi(n) => {
            let n = *n;
            child(0, scalar(n as f64).scal(&c[0].powi(n - 1))?.mult(g)?)
        }
        Op::Neg => child(0, g.neg()),
        Op::Sum => {
            let dim = c[0].dim();
            if dim == 1 {
                child(0, g.clone())
            } else {
                child(0, g.scal(&Formula::constant(vec![1.0; dim])?)?)
            }
        }
        Op::Concat => {
            let mut acc = None;
            let mut offset = 0;
            for part in c {
                let gk = if part.dim() == g.dim() {
                    g.clone()
                } else {
                    g.extract(offset, part.dim())?
                };
                acc = add_opt(acc, vjp(part, wrt, &gk)?)?;
                offset += part.dim();
            }
            Ok(acc)
        }
        Op::Extract { start, len } => {
            let total = c[0].dim();
            let mut parts = Vec::with_capacity(3);
            if *start > 0 {
                parts.push(Formula::constant(vec![0.0; *start])?);
            }
            parts.push(g.clone());
            let tail = total - start - len;
            if tail > 0 {
                parts.push(Formula::constant(vec![0.0; tail])?);
            }
            let padded = if parts.len() == 1 {
                parts.pop().expect("one part")
            } else {
                Formula::concat(&parts)?
            };
            child(0, padded)
        }
    }
}

/// A reduction whose evaluation yields the gradient of another reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReduction {
    /// Always a `Sum`, over the index the gradient does not depend on.
    pub reduction: ReductionSpec,
    pub formula: Formula,
    /// Variable the cotangent array is bound to. It is indexed like the
    /// primal output.
    pub gradin: VarSpec,
    /// For LogSumExp: per-output-row `(m, s)` normalizers of the forward pass,
    /// to be bound as variables indexed like the primal output.
    pub lse_aux: Option<(VarSpec, VarSpec)>,
    /// The gradient is with respect to a parameter: the reduction output must
    /// be summed over its rows.
    pub sum_rows: bool,
}

fn next_slot(f: &Formula, category: Category) -> usize {
    f.collect_vars()
        .iter()
        .filter(|v| v.category == category)
        .map(|v| v.slot + 1)
        .max()
        .unwrap_or(0)
}

/// Transposes the reduction `red` over `formula` into the reduction computing
/// its vector-Jacobian product with respect to the array bound to `wrt`.
pub fn grad_reduction(
    red: &ReductionSpec,
    formula: &Formula,
    wrt: VarSpec,
    gradin_dim: usize,
) -> Result<GradReduction, GradError> {
    if !red.kind.is_differentiable() {
        return Err(GradError::NonDifferentiableReduction(red.kind));
    }
    if formula.find_var(wrt.category, wrt.slot) != Some(wrt) {
        return Err(GradError::VariableNotPresent(wrt));
    }
    if gradin_dim != formula.dim() {
        return Err(GradError::GradinDim {
            expected: formula.dim(),
            got: gradin_dim,
        });
    }
    let (out_cat, reduced_cat) = match red.axis {
        Axis::OverJ => (Category::I, Category::J),
        Axis::OverI => (Category::J, Category::I),
    };
    let slot = next_slot(formula, out_cat);
    let gradin = VarSpec::new(out_cat, slot, gradin_dim)?;
    let g = Formula::from_var(gradin);
    let (cotangent, lse_aux) = match red.kind {
        ReductionKind::Sum => (g, None),
        _ => {
            let m = VarSpec::new(out_cat, slot + 1, 1)?;
            let s = VarSpec::new(out_cat, slot + 2, 1)?;
            let weight = formula
                .sub(&Formula::from_var(m))?
                .exp()
                .divide(&Formula::from_var(s))?;
            (g.mult(&weight)?, Some((m, s)))
        }
    };
    let gradient = grad_with(formula, wrt, &cotangent)?;
    let axis = if wrt.category == reduced_cat {
        match red.axis {
            Axis::OverJ => Axis::OverI,
            Axis::OverI => Axis::OverJ,
        }
    } else {
        red.axis
    };
    Ok(GradReduction {
        reduction: ReductionSpec::new(ReductionKind::Sum, axis),
        formula: gradient,
        gradin,
        lse_aux,
        sum_rows: wrt.category == Category::P,
    })
}
