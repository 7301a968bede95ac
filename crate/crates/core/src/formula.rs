//! Immutable, dimension-checked symbolic formulas over i-, j- and parameter
//! variables, plus the single-pair reference evaluator.
//!
//! A [`Formula`] is a shared tree. Every node caches its output dimension and
//! the sorted list of variables it references, so dimension and slot errors
//! surface when a node is built and never while it is evaluated.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Role of a variable in a reduction `a_i = Red_j F(p, x_i, y_j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Indexed by the output row `i`.
    I,
    /// Indexed by the reduced index `j`.
    J,
    /// Global parameter vector.
    P,
}

impl Category {
    /// The constructor name used in the textual syntax.
    pub fn constructor(self) -> &'static str {
        match self {
            Category::I => "Vi",
            Category::J => "Vj",
            Category::P => "Pm",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::I => "I",
            Category::J => "J",
            Category::P => "P",
        })
    }
}

/// A variable leaf: which input array (`category`, `slot`) it reads and the
/// vector length `dim` of one row of that array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarSpec {
    pub category: Category,
    pub slot: usize,
    pub dim: usize,
}

impl VarSpec {
    pub fn new(category: Category, slot: usize, dim: usize) -> Result<Self, FormulaError> {
        if dim == 0 {
            return Err(FormulaError::ZeroDimension);
        }
        Ok(Self { category, slot, dim })
    }

    /// `(category, slot)`, the identity of the bound array.
    pub fn key(&self) -> (Category, usize) {
        (self.category, self.slot)
    }
}

impl fmt::Display for VarSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}:{}", self.category, self.slot, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormulaError {
    #[error("variable dimension must be at least 1")]
    ZeroDimension,
    #[error("constant must have at least one entry")]
    EmptyConstant,
    #[error("{op} expects {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("dimension mismatch in {op}: operand dims {dims:?}")]
    DimensionMismatch { op: &'static str, dims: Vec<usize> },
    #[error("slot {category}{slot} used with two dimensions ({first} and {second})")]
    SlotConflict {
        category: Category,
        slot: usize,
        first: usize,
        second: usize,
    },
    #[error("no binding for variable {0}")]
    MissingBinding(VarSpec),
    #[error("binding for {var} has {got} entries, expected {}", var.dim)]
    BindingDim { var: VarSpec, got: usize },
}

/// Node kinds. Leaves carry their payload; operators take their operands
/// from the node's children.
#[derive(Clone, Debug)]
pub enum Op {
    Var(VarSpec),
    /// Explicit numeric vector leaf.
    Constant(Vec<f64>),
    Add,
    Sub,
    Neg,
    /// Elementwise product.
    Mult,
    /// Elementwise quotient.
    Divide,
    /// Scalar (dim-1 first operand) times vector.
    Scal,
    Dot,
    SqNorm2,
    SqDist,
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Elementwise sign, with `sign(0) = 0`.
    Sign,
    /// Elementwise integer power.
    Powi(i32),
    /// Sum of coordinates.
    Sum,
    Concat,
    /// Coordinates `start..start + len` of the operand.
    Extract { start: usize, len: usize },
}

impl PartialEq for Op {
    fn eq(&self, other: &Self) -> bool {
        use Op::*;
        match (self, other) {
            (Var(a), Var(b)) => a == b,
            (Constant(a), Constant(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Powi(a), Powi(b)) => a == b,
            (Extract { start: s1, len: l1 }, Extract { start: s2, len: l2 }) => {
                s1 == s2 && l1 == l2
            }
            _ => {
                std::mem::discriminant(self) == std::mem::discriminant(other)
                    && !matches!(self, Var(_) | Constant(_) | Powi(_) | Extract { .. })
            }
        }
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Var(_) => "Var",
            Op::Constant(_) => "Constant",
            Op::Add => "Add",
            Op::Sub => "Sub",
            Op::Neg => "Neg",
            Op::Mult => "Mult",
            Op::Divide => "Divide",
            Op::Scal => "Scal",
            Op::Dot => "Dot",
            Op::SqNorm2 => "SqNorm2",
            Op::SqDist => "SqDist",
            Op::Exp => "Exp",
            Op::Log => "Log",
            Op::Sqrt => "Sqrt",
            Op::Abs => "Abs",
            Op::Sign => "Sign",
            Op::Powi(_) => "Powi",
            Op::Sum => "Sum",
            Op::Concat => "Concat",
            Op::Extract { .. } => "Extract",
        }
    }

    fn check_arity(&self, got: usize) -> Result<(), FormulaError> {
        let (ok, expected) = match self {
            Op::Var(_) | Op::Constant(_) => (got == 0, "0"),
            Op::Add | Op::Sub | Op::Mult | Op::Divide | Op::Scal | Op::Dot | Op::SqDist => {
                (got == 2, "2")
            }
            Op::Concat => (got >= 1, "at least 1"),
            _ => (got == 1, "1"),
        };
        if ok {
            Ok(())
        } else {
            Err(FormulaError::Arity {
                op: self.name(),
                expected,
                got,
            })
        }
    }

    /// Output dimension of this op applied to operands of dimensions `dims`.
    fn out_dim(&self, dims: &[usize]) -> Result<usize, FormulaError> {
        let mismatch = || FormulaError::DimensionMismatch {
            op: self.name(),
            dims: dims.to_vec(),
        };
        match self {
            Op::Var(v) => Ok(v.dim),
            Op::Constant(c) => {
                if c.is_empty() {
                    Err(FormulaError::EmptyConstant)
                } else {
                    Ok(c.len())
                }
            }
            Op::Add | Op::Sub | Op::Mult | Op::Divide => {
                let (a, b) = (dims[0], dims[1]);
                if a == b || a == 1 || b == 1 {
                    Ok(a.max(b))
                } else {
                    Err(mismatch())
                }
            }
            Op::Scal => {
                if dims[0] == 1 {
                    Ok(dims[1])
                } else {
                    Err(mismatch())
                }
            }
            Op::Dot | Op::SqDist => {
                if dims[0] == dims[1] {
                    Ok(1)
                } else {
                    Err(mismatch())
                }
            }
            Op::SqNorm2 | Op::Sum => Ok(1),
            Op::Neg | Op::Exp | Op::Log | Op::Sqrt | Op::Abs | Op::Sign | Op::Powi(_) => Ok(dims[0]),
            Op::Concat => Ok(dims.iter().sum()),
            Op::Extract { start, len } => {
                if *len >= 1 && start + len <= dims[0] {
                    Ok(*len)
                } else {
                    Err(mismatch())
                }
            }
        }
    }
}

struct Node {
    op: Op,
    children: Vec<Formula>,
    dim: usize,
    vars: Vec<VarSpec>,
}

/// Shared immutable expression tree. Cloning is a reference-count bump.
#[derive(Clone)]
pub struct Formula(Arc<Node>);

impl PartialEq for Formula {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
            || (self.0.dim == other.0.dim
                && self.0.op == other.0.op
                && self.0.children == other.0.children)
    }
}

impl fmt::Debug for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Formula({})", crate::parser::format_formula(self))
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::parser::format_formula(self))
    }
}

fn merge_vars(children: &[Formula]) -> Result<Vec<VarSpec>, FormulaError> {
    let mut vars: Vec<VarSpec> = children.iter().flat_map(|c| c.0.vars.iter().copied()).collect();
    vars.sort_unstable();
    vars.dedup();
    for pair in vars.windows(2) {
        if pair[0].key() == pair[1].key() {
            return Err(FormulaError::SlotConflict {
                category: pair[0].category,
                slot: pair[0].slot,
                first: pair[0].dim,
                second: pair[1].dim,
            });
        }
    }
    Ok(vars)
}

impl Formula {
    /// Builds a node of kind `op` over `children`, checking arity, the
    /// dimension rules and slot consistency.
    pub fn compose(op: Op, children: Vec<Formula>) -> Result<Formula, FormulaError> {
        op.check_arity(children.len())?;
        let dims: Vec<usize> = children.iter().map(Formula::dim).collect();
        let dim = op.out_dim(&dims)?;
        let vars = match &op {
            Op::Var(v) => vec![*v],
            _ => merge_vars(&children)?,
        };
        Ok(Formula(Arc::new(Node {
            op,
            children,
            dim,
            vars,
        })))
    }

    pub fn var(category: Category, slot: usize, dim: usize) -> Result<Formula, FormulaError> {
        let v = VarSpec::new(category, slot, dim)?;
        Ok(Self::from_var(v))
    }

    pub fn from_var(v: VarSpec) -> Formula {
        Formula(Arc::new(Node {
            op: Op::Var(v),
            children: Vec::new(),
            dim: v.dim,
            vars: vec![v],
        }))
    }

    pub fn vi(slot: usize, dim: usize) -> Result<Formula, FormulaError> {
        Self::var(Category::I, slot, dim)
    }

    pub fn vj(slot: usize, dim: usize) -> Result<Formula, FormulaError> {
        Self::var(Category::J, slot, dim)
    }

    pub fn pm(slot: usize, dim: usize) -> Result<Formula, FormulaError> {
        Self::var(Category::P, slot, dim)
    }

    pub fn constant(values: Vec<f64>) -> Result<Formula, FormulaError> {
        Self::compose(Op::Constant(values), Vec::new())
    }

    pub fn scalar(value: f64) -> Formula {
        Formula(Arc::new(Node {
            op: Op::Constant(vec![value]),
            children: Vec::new(),
            dim: 1,
            vars: Vec::new(),
        }))
    }

    fn unary(&self, op: Op) -> Formula {
        Self::compose(op, vec![self.clone()]).expect("unary ops accept any dimension")
    }

    fn binary(&self, op: Op, rhs: &Formula) -> Result<Formula, FormulaError> {
        Self::compose(op, vec![self.clone(), rhs.clone()])
    }

    pub fn add(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Add, rhs)
    }

    pub fn sub(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Sub, rhs)
    }

    pub fn mult(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Mult, rhs)
    }

    pub fn divide(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Divide, rhs)
    }

    /// `self` (dim 1) times the vector `rhs`.
    pub fn scal(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Scal, rhs)
    }

    pub fn dot(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::Dot, rhs)
    }

    pub fn sqdist(&self, rhs: &Formula) -> Result<Formula, FormulaError> {
        self.binary(Op::SqDist, rhs)
    }

    pub fn neg(&self) -> Formula {
        self.unary(Op::Neg)
    }

    pub fn exp(&self) -> Formula {
        self.unary(Op::Exp)
    }

    pub fn log(&self) -> Formula {
        self.unary(Op::Log)
    }

    pub fn sqrt(&self) -> Formula {
        self.unary(Op::Sqrt)
    }

    pub fn abs(&self) -> Formula {
        self.unary(Op::Abs)
    }

    pub fn sign(&self) -> Formula {
        self.unary(Op::Sign)
    }

    pub fn powi(&self, n: i32) -> Formula {
        self.unary(Op::Powi(n))
    }

    pub fn sqnorm2(&self) -> Formula {
        self.unary(Op::SqNorm2)
    }

    pub fn sum(&self) -> Formula {
        self.unary(Op::Sum)
    }

    pub fn extract(&self, start: usize, len: usize) -> Result<Formula, FormulaError> {
        Self::compose(Op::Extract { start, len }, vec![self.clone()])
    }

    pub fn concat(parts: &[Formula]) -> Result<Formula, FormulaError> {
        Self::compose(Op::Concat, parts.to_vec())
    }

    pub fn op(&self) -> &Op {
        &self.0.op
    }

    pub fn children(&self) -> &[Formula] {
        &self.0.children
    }

    /// Cached output dimension.
    pub fn dim(&self) -> usize {
        self.0.dim
    }

    /// Variables referenced by the formula, deduplicated by `(category,
    /// slot)` and sorted by category then slot.
    pub fn collect_vars(&self) -> &[VarSpec] {
        &self.0.vars
    }

    /// Looks up the spec of the variable bound to `(category, slot)`.
    pub fn find_var(&self, category: Category, slot: usize) -> Option<VarSpec> {
        self.0
            .vars
            .iter()
            .copied()
            .find(|v| v.category == category && v.slot == slot)
    }

    /// Number of nodes, counting shared subtrees once per occurrence.
    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(Formula::node_count).sum::<usize>()
    }

    /// Identity of the underlying node, stable while the tree is alive.
    pub(crate) fn node_id(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Evaluates the formula at one `(i, j)` pair.
    pub fn eval_pair<T: Scalar, B: PairBindings<T> + ?Sized>(
        &self,
        bindings: &B,
    ) -> Result<Vec<T>, FormulaError> {
        for v in self.collect_vars() {
            let data = bindings.lookup(v).ok_or(FormulaError::MissingBinding(*v))?;
            if data.len() != v.dim {
                return Err(FormulaError::BindingDim {
                    var: *v,
                    got: data.len(),
                });
            }
        }
        let mut out = vec![T::zero(); self.dim()];
        let mut stack = Vec::new();
        eval_into(self, bindings, &mut out, &mut stack);
        Ok(out)
    }

    /// Like [`Formula::eval_pair`] but writes into `out` and reuses `stack`
    /// for intermediate values. Bindings must already be validated.
    pub(crate) fn eval_pair_into<T: Scalar, B: PairBindings<T> + ?Sized>(
        &self,
        bindings: &B,
        out: &mut [T],
        stack: &mut Vec<T>,
    ) {
        eval_into(self, bindings, out, stack)
    }
}

/// Source of per-variable vectors for [`Formula::eval_pair`].
pub trait PairBindings<T> {
    fn lookup(&self, var: &VarSpec) -> Option<&[T]>;
}

impl<T> PairBindings<T> for [(VarSpec, &[T])] {
    fn lookup(&self, var: &VarSpec) -> Option<&[T]> {
        self.iter().find(|(v, _)| v.key() == var.key()).map(|(_, d)| *d)
    }
}

impl<T> PairBindings<T> for [(VarSpec, Vec<T>)] {
    fn lookup(&self, var: &VarSpec) -> Option<&[T]> {
        self.iter()
            .find(|(v, _)| v.key() == var.key())
            .map(|(_, d)| d.as_slice())
    }
}

impl<T, const N: usize> PairBindings<T> for [(VarSpec, &[T]); N] {
    fn lookup(&self, var: &VarSpec) -> Option<&[T]> {
        self.as_slice().lookup(var)
    }
}

impl<T> PairBindings<T> for std::collections::HashMap<(Category, usize), Vec<T>> {
    fn lookup(&self, var: &VarSpec) -> Option<&[T]> {
        self.get(&var.key()).map(Vec::as_slice)
    }
}

#[inline]
fn bcast<T: Copy>(v: &[T], d: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[d]
    }
}

fn eval_into<T: Scalar, B: PairBindings<T> + ?Sized>(
    f: &Formula,
    bindings: &B,
    out: &mut [T],
    stack: &mut Vec<T>,
) {
    stack.clear();
    stack.resize(f.dim(), T::zero());
    eval_at(f, bindings, stack, 0);
    out.copy_from_slice(&stack[..f.dim()]);
}

/// Evaluates `f` into `stack[at..at + f.dim()]`, a region reserved by the
/// caller below the current stack top. Operands are pushed above the top and
/// popped before returning.
fn eval_at<T: Scalar, B: PairBindings<T> + ?Sized>(
    f: &Formula,
    bindings: &B,
    stack: &mut Vec<T>,
    at: usize,
) {
    let children = f.children();
    if let Op::Concat = f.op() {
        let mut off = at;
        for c in children {
            eval_at(c, bindings, stack, off);
            off += c.dim();
        }
        return;
    }
    let base = stack.len();
    let mut offsets = [0usize; 2];
    for (k, c) in children.iter().enumerate() {
        let start = stack.len();
        stack.resize(start + c.dim(), T::zero());
        eval_at(c, bindings, stack, start);
        offsets[k] = start - base;
    }
    let (lower, upper) = stack.split_at_mut(base);
    let out = &mut lower[at..at + f.dim()];
    let arg = |k: usize| -> &[T] { &upper[offsets[k]..offsets[k] + children[k].dim()] };
    match f.op() {
        Op::Var(v) => out.copy_from_slice(bindings.lookup(v).expect("validated binding")),
        Op::Constant(c) => {
            for (o, &x) in out.iter_mut().zip(c) {
                *o = T::from_f64(x);
            }
        }
        Op::Add | Op::Sub | Op::Mult | Op::Divide => {
            let (a, b) = (arg(0), arg(1));
            for (d, o) in out.iter_mut().enumerate() {
                let (x, y) = (bcast(a, d), bcast(b, d));
                *o = match f.op() {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mult => x * y,
                    _ => x / y,
                };
            }
        }
        Op::Scal => {
            let (s, v) = (arg(0)[0], arg(1));
            for (o, &x) in out.iter_mut().zip(v) {
                *o = s * x;
            }
        }
        Op::Dot => {
            let mut acc = T::zero();
            for (&x, &y) in arg(0).iter().zip(arg(1)) {
                acc = acc + x * y;
            }
            out[0] = acc;
        }
        Op::SqNorm2 => {
            let mut acc = T::zero();
            for &x in arg(0) {
                acc = acc + x * x;
            }
            out[0] = acc;
        }
        Op::SqDist => {
            let mut acc = T::zero();
            for (&x, &y) in arg(0).iter().zip(arg(1)) {
                let t = x - y;
                acc = acc + t * t;
            }
            out[0] = acc;
        }
        Op::Sum => {
            let mut acc = T::zero();
            for &x in arg(0) {
                acc = acc + x;
            }
            out[0] = acc;
        }
        Op::Neg => map(out, arg(0), |x| -x),
        Op::Exp => map(out, arg(0), T::exponential),
        Op::Log => map(out, arg(0), T::ln),
        Op::Sqrt => map(out, arg(0), T::sqrt),
        Op::Abs => map(out, arg(0), T::abs),
        Op::Sign => map(out, arg(0), T::sign),
        Op::Powi(n) => {
            let n = *n;
            map(out, arg(0), |x| x.powi(n))
        }
        Op::Extract { start, len } => out.copy_from_slice(&arg(0)[*start..start + len]),
        Op::Concat => unreachable!(),
    }
    stack.truncate(base);
}

#[inline]
fn map<T: Copy>(out: &mut [T], a: &[T], f: impl Fn(T) -> T) {
    for (o, &x) in out.iter_mut().zip(a) {
        *o = f(x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian() -> (Formula, VarSpec, VarSpec, VarSpec) {
        let x = Formula::vi(0, 3).unwrap();
        let y = Formula::vj(0, 3).unwrap();
        let b = Formula::vj(1, 1).unwrap();
        let f = x.sqdist(&y).unwrap().neg().exp().scal(&b).unwrap();
        let (xs, ys, bs) = (
            VarSpec::new(Category::I, 0, 3).unwrap(),
            VarSpec::new(Category::J, 0, 3).unwrap(),
            VarSpec::new(Category::J, 1, 1).unwrap(),
        );
        (f, xs, ys, bs)
    }

    #[test]
    fn make_var_dims() {
        assert_eq!(Formula::vi(0, 3).unwrap().dim(), 3);
        assert_eq!(Formula::vj(1, 3).unwrap().dim(), 3);
        assert_eq!(Formula::pm(0, 0).unwrap_err(), FormulaError::ZeroDimension);
    }

    #[test]
    fn compose_dimension_rules() {
        let x = Formula::vi(0, 3).unwrap();
        let y = Formula::vj(0, 3).unwrap();
        assert_eq!(x.sqdist(&y).unwrap().dim(), 1);
        let s = Formula::pm(0, 1).unwrap();
        let b = Formula::vj(1, 4).unwrap();
        assert_eq!(s.scal(&b).unwrap().dim(), 4);
        let y2 = Formula::vj(2, 2).unwrap();
        assert!(matches!(
            x.dot(&y2),
            Err(FormulaError::DimensionMismatch { op: "Dot", ref dims }) if dims == &[3, 2]
        ));
        assert!(b.scal(&x).is_err());
        assert_eq!(s.add(&x).unwrap().dim(), 3);
        assert!(x.add(&y2).is_err());
        assert_eq!(Formula::concat(&[x.clone(), y2.clone()]).unwrap().dim(), 5);
        assert_eq!(x.extract(1, 2).unwrap().dim(), 2);
        assert!(x.extract(2, 2).is_err());
        assert!(Formula::compose(Op::Add, vec![x.clone()]).is_err());
    }

    #[test]
    fn slot_conflict_detected() {
        let a = Formula::vi(0, 3).unwrap();
        let b = Formula::vi(0, 2).unwrap();
        assert!(matches!(
            Formula::concat(&[a, b]),
            Err(FormulaError::SlotConflict { slot: 0, .. })
        ));
    }

    #[test]
    fn collect_vars_examples() {
        let (f, xs, ys, bs) = gaussian();
        assert_eq!(f.collect_vars(), &[xs, ys, bs]);
        assert!(Formula::constant(vec![1.0, 2.0]).unwrap().collect_vars().is_empty());
        let x = Formula::vi(0, 3).unwrap();
        let twice = x.add(&x).unwrap();
        assert_eq!(twice.collect_vars().len(), 1);
    }

    #[test]
    fn eval_pair_examples() {
        let x = Formula::vi(0, 3).unwrap();
        let y = Formula::vj(0, 3).unwrap();
        let f = x.sqdist(&y).unwrap().neg().exp();
        let (xs, ys) = (x.collect_vars()[0], y.collect_vars()[0]);
        let zero = [0.0f64; 3];
        let out = f.eval_pair(&[(xs, &zero[..]), (ys, &zero[..])]).unwrap();
        assert_eq!(out, vec![1.0]);

        let x2 = Formula::vi(0, 2).unwrap();
        let y2 = Formula::vj(0, 2).unwrap();
        let d = x2.sqdist(&y2).unwrap();
        let out = d
            .eval_pair(&[
                (x2.collect_vars()[0], &[1.0, 2.0][..]),
                (y2.collect_vars()[0], &[4.0, 6.0][..]),
            ])
            .unwrap();
        assert_eq!(out, vec![25.0]);

        let (g, xs, ys, bs) = gaussian();
        let out = g
            .eval_pair(&[
                (xs, &[0.0, 0.0, 0.0][..]),
                (ys, &[1.0, 0.0, 0.0][..]),
                (bs, &[2.0][..]),
            ])
            .unwrap();
        assert!((out[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((out[0] - 0.7357589).abs() < 1e-7);
    }

    #[test]
    fn eval_pair_errors_and_ieee() {
        let x = Formula::vi(0, 1).unwrap();
        let xs = x.collect_vars()[0];
        let empty: [(VarSpec, &[f64]); 0] = [];
        assert_eq!(
            x.log().eval_pair(&empty),
            Err(FormulaError::MissingBinding(xs))
        );
        assert!(x.eval_pair(&[(xs, &[1.0, 2.0][..])]).is_err());
        let out = x.log().eval_pair(&[(xs, &[-1.0f64][..])]).unwrap();
        assert!(out[0].is_nan());
        let zero = Formula::scalar(0.0);
        let out = x.divide(&zero).unwrap().eval_pair(&[(xs, &[1.0][..])]).unwrap();
        assert_eq!(out[0], f64::INFINITY);
    }

    #[test]
    fn broadcast_and_concat_eval() {
        let s = Formula::pm(0, 1).unwrap();
        let v = Formula::vi(0, 3).unwrap();
        let f = Formula::concat(&[v.sub(&s).unwrap(), s.clone()]).unwrap();
        let out = f
            .eval_pair(&[
                (s.collect_vars()[0], &[1.0f64][..]),
                (v.collect_vars()[0], &[1.0, 2.0, 3.0][..]),
            ])
            .unwrap();
        assert_eq!(out, vec![0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn structural_equality() {
        let (f, ..) = gaussian();
        let (g, ..) = gaussian();
        assert_eq!(f, g);
        assert_ne!(f, f.neg());
        assert_eq!(Formula::scalar(0.0), Formula::scalar(0.0));
        assert_ne!(Formula::scalar(0.0), Formula::scalar(-0.0));
    }
}
