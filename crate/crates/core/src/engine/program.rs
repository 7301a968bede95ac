//! A formula compiled into a register program that evaluates one output row
//! against a whole tile of reduced indices at once.
//!
//! Every node is assigned to the cheapest phase it can be computed in:
//! constants and parameters once per block, expressions of the output-row
//! variables once per row, expressions of the reduced variables once per
//! tile, and everything else per (row, tile). Tile registers are stored
//! coordinate-major with a fixed lane stride, so each kernel is a flat loop
//! over the lanes of the tile.

use std::collections::HashMap;

use crate::formula::{Category, Formula, Op, VarSpec};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Phase {
    Const,
    Outer,
    Inner,
    Pair,
}

fn join(a: Phase, b: Phase) -> Phase {
    match (a, b) {
        (Phase::Const, x) | (x, Phase::Const) => x,
        (x, y) if x == y => x,
        _ => Phase::Pair,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Reg {
    pub dim: usize,
    pub tile: bool,
    pub offset: usize,
}

#[derive(Clone, Debug)]
enum Kernel {
    /// Copy of the current row of outer variable `k`.
    Outer(usize),
    /// Copy of parameter `k`.
    Param(usize),
    Constant(Vec<f64>),
    Add,
    Sub,
    Mult,
    Divide,
    Scal,
    Dot,
    SqNorm2,
    SqDist,
    Sum,
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sign,
    Powi(i32),
    Concat,
    Extract(usize),
}

#[derive(Clone, Debug)]
struct Instr {
    kernel: Kernel,
    args: Vec<usize>,
    out: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Program {
    regs: Vec<Reg>,
    phases: [Vec<Instr>; 4],
    root: usize,
    /// Variables indexed by the output rows, in outer-buffer order.
    pub outer_vars: Vec<VarSpec>,
    /// Variables indexed by the reduced index, with the tile register each
    /// one is loaded into.
    pub inner_vars: Vec<(VarSpec, usize)>,
    pub param_vars: Vec<VarSpec>,
    uni_len: usize,
    tile_dims: usize,
}

struct Builder {
    outer: Category,
    regs: Vec<Reg>,
    reg_phase: Vec<Phase>,
    instrs: Vec<(Phase, Instr)>,
    memo: HashMap<usize, usize>,
    vars: HashMap<(Category, usize), usize>,
    outer_vars: Vec<VarSpec>,
    inner_vars: Vec<(VarSpec, usize)>,
    param_vars: Vec<VarSpec>,
    uni_len: usize,
    tile_dims: usize,
}

impl Builder {
    fn new_reg(&mut self, dim: usize, phase: Phase) -> usize {
        let tile = matches!(phase, Phase::Inner | Phase::Pair);
        let offset = if tile {
            self.tile_dims += dim;
            self.tile_dims - dim
        } else {
            self.uni_len += dim;
            self.uni_len - dim
        };
        self.regs.push(Reg { dim, tile, offset });
        self.reg_phase.push(phase);
        self.regs.len() - 1
    }

    fn var(&mut self, v: VarSpec) -> usize {
        if let Some(&r) = self.vars.get(&v.key()) {
            return r;
        }
        let r = if v.category == Category::P {
            let r = self.new_reg(v.dim, Phase::Const);
            self.param_vars.push(v);
            let k = self.param_vars.len() - 1;
            self.push(Phase::Const, Kernel::Param(k), vec![], r);
            r
        } else if v.category == self.outer {
            let r = self.new_reg(v.dim, Phase::Outer);
            self.outer_vars.push(v);
            let k = self.outer_vars.len() - 1;
            self.push(Phase::Outer, Kernel::Outer(k), vec![], r);
            r
        } else {
            let r = self.new_reg(v.dim, Phase::Inner);
            self.inner_vars.push((v, r));
            r
        };
        self.vars.insert(v.key(), r);
        r
    }

    fn push(&mut self, phase: Phase, kernel: Kernel, args: Vec<usize>, out: usize) {
        self.instrs.push((phase, Instr { kernel, args, out }));
    }

    fn node(&mut self, f: &Formula) -> usize {
        if let Some(&r) = self.memo.get(&f.node_id()) {
            return r;
        }
        let r = match f.op() {
            Op::Var(v) => self.var(*v),
            op => {
                let args: Vec<usize> = f.children().iter().map(|c| self.node(c)).collect();
                let phase = args
                    .iter()
                    .map(|&a| self.reg_phase[a])
                    .fold(Phase::Const, join);
                let kernel = match op {
                    Op::Var(_) => unreachable!(),
                    Op::Constant(c) => Kernel::Constant(c.clone()),
                    Op::Add => Kernel::Add,
                    Op::Sub => Kernel::Sub,
                    Op::Mult => Kernel::Mult,
                    Op::Divide => Kernel::Divide,
                    Op::Scal => Kernel::Scal,
                    Op::Dot => Kernel::Dot,
                    Op::SqNorm2 => Kernel::SqNorm2,
                    Op::SqDist => Kernel::SqDist,
                    Op::Sum => Kernel::Sum,
                    Op::Neg => Kernel::Neg,
                    Op::Exp => Kernel::Exp,
                    Op::Log => Kernel::Log,
                    Op::Sqrt => Kernel::Sqrt,
                    Op::Abs => Kernel::Abs,
                    Op::Sign => Kernel::Sign,
                    Op::Powi(n) => Kernel::Powi(*n),
                    Op::Concat => Kernel::Concat,
                    Op::Extract { start, .. } => Kernel::Extract(*start),
                };
                let r = self.new_reg(f.dim(), phase);
                self.push(phase, kernel, args, r);
                r
            }
        };
        self.memo.insert(f.node_id(), r);
        r
    }
}

impl Program {
    /// Compiles `f` for reductions whose output rows are indexed by `outer`.
    pub fn compile(f: &Formula, outer: Category) -> Program {
        let mut b = Builder {
            outer,
            regs: Vec::new(),
            reg_phase: Vec::new(),
            instrs: Vec::new(),
            memo: HashMap::new(),
            vars: HashMap::new(),
            outer_vars: Vec::new(),
            inner_vars: Vec::new(),
            param_vars: Vec::new(),
            uni_len: 0,
            tile_dims: 0,
        };
        let mut root = b.node(f);
        // The accumulator consumes a tile register; a root that does not
        // depend on the reduced index is broadcast into one.
        if !b.regs[root].tile {
            let r = b.new_reg(f.dim(), Phase::Pair);
            b.push(Phase::Pair, Kernel::Concat, vec![root], r);
            root = r;
        }
        let mut phases: [Vec<Instr>; 4] = Default::default();
        for (phase, ins) in b.instrs {
            phases[phase as usize].push(ins);
        }
        Program {
            regs: b.regs,
            phases,
            root,
            outer_vars: b.outer_vars,
            inner_vars: b.inner_vars,
            param_vars: b.param_vars,
            uni_len: b.uni_len,
            tile_dims: b.tile_dims,
        }
    }

    /// Length of the uniform register file.
    pub fn uniform_len(&self) -> usize {
        self.uni_len
    }

    /// Length of the tile register file for lane stride `stride`.
    pub fn tile_len(&self, stride: usize) -> usize {
        self.tile_dims * stride
    }

    pub fn reg(&self, r: usize) -> Reg {
        self.regs[r]
    }

    /// Offset of the root's values in the tile register file.
    pub fn root_offset(&self, stride: usize) -> usize {
        self.regs[self.root].offset * stride
    }

    #[cfg(test)]
    pub fn root_dim(&self) -> usize {
        self.regs[self.root].dim
    }

    /// Runs the instructions of `phase` over the first `n` lanes.
    pub fn run<T: Scalar>(&self, phase: Phase, ctx: &mut Ctx<'_, T>) {
        for ins in &self.phases[phase as usize] {
            self.exec(ins, ctx);
        }
    }

    fn exec<T: Scalar>(&self, ins: &Instr, ctx: &mut Ctx<'_, T>) {
        let out = self.regs[ins.out];
        if !out.tile {
            let (lo, hi) = ctx.uni.split_at_mut(out.offset);
            let dst = &mut hi[..out.dim];
            match &ins.kernel {
                Kernel::Outer(k) => {
                    dst.copy_from_slice(&ctx.outer_row[ctx.outer_offsets[*k]..][..out.dim])
                }
                Kernel::Param(k) => dst.copy_from_slice(ctx.params[*k]),
                kernel => {
                    let lo: &[T] = lo;
                    let operand = |k: usize| {
                        let r = self.regs[ins.args[k]];
                        Operand::Uni(&lo[r.offset..r.offset + r.dim])
                    };
                    apply(kernel, dst, 1, 1, out.dim, &ins.args, operand, &self.regs)
                }
            }
            return;
        }
        let stride = ctx.stride;
        let (lo, hi) = ctx.tile.split_at_mut(out.offset * stride);
        let (lo, uni): (&[T], &[T]) = (lo, ctx.uni);
        let dst = &mut hi[..out.dim * stride];
        let operand = |k: usize| {
            let r = self.regs[ins.args[k]];
            if r.tile {
                Operand::Tile(&lo[r.offset * stride..(r.offset + r.dim) * stride], stride)
            } else {
                Operand::Uni(&uni[r.offset..r.offset + r.dim])
            }
        };
        apply(&ins.kernel, dst, stride, ctx.n, out.dim, &ins.args, operand, &self.regs);
    }
}

/// Register files and inputs of one evaluation step.
pub(crate) struct Ctx<'a, T> {
    pub uni: &'a mut [T],
    pub tile: &'a mut [T],
    pub stride: usize,
    pub n: usize,
    pub outer_row: &'a [T],
    pub outer_offsets: &'a [usize],
    pub params: &'a [&'a [T]],
}

#[derive(Clone, Copy)]
enum Operand<'a, T> {
    Uni(&'a [T]),
    Tile(&'a [T], usize),
}

#[derive(Clone, Copy)]
enum Lane<'a, T> {
    Splat(T),
    Slice(&'a [T]),
}

impl<'a, T: Copy> Operand<'a, T> {
    #[inline(always)]
    fn lane(self, d: usize, n: usize) -> Lane<'a, T> {
        match self {
            Operand::Uni(s) => Lane::Splat(s[d]),
            Operand::Tile(s, stride) => Lane::Slice(&s[d * stride..d * stride + n]),
        }
    }

    fn dim(self) -> usize {
        match self {
            Operand::Uni(s) => s.len(),
            Operand::Tile(s, stride) => s.len() / stride,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply<'a, T: Scalar>(
    kernel: &Kernel,
    dst: &mut [T],
    stride: usize,
    n: usize,
    dim: usize,
    args: &[usize],
    operand: impl Fn(usize) -> Operand<'a, T>,
    regs: &[Reg],
) {
    match kernel {
        Kernel::Outer(_) | Kernel::Param(_) => unreachable!("uniform loads"),
        Kernel::Constant(c) => {
            for (d, &v) in c.iter().enumerate() {
                dst[d * stride..d * stride + n].fill(T::from_f64(v));
            }
        }
        Kernel::Add => binary(dst, stride, n, dim, operand(0), operand(1), |x, y| x + y),
        Kernel::Sub => binary(dst, stride, n, dim, operand(0), operand(1), |x, y| x - y),
        Kernel::Mult => binary(dst, stride, n, dim, operand(0), operand(1), |x, y| x * y),
        Kernel::Divide => binary(dst, stride, n, dim, operand(0), operand(1), |x, y| x / y),
        Kernel::Scal => {
            let s = operand(0).lane(0, n);
            let v = operand(1);
            for d in 0..dim {
                zip2(&mut dst[d * stride..d * stride + n], s, v.lane(d, n), |s, x| s * x);
            }
        }
        // Both are symmetric bit for bit, which `reduce2` relies on.
        Kernel::Dot => reduce2(&mut dst[..n], n, operand(0), operand(1), |x, y| x * y),
        Kernel::SqDist => reduce2(&mut dst[..n], n, operand(0), operand(1), |x, y| {
            let t = x - y;
            t * t
        }),
        Kernel::SqNorm2 => reduce1(&mut dst[..n], n, operand(0), |x| x * x),
        Kernel::Sum => reduce1(&mut dst[..n], n, operand(0), |x| x),
        Kernel::Neg => unary(dst, stride, n, dim, operand(0), |x| -x),
        Kernel::Exp => unary(dst, stride, n, dim, operand(0), T::exponential),
        Kernel::Log => unary(dst, stride, n, dim, operand(0), T::ln),
        Kernel::Sqrt => unary(dst, stride, n, dim, operand(0), T::sqrt),
        Kernel::Abs => unary(dst, stride, n, dim, operand(0), T::abs),
        Kernel::Sign => unary(dst, stride, n, dim, operand(0), T::sign),
        Kernel::Powi(p) => {
            let p = *p;
            unary(dst, stride, n, dim, operand(0), |x| x.powi(p))
        }
        Kernel::Concat => {
            let mut d0 = 0;
            for (k, &a) in args.iter().enumerate() {
                let op = operand(k);
                for d in 0..regs[a].dim {
                    copy_lane(&mut dst[(d0 + d) * stride..(d0 + d) * stride + n], op.lane(d, n));
                }
                d0 += regs[a].dim;
            }
        }
        Kernel::Extract(start) => {
            let op = operand(0);
            for d in 0..dim {
                copy_lane(&mut dst[d * stride..d * stride + n], op.lane(start + d, n));
            }
        }
    }
}

#[inline(always)]
fn copy_lane<T: Copy>(out: &mut [T], a: Lane<'_, T>) {
    match a {
        Lane::Splat(x) => out.fill(x),
        Lane::Slice(s) => out.copy_from_slice(s),
    }
}

#[inline(always)]
fn unary<T: Scalar>(
    dst: &mut [T],
    stride: usize,
    n: usize,
    dim: usize,
    a: Operand<'_, T>,
    f: impl Fn(T) -> T,
) {
    for d in 0..dim {
        let out = &mut dst[d * stride..d * stride + n];
        match a.lane(d, n) {
            Lane::Splat(x) => out.fill(f(x)),
            Lane::Slice(s) => {
                for (o, &x) in out.iter_mut().zip(s) {
                    *o = f(x);
                }
            }
        }
    }
}

#[inline(always)]
fn binary<T: Scalar>(
    dst: &mut [T],
    stride: usize,
    n: usize,
    dim: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    f: impl Fn(T, T) -> T,
) {
    let (da, db) = (a.dim(), b.dim());
    for d in 0..dim {
        let la = a.lane(if da == 1 { 0 } else { d }, n);
        let lb = b.lane(if db == 1 { 0 } else { d }, n);
        zip2(&mut dst[d * stride..d * stride + n], la, lb, &f);
    }
}

#[inline(always)]
fn zip2<T: Copy>(out: &mut [T], a: Lane<'_, T>, b: Lane<'_, T>, f: impl Fn(T, T) -> T) {
    match (a, b) {
        (Lane::Slice(x), Lane::Slice(y)) => {
            for ((o, &x), &y) in out.iter_mut().zip(x).zip(y) {
                *o = f(x, y);
            }
        }
        (Lane::Slice(x), Lane::Splat(y)) => {
            for (o, &x) in out.iter_mut().zip(x) {
                *o = f(x, y);
            }
        }
        (Lane::Splat(x), Lane::Slice(y)) => {
            for (o, &y) in out.iter_mut().zip(y) {
                *o = f(x, y);
            }
        }
        (Lane::Splat(x), Lane::Splat(y)) => out.fill(f(x, y)),
    }
}

/// `out = Σ_d f(a_d, b_d)`, accumulated from zero in coordinate order.
/// `f` must be symmetric.
#[inline(always)]
fn reduce2<T: Scalar>(
    out: &mut [T],
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    f: impl Fn(T, T) -> T,
) {
    let (a, b) = match (a, b) {
        (Operand::Tile(..), Operand::Uni(_)) => (b, a),
        _ => (a, b),
    };
    match (a, b) {
        (Operand::Uni(x), Operand::Tile(y, stride)) => match x.len() {
            1 => splat_slice::<T, 1>(out, n, x, y, stride, f),
            2 => splat_slice::<T, 2>(out, n, x, y, stride, f),
            3 => splat_slice::<T, 3>(out, n, x, y, stride, f),
            4 => splat_slice::<T, 4>(out, n, x, y, stride, f),
            _ => reduce2_lanes(out, n, a, b, f),
        },
        (Operand::Tile(x, stride), Operand::Tile(y, _)) => match x.len() / stride {
            1 => slice_slice::<T, 1>(out, n, x, y, stride, f),
            2 => slice_slice::<T, 2>(out, n, x, y, stride, f),
            3 => slice_slice::<T, 3>(out, n, x, y, stride, f),
            4 => slice_slice::<T, 4>(out, n, x, y, stride, f),
            _ => reduce2_lanes(out, n, a, b, f),
        },
        _ => reduce2_lanes(out, n, a, b, f),
    }
}

#[inline(always)]
fn splat_slice<T: Scalar, const D: usize>(
    out: &mut [T],
    n: usize,
    x: &[T],
    y: &[T],
    stride: usize,
    f: impl Fn(T, T) -> T,
) {
    let xs: [T; D] = std::array::from_fn(|d| x[d]);
    let ys: [&[T]; D] = std::array::from_fn(|d| &y[d * stride..d * stride + n]);
    for (t, o) in out[..n].iter_mut().enumerate() {
        let mut acc = T::zero();
        for d in 0..D {
            acc = acc + f(xs[d], ys[d][t]);
        }
        *o = acc;
    }
}

#[inline(always)]
fn slice_slice<T: Scalar, const D: usize>(
    out: &mut [T],
    n: usize,
    x: &[T],
    y: &[T],
    stride: usize,
    f: impl Fn(T, T) -> T,
) {
    let xs: [&[T]; D] = std::array::from_fn(|d| &x[d * stride..d * stride + n]);
    let ys: [&[T]; D] = std::array::from_fn(|d| &y[d * stride..d * stride + n]);
    for (t, o) in out[..n].iter_mut().enumerate() {
        let mut acc = T::zero();
        for d in 0..D {
            acc = acc + f(xs[d][t], ys[d][t]);
        }
        *o = acc;
    }
}

#[inline(always)]
fn reduce2_lanes<T: Scalar>(
    out: &mut [T],
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    f: impl Fn(T, T) -> T,
) {
    out.fill(T::zero());
    for d in 0..a.dim() {
        match (a.lane(d, n), b.lane(d, n)) {
            (Lane::Slice(x), Lane::Slice(y)) => {
                for ((o, &x), &y) in out.iter_mut().zip(x).zip(y) {
                    *o = *o + f(x, y);
                }
            }
            (Lane::Slice(x), Lane::Splat(y)) => {
                for (o, &x) in out.iter_mut().zip(x) {
                    *o = *o + f(x, y);
                }
            }
            (Lane::Splat(x), Lane::Slice(y)) => {
                for (o, &y) in out.iter_mut().zip(y) {
                    *o = *o + f(x, y);
                }
            }
            (Lane::Splat(x), Lane::Splat(y)) => {
                let v = f(x, y);
                for o in out.iter_mut() {
                    *o = *o + v;
                }
            }
        }
    }
}

#[inline(always)]
fn reduce1<T: Scalar>(out: &mut [T], n: usize, a: Operand<'_, T>, f: impl Fn(T) -> T) {
    if let Operand::Tile(x, stride) = a {
        match x.len() / stride {
            1 => return tile_reduce1::<T, 1>(out, n, x, stride, f),
            2 => return tile_reduce1::<T, 2>(out, n, x, stride, f),
            3 => return tile_reduce1::<T, 3>(out, n, x, stride, f),
            4 => return tile_reduce1::<T, 4>(out, n, x, stride, f),
            _ => {}
        }
    }
    out.fill(T::zero());
    for d in 0..a.dim() {
        match a.lane(d, n) {
            Lane::Slice(x) => {
                for (o, &x) in out.iter_mut().zip(x) {
                    *o = *o + f(x);
                }
            }
            Lane::Splat(x) => {
                let v = f(x);
                for o in out.iter_mut() {
                    *o = *o + v;
                }
            }
        }
    }
}

#[inline(always)]
fn tile_reduce1<T: Scalar, const D: usize>(
    out: &mut [T],
    n: usize,
    x: &[T],
    stride: usize,
    f: impl Fn(T) -> T,
) {
    let xs: [&[T]; D] = std::array::from_fn(|d| &x[d * stride..d * stride + n]);
    for (t, o) in out[..n].iter_mut().enumerate() {
        let mut acc = T::zero();
        for col in &xs {
            acc = acc + f(col[t]);
        }
        *o = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_formula;

    fn phases_of(text: &str, outer: Category) -> Vec<usize> {
        let p = Program::compile(&parse_formula(text).unwrap(), outer);
        p.phases.iter().map(|v| v.len()).collect()
    }

    #[test]
    fn nodes_land_in_cheapest_phase() {
        // Exp(Pm) is constant, Sqrt(Vi) is per row, Log(Vj) is per tile.
        let counts = phases_of(
            "Exp(Pm(0,1)) * Sqrt(Vi(0,1)) * Log(Vj(0,1))",
            Category::I,
        );
        assert_eq!(counts, vec![2, 3, 1, 1]);
    }

    #[test]
    fn shared_subtrees_compile_once() {
        let x = Formula::vi(0, 2).unwrap();
        let y = Formula::vj(0, 2).unwrap();
        let d = x.sqdist(&y).unwrap();
        let f = d.add(&d).unwrap();
        let p = Program::compile(&f, Category::I);
        assert_eq!(p.phases[Phase::Pair as usize].len(), 2);
    }

    #[test]
    fn uniform_root_is_broadcast() {
        let p = Program::compile(&parse_formula("Vi(0,2) + Pm(0,2)").unwrap(), Category::I);
        assert!(p.reg(p.root).tile);
        assert_eq!(p.root_dim(), 2);
    }
}
