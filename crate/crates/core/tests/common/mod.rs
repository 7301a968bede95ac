//! Random formulas, random bound data and comparison helpers shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use genred::engine::Binding;
use genred::{Axis, Category, EvalOutput, EvalRequest, Formula, Op, RangeSpec, ReductionKind, ReductionSpec, Scalar, VarSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Knobs of the random formula generator.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub depth: usize,
    pub max_dim: usize,
    /// Allow `Abs` and `Sign`, whose derivatives jump at zero.
    pub kinks: bool,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            depth: 4,
            max_dim: 4,
            kinks: true,
        }
    }
}

struct FormulaGen<'r> {
    rng: &'r mut ChaCha8Rng,
    shape: Shape,
    dims: HashMap<(Category, usize), usize>,
}

impl FormulaGen<'_> {
    fn var(&mut self, dim: usize) -> Formula {
        let cat = match self.rng.gen_range(0..10) {
            0..=3 => Category::I,
            4..=7 => Category::J,
            _ => Category::P,
        };
        let existing: Vec<usize> = self
            .dims
            .iter()
            .filter(|(k, &d)| k.0 == cat && d == dim)
            .map(|(k, _)| k.1)
            .collect();
        let slot = if !existing.is_empty() && self.rng.gen_bool(0.6) {
            existing[self.rng.gen_range(0..existing.len())]
        } else {
            self.dims.keys().filter(|k| k.0 == cat).count()
        };
        self.dims.insert((cat, slot), dim);
        Formula::var(cat, slot, dim).unwrap()
    }

    fn constant(&mut self, dim: usize) -> Formula {
        let values = (0..dim).map(|_| self.rng.gen_range(-2.0..2.0)).collect();
        Formula::constant(values).unwrap()
    }

    fn positive(&mut self, f: Formula) -> Formula {
        let c = self.rng.gen_range(0.25..2.0);
        f.powi(2).add(&Formula::scalar(c)).unwrap()
    }

    fn gen(&mut self, depth: usize, dim: usize) -> Formula {
        if depth == 0 || self.rng.gen_bool(0.2) {
            return if self.rng.gen_bool(0.85) {
                self.var(dim)
            } else {
                self.constant(dim)
            };
        }
        let d = depth - 1;
        let inner_dim = |g: &mut Self| g.rng.gen_range(1..=g.shape.max_dim);
        loop {
            match self.rng.gen_range(0..17) {
                0 => return self.gen(d, dim).add(&self.gen(d, dim)).unwrap(),
                1 => return self.gen(d, dim).sub(&self.gen(d, dim)).unwrap(),
                2 => {
                    let a = self.gen(d, dim);
                    let b = if self.rng.gen_bool(0.3) { self.gen(d, 1) } else { self.gen(d, dim) };
                    return a.mult(&b).unwrap();
                }
                3 => {
                    let a = self.gen(d, dim);
                    let b = self.gen(d, dim);
                    return a.divide(&self.positive(b)).unwrap();
                }
                4 => return self.gen(d, 1).scal(&self.gen(d, dim)).unwrap(),
                5 if dim == 1 => {
                    let k = inner_dim(self);
                    return self.gen(d, k).dot(&self.gen(d, k)).unwrap();
                }
                6 if dim == 1 => {
                    let k = inner_dim(self);
                    return self.gen(d, k).sqdist(&self.gen(d, k)).unwrap();
                }
                7 if dim == 1 => {
                    let k = inner_dim(self);
                    return self.gen(d, k).sqnorm2();
                }
                8 if dim == 1 => {
                    let k = inner_dim(self);
                    return self.gen(d, k).sum();
                }
                9 => return self.gen(d, dim).neg(),
                10 => {
                    // Keep exponents moderate so outputs stay finite.
                    let a = self.gen(d, dim);
                    return a.mult(&Formula::scalar(0.5)).unwrap().exp();
                }
                11 => {
                    let a = self.gen(d, dim);
                    return self.positive(a).log();
                }
                12 => {
                    let a = self.gen(d, dim);
                    return self.positive(a).sqrt();
                }
                13 if self.shape.kinks => {
                    let a = self.gen(d, dim);
                    return if self.rng.gen_bool(0.75) { a.abs() } else { a.sign() };
                }
                14 => {
                    let p = self.rng.gen_range(2..=3);
                    return self.gen(d, dim).powi(p);
                }
                15 if dim >= 2 => {
                    let a = self.rng.gen_range(1..dim);
                    return Formula::concat(&[self.gen(d, a), self.gen(d, dim - a)]).unwrap();
                }
                16 => {
                    let extra = self.rng.gen_range(0..=2);
                    let start = self.rng.gen_range(0..=extra);
                    return self.gen(d, dim + extra).extract(start, dim).unwrap();
                }
                _ => continue,
            }
        }
    }
}

/// A random well-typed formula of output dimension `dim` whose variables
/// include at least one `i` and one `j` variable. Depth is at least 1.
pub fn random_formula(rng: &mut ChaCha8Rng, dim: usize, shape: Shape) -> Formula {
    let shape = Shape {
        depth: shape.depth.max(1),
        ..shape
    };
    loop {
        let mut g = FormulaGen {
            rng: &mut *rng,
            shape,
            dims: HashMap::new(),
        };
        let f = g.gen(shape.depth, dim);
        let has = |c| f.collect_vars().iter().any(|v| v.category == c);
        if has(Category::I) && has(Category::J) {
            return f;
        }
    }
}

/// A formula together with random arrays for its variables.
#[derive(Clone, Debug)]
pub struct Instance<T> {
    pub formula: Formula,
    pub m: usize,
    pub n: usize,
    pub batch: Vec<usize>,
    pub data: Vec<(VarSpec, Vec<T>, Vec<usize>)>,
}

pub fn rows(v: &VarSpec, m: usize, n: usize) -> usize {
    match v.category {
        Category::I => m,
        Category::J => n,
        Category::P => 1,
    }
}

impl<T: Scalar> Instance<T> {
    pub fn new(rng: &mut ChaCha8Rng, formula: Formula, m: usize, n: usize, batch: &[usize]) -> Self {
        let data = formula
            .collect_vars()
            .iter()
            .map(|v| {
                // Each batch dimension is either present or broadcast.
                let own: Vec<usize> = batch
                    .iter()
                    .map(|&b| if rng.gen_bool(0.7) { b } else { 1 })
                    .collect();
                let len = own.iter().product::<usize>() * rows(v, m, n) * v.dim;
                let values = (0..len).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
                (*v, values, own)
            })
            .collect();
        Self {
            formula,
            m,
            n,
            batch: batch.to_vec(),
            data,
        }
    }

    pub fn request(&self, spec: ReductionSpec) -> EvalRequest<'_, T> {
        let mut req = EvalRequest::new(self.formula.clone(), spec)
            .with_batch(&self.batch)
            .with_sizes(self.m, self.n);
        for (v, values, own) in &self.data {
            req = req.bind(Binding::batched(v.category, v.slot, values, own));
        }
        req
    }

    /// Smallest `|a|` over every argument `a` of an `Abs` or `Sign` node, at
    /// every pair and batch entry.
    pub fn kink_distance(&self) -> f64 {
        let mut args = Vec::new();
        collect_kink_args(&self.formula, &mut args);
        if args.is_empty() {
            return f64::INFINITY;
        }
        let mut worst = f64::INFINITY;
        let count: usize = self.batch.iter().product();
        for b in 0..count {
            for i in 0..self.m {
                for j in 0..self.n {
                    let view = self.pair_view(b, i, j);
                    for a in &args {
                        for x in a.eval_pair(view.as_slice()).unwrap() {
                            worst = worst.min(x.as_f64().abs());
                        }
                    }
                }
            }
        }
        worst
    }

    /// Variable values at pair `(i, j)` of flat batch entry `b`.
    pub fn pair_view(&self, b: usize, i: usize, j: usize) -> Vec<(VarSpec, &[T])> {
        self.data
            .iter()
            .map(|(v, values, own)| {
                let offset = batch_offset(&self.batch, own, b) * rows(v, self.m, self.n) * v.dim;
                let row = match v.category {
                    Category::I => i,
                    Category::J => j,
                    Category::P => 0,
                };
                (*v, &values[offset + row * v.dim..offset + (row + 1) * v.dim])
            })
            .collect()
    }
}

/// Flat index into a binding of batch shape `own` (right-aligned, size-1
/// broadcast) for flat entry `b` of the full batch shape `full`.
pub fn batch_offset(full: &[usize], own: &[usize], b: usize) -> usize {
    let mut rem = b;
    let mut coords = vec![0; full.len()];
    for k in (0..full.len()).rev() {
        coords[k] = rem % full[k];
        rem /= full[k];
    }
    let shift = full.len() - own.len();
    let mut at = 0;
    for (k, &size) in own.iter().enumerate() {
        let c = if size == 1 { 0 } else { coords[k + shift] };
        at = at * size + c;
    }
    at
}

fn collect_kink_args(f: &Formula, out: &mut Vec<Formula>) {
    if matches!(f.op(), Op::Abs | Op::Sign) {
        out.push(f.children()[0].clone());
    }
    for c in f.children() {
        collect_kink_args(c, out);
    }
}

/// Checks `got` against `want`: same shape, identical indices, and values
/// equal within `tol` relative (NaN matches NaN, infinities must agree).
pub fn compare<T: Scalar>(got: &EvalOutput<T>, want: &EvalOutput<T>, tol: f64) -> Result<(), String> {
    if got.shape != want.shape {
        return Err(format!("shape {:?} vs {:?}", got.shape, want.shape));
    }
    if got.indices != want.indices {
        return Err(format!("indices {:?} vs {:?}", got.indices, want.indices));
    }
    for (k, (a, b)) in got.values.iter().zip(&want.values).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        if !close(a, b, tol) {
            return Err(format!("value {k}: {a:e} vs {b:e}"));
        }
    }
    Ok(())
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// A reduction of `kind` over a random axis; `k` never exceeds the reduced
/// size.
pub fn random_spec(rng: &mut ChaCha8Rng, kind: ReductionKind, m: usize, n: usize) -> ReductionSpec {
    let axis = if rng.gen_bool(0.5) { Axis::OverJ } else { Axis::OverI };
    match kind {
        ReductionKind::ArgKMin => {
            let reduced = if axis == Axis::OverJ { n } else { m };
            ReductionSpec::arg_k_min(axis, rng.gen_range(1..=reduced.min(5)))
        }
        _ => ReductionSpec::new(kind, axis),
    }
}

/// Random clusters covering some output rows, each admitting a few reduced
/// intervals.
pub fn random_ranges(rng: &mut ChaCha8Rng, rows: usize, reduced: usize) -> RangeSpec {
    let mut spec = RangeSpec::new();
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + rng.gen_range(1..=rows.max(2) / 2)).min(rows);
        if rng.gen_bool(0.8) {
            let mut ivs = Vec::new();
            for _ in 0..rng.gen_range(0..=3) {
                let a = rng.gen_range(0..reduced);
                let b = rng.gen_range(a + 1..=reduced);
                ivs.push(a..b);
            }
            spec = spec.cluster(r0..r1, ivs);
        }
        r0 = r1;
    }
    spec
}

/// Norm-wise relative error of the engine's vector-Jacobian product for
/// `spec` against central finite differences of the primal output, for
/// every variable of the instance.
pub fn fd_check(engine: &genred::Engine, inst: &Instance<f64>, spec: ReductionSpec, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let primal = engine.evaluate(&inst.request(spec)).map_err(|e| e.to_string())?;
    let cot: Vec<f64> = (0..primal.values.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let phi = |inst: &Instance<f64>| -> f64 {
        let out = engine.evaluate(&inst.request(spec)).unwrap();
        out.values.iter().zip(&cot).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (k, (v, values, _)) in inst.data.iter().enumerate() {
        let g = engine
            .evaluate_vjp(&inst.request(spec), (v.category, v.slot), &cot)
            .map_err(|e| e.to_string())?;
        if g.len() != values.len() {
            return Err(format!("gradient of {v} has {} entries, expected {}", g.len(), values.len()));
        }
        let scale = values.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        let h = 1e-6 * scale;
        let mut fd = vec![0.0; values.len()];
        let mut work = inst.clone();
        for e in 0..values.len() {
            let x = values[e];
            work.data[k].1[e] = x + h;
            let up = phi(&work);
            work.data[k].1[e] = x - h;
            let down = phi(&work);
            work.data[k].1[e] = x;
            fd[e] = (up - down) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let err = if norm == 0.0 { diff } else { diff / norm };
        if !err.is_finite() {
            return Err(format!("non-finite gradient error for {v}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
