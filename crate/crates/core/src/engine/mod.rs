//! Tiled evaluation of reductions.
//!
//! Output rows are split into blocks of at most `B` rows. A block loads its
//! rows once, then streams the reduced index in tiles of at most `B` and
//! feeds each tile to every row of the block. Nothing proportional to the
//! number of (row, reduced index) pairs is ever allocated. Blocks are
//! independent and run in parallel; each output row is always accumulated
//! in the same order, so results do not depend on the number of workers.

mod dense;
mod memory;
mod program;

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{grad_reduction, GradError};
use crate::formula::{Category, Formula, FormulaError, VarSpec};
use crate::reduction::{two_sum, AccState, Axis, ReductionError, ReductionKind, ReductionSpec};
use crate::scalar::Scalar;

pub use dense::DenseOracle;
use memory::{Charge, MemCounter, Tracked};
use program::{Ctx, Phase, Program};

/// Default block edge length.
pub const DEFAULT_TILE: usize = 1024;

/// An input array bound to the variable `(category, slot)`.
///
/// `data` holds `prod(batch_shape) × rows × dim` values, row-major, where
/// `rows` is M for `I` variables, N for `J` variables and 1 for parameters.
/// `batch_shape` is aligned to the right of the request's batch shape; a
/// missing or size-1 dimension is broadcast.
#[derive(Clone, Debug)]
pub struct Binding<'a, T> {
    pub category: Category,
    pub slot: usize,
    pub data: &'a [T],
    pub batch_shape: Vec<usize>,
}

impl<'a, T> Binding<'a, T> {
    pub fn new(category: Category, slot: usize, data: &'a [T]) -> Self {
        Self {
            category,
            slot,
            data,
            batch_shape: Vec::new(),
        }
    }

    pub fn batched(category: Category, slot: usize, data: &'a [T], batch_shape: &[usize]) -> Self {
        Self {
            category,
            slot,
            data,
            batch_shape: batch_shape.to_vec(),
        }
    }
}

/// One cluster of a block-sparsity pattern: output rows `rows` interact only
/// with the reduced indices in `reduced`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeCluster {
    pub rows: Range<usize>,
    pub reduced: Vec<Range<usize>>,
}

/// Restricts a reduction to a union of (row interval × index interval)
/// rectangles.
///
/// Intervals are half-open and refer to the output axis and the reduced axis
/// of the request, whichever way the reduction runs. Row intervals must be
/// disjoint; rows outside every cluster get the reduction's neutral value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RangeSpec {
    pub clusters: Vec<RangeCluster>,
}

impl RangeSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cluster(mut self, rows: Range<usize>, reduced: Vec<Range<usize>>) -> Self {
        self.clusters.push(RangeCluster { rows, reduced });
        self
    }

    /// The same set of pairs, with the roles of the two axes exchanged.
    pub fn transposed(&self) -> RangeSpec {
        let mut cuts: Vec<usize> = self
            .clusters
            .iter()
            .flat_map(|c| c.reduced.iter().flat_map(|r| [r.start, r.end]))
            .collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut out = RangeSpec::new();
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let rows: Vec<Range<usize>> = self
                .clusters
                .iter()
                .filter(|c| c.reduced.iter().any(|r| r.start <= lo && hi <= r.end))
                .map(|c| c.rows.clone())
                .collect();
            if !rows.is_empty() {
                out = out.cluster(lo..hi, rows);
            }
        }
        out
    }

    /// Whether the pair (output row `row`, reduced index `col`) is admitted.
    pub fn admits(&self, row: usize, col: usize) -> bool {
        self.clusters
            .iter()
            .any(|c| c.rows.contains(&row) && c.reduced.iter().any(|r| r.contains(&col)))
    }
}

/// Everything needed to run one reduction.
#[derive(Clone, Debug)]
pub struct EvalRequest<'a, T> {
    pub formula: Formula,
    pub reduction: ReductionSpec,
    pub bindings: Vec<Binding<'a, T>>,
    pub ranges: Option<RangeSpec>,
    pub batch_shape: Vec<usize>,
    pub tile: usize,
    /// Number of `i` rows, for formulas with no bound `I` variable.
    pub rows_i: Option<usize>,
    /// Number of `j` rows, for formulas with no bound `J` variable.
    pub rows_j: Option<usize>,
}

impl<'a, T> EvalRequest<'a, T> {
    pub fn new(formula: Formula, reduction: ReductionSpec) -> Self {
        Self {
            formula,
            reduction,
            bindings: Vec::new(),
            ranges: None,
            batch_shape: Vec::new(),
            tile: DEFAULT_TILE,
            rows_i: None,
            rows_j: None,
        }
    }

    pub fn bind(mut self, binding: Binding<'a, T>) -> Self {
        self.bindings.push(binding);
        self
    }

    pub fn bind_i(self, slot: usize, data: &'a [T]) -> Self {
        self.bind(Binding::new(Category::I, slot, data))
    }

    pub fn bind_j(self, slot: usize, data: &'a [T]) -> Self {
        self.bind(Binding::new(Category::J, slot, data))
    }

    pub fn bind_p(self, slot: usize, data: &'a [T]) -> Self {
        self.bind(Binding::new(Category::P, slot, data))
    }

    pub fn with_ranges(mut self, ranges: RangeSpec) -> Self {
        self.ranges = Some(ranges);
        self
    }

    pub fn with_batch(mut self, batch_shape: &[usize]) -> Self {
        self.batch_shape = batch_shape.to_vec();
        self
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = tile;
        self
    }

    pub fn with_sizes(mut self, m: usize, n: usize) -> Self {
        self.rows_i = Some(m);
        self.rows_j = Some(n);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("no array is bound to {0}")]
    MissingBinding(VarSpec),
    #[error("{}({slot}, ..) is bound more than once", category.constructor())]
    DuplicateBinding { category: Category, slot: usize },
    #[error("binding for {var}: {reason}")]
    BindingShapeMismatch { var: VarSpec, reason: String },
    #[error("number of {} rows is unknown: bind a {} variable or set it explicitly", .0, .0)]
    MissingSize(Category),
    #[error("{0}")]
    RangeOutOfBounds(String),
    #[error("K = {k} exceeds the {n} indices of the reduced axis")]
    KTooLarge { k: usize, n: usize },
    #[error("tile size must be at least 1")]
    InvalidTile,
    #[error("dense evaluation needs {required} entries, above the cap of {cap}")]
    CapExceeded { required: u128, cap: u128 },
    #[error("cotangent has {got} entries, the output has {expected}")]
    CotangentShape { expected: usize, got: usize },
    #[error("cannot build worker pool: {0}")]
    ThreadPool(String),
}

/// Instrumentation of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalStats {
    /// Peak bytes of working memory, excluding inputs and outputs.
    pub peak_aux_bytes: usize,
    pub tiles: u64,
    pub pair_evaluations: u64,
    pub blocks: u64,
}

/// Result of a reduction.
///
/// `values` has shape `shape` = `batch × rows × value_width` and `indices`,
/// present for Max/Min and the Arg kinds, has `batch × rows × index_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput<T> {
    pub values: Vec<T>,
    pub indices: Option<Vec<i64>>,
    pub shape: Vec<usize>,
    pub index_width: usize,
    pub stats: EvalStats,
}

/// A variable, its data and the element offset of each batch entry.
pub(crate) type BoundVar<'a, T> = (VarSpec, &'a [T], Vec<usize>);

/// Row intervals, each with the reduced intervals it admits.
pub(crate) type Clusters = Vec<(Range<usize>, Vec<Range<usize>>)>;

/// Bound inputs of a request, checked against the formula.
pub(crate) struct Layout<'a, T> {
    pub m: usize,
    pub n: usize,
    pub batch_count: usize,
    /// Formula variables with their data and, per flat batch index, the
    /// element offset of that batch entry.
    pub vars: Vec<BoundVar<'a, T>>,
    /// Normalized clusters: sorted rows, merged reduced intervals.
    pub clusters: Option<Clusters>,
}

impl<T> Layout<'_, T> {
    pub fn out_rows(&self, axis: Axis) -> usize {
        match axis {
            Axis::OverJ => self.m,
            Axis::OverI => self.n,
        }
    }

    pub fn var(&self, v: &VarSpec) -> &(VarSpec, &[T], Vec<usize>) {
        self.vars
            .iter()
            .find(|e| e.0 == *v)
            .expect("formula variable in layout")
    }
}

fn shape_err(var: VarSpec, reason: String) -> EngineError {
    EngineError::BindingShapeMismatch { var, reason }
}

pub(crate) fn layout<'a, T: Copy>(req: &EvalRequest<'a, T>) -> Result<Layout<'a, T>, EngineError> {
    let outdim = req.formula.dim();
    req.reduction.validate(outdim)?;
    if req.tile == 0 {
        return Err(EngineError::InvalidTile);
    }
    for (k, b) in req.bindings.iter().enumerate() {
        if req.bindings[..k]
            .iter()
            .any(|o| o.category == b.category && o.slot == b.slot)
        {
            return Err(EngineError::DuplicateBinding {
                category: b.category,
                slot: b.slot,
            });
        }
    }
    let batch = &req.batch_shape;
    if batch.contains(&0) {
        return Err(EngineError::RangeOutOfBounds(
            "batch dimensions must be positive".into(),
        ));
    }
    let batch_count: usize = batch.iter().product();

    let mut sizes = [req.rows_i, req.rows_j];
    let mut bound = Vec::new();
    for v in req.formula.collect_vars() {
        let b = req
            .bindings
            .iter()
            .find(|b| b.category == v.category && b.slot == v.slot)
            .ok_or(EngineError::MissingBinding(*v))?;
        let bs = &b.batch_shape;
        if bs.len() > batch.len() {
            return Err(shape_err(
                *v,
                format!("batch shape {bs:?} has more dimensions than the request's {batch:?}"),
            ));
        }
        let pad = batch.len() - bs.len();
        for (k, &d) in bs.iter().enumerate() {
            if d != 1 && d != batch[pad + k] {
                return Err(shape_err(
                    *v,
                    format!("batch shape {bs:?} does not broadcast to {batch:?}"),
                ));
            }
        }
        let bprod: usize = bs.iter().product();
        let per_row = bprod * v.dim;
        if per_row == 0 || b.data.len() % per_row != 0 {
            return Err(shape_err(
                *v,
                format!(
                    "{} values do not form rows of dimension {} over batch {bs:?}",
                    b.data.len(),
                    v.dim
                ),
            ));
        }
        let rows = b.data.len() / per_row;
        match v.category {
            Category::P => {
                if rows != 1 {
                    return Err(shape_err(
                        *v,
                        format!("expected {} values, got {}", per_row, b.data.len()),
                    ));
                }
            }
            cat => {
                let slot = &mut sizes[if cat == Category::I { 0 } else { 1 }];
                match *slot {
                    Some(r) if r != rows => {
                        let what = if cat == Category::I { "M" } else { "N" };
                        return Err(shape_err(
                            *v,
                            format!("has {rows} rows but {what} = {r}"),
                        ));
                    }
                    _ => *slot = Some(rows),
                }
            }
        }
        // Element offset of every flat batch index.
        let mut offsets = Vec::with_capacity(batch_count);
        let mut idx = vec![0usize; batch.len()];
        for _ in 0..batch_count {
            let mut flat = 0;
            for (k, &d) in bs.iter().enumerate() {
                let i = if d == 1 { 0 } else { idx[pad + k] };
                flat = flat * d + i;
            }
            offsets.push(flat * rows * v.dim);
            for k in (0..batch.len()).rev() {
                idx[k] += 1;
                if idx[k] < batch[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        bound.push((*v, b.data, offsets));
    }
    let m = sizes[0].ok_or(EngineError::MissingSize(Category::I))?;
    let n = sizes[1].ok_or(EngineError::MissingSize(Category::J))?;
    let (out_rows, red_rows) = match req.reduction.axis {
        Axis::OverJ => (m, n),
        Axis::OverI => (n, m),
    };
    if req.reduction.kind == ReductionKind::ArgKMin && req.reduction.k > red_rows {
        return Err(EngineError::KTooLarge {
            k: req.reduction.k,
            n: red_rows,
        });
    }
    let clusters = match &req.ranges {
        None => None,
        Some(r) => Some(normalize_ranges(r, out_rows, red_rows)?),
    };
    Ok(Layout {
        m,
        n,
        batch_count,
        vars: bound,
        clusters,
    })
}

/// Checks bounds and disjointness, sorts clusters by row and merges each
/// cluster's reduced intervals into a sorted disjoint list.
fn normalize_ranges(
    r: &RangeSpec,
    out_rows: usize,
    red_rows: usize,
) -> Result<Clusters, EngineError> {
    let bad = |what: &str, iv: &Range<usize>, size: usize| {
        EngineError::RangeOutOfBounds(format!(
            "{what} interval {}..{} is not within 0..{size} or is empty",
            iv.start, iv.end
        ))
    };
    let mut out = Vec::with_capacity(r.clusters.len());
    for c in &r.clusters {
        if c.rows.start >= c.rows.end || c.rows.end > out_rows {
            return Err(bad("row", &c.rows, out_rows));
        }
        let mut ivs = c.reduced.clone();
        for iv in &ivs {
            if iv.start >= iv.end || iv.end > red_rows {
                return Err(bad("reduced", iv, red_rows));
            }
        }
        ivs.sort_by_key(|iv| iv.start);
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(ivs.len());
        for iv in ivs {
            match merged.last_mut() {
                Some(last) if iv.start <= last.end => last.end = last.end.max(iv.end),
                _ => merged.push(iv),
            }
        }
        out.push((c.rows.clone(), merged));
    }
    out.sort_by_key(|c| c.0.start);
    for w in out.windows(2) {
        if w[1].0.start < w[0].0.end {
            return Err(EngineError::RangeOutOfBounds(format!(
                "row intervals {}..{} and {}..{} overlap",
                w[0].0.start, w[0].0.end, w[1].0.start, w[1].0.end
            )));
        }
    }
    Ok(out)
}

/// Raw output pointer shared by workers that write disjoint rows.
#[derive(Clone, Copy)]
struct OutPtr<T>(*mut T);

unsafe impl<T: Send> Send for OutPtr<T> {}
unsafe impl<T: Send> Sync for OutPtr<T> {}

impl<T> OutPtr<T> {
    /// # Safety
    /// `start..start + len` must lie inside the allocation and must not be
    /// accessed through any other slice while the result is alive.
    unsafe fn slice<'s>(self, start: usize, len: usize) -> &'s mut [T] {
        std::slice::from_raw_parts_mut(self.0.add(start), len)
    }
}

/// Per-worker buffers.
struct Scratch<'c, T> {
    outer: Tracked<'c, T>,
    uni: Tracked<'c, T>,
    tile: Tracked<'c, T>,
    states: Vec<AccState<T>>,
    _states: Charge<'c>,
}

struct Plan<'p, 'a, T> {
    prog: &'p Program,
    init: AccState<T>,
    vw: usize,
    iw: usize,
    rows_cap: usize,
    stride: usize,
    outer_width: usize,
    outer_offsets: Vec<usize>,
    outer_vars: Vec<(usize, &'p BoundVar<'a, T>)>,
    inner_vars: Vec<(&'p BoundVar<'a, T>, usize)>,
    param_vars: Vec<&'p (VarSpec, &'a [T], Vec<usize>)>,
}

impl<'p, 'a, T: Scalar> Plan<'p, 'a, T> {
    fn scratch<'c>(&self, counter: &'c MemCounter) -> Scratch<'c, T> {
        let states: Vec<AccState<T>> = vec![self.init.clone(); self.rows_cap];
        let state_bytes = self.rows_cap
            * (std::mem::size_of::<AccState<T>>() + self.init.heap_bytes());
        Scratch {
            outer: Tracked::new(counter, self.rows_cap * self.outer_width, T::zero()),
            uni: Tracked::new(counter, self.prog.uniform_len(), T::zero()),
            tile: Tracked::new(counter, self.prog.tile_len(self.stride), T::zero()),
            states,
            _states: Charge::new(counter, state_bytes),
        }
    }

    /// Reduces `rows` output rows starting at `row0` of batch entry `b` over
    /// the reduced intervals `intervals`. Returns the number of tiles.
    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        s: &mut Scratch<'_, T>,
        b: usize,
        row0: usize,
        rows: usize,
        intervals: &[Range<usize>],
        values: &mut [T],
        indices: &mut [i64],
        lse: Option<(&mut [T], &mut [T])>,
    ) -> u64 {
        let stride = self.stride;
        let params: Vec<&[T]> = self
            .param_vars
            .iter()
            .map(|(v, data, offs)| &data[offs[b]..offs[b] + v.dim])
            .collect();
        for st in &mut s.states[..rows] {
            st.clone_from(&self.init);
        }
        let w = self.outer_width;
        for &(off, (v, data, offs)) in &self.outer_vars {
            let d = v.dim;
            let src = &data[offs[b] + row0 * d..offs[b] + (row0 + rows) * d];
            for (r, row) in src.chunks_exact(d).enumerate() {
                s.outer.buf[r * w + off..r * w + off + d].copy_from_slice(row);
            }
        }
        {
            let mut ctx = Ctx {
                uni: &mut s.uni.buf,
                tile: &mut s.tile.buf,
                stride,
                n: 0,
                outer_row: &[],
                outer_offsets: &self.outer_offsets,
                params: &params,
            };
            self.prog.run(Phase::Const, &mut ctx);
        }
        let root = self.prog.root_offset(stride);
        let mut tiles = 0;
        for iv in intervals {
            let mut t0 = iv.start;
            while t0 < iv.end {
                let n = stride.min(iv.end - t0);
                for &((v, data, offs), reg) in &self.inner_vars {
                    let d = v.dim;
                    let base = self.prog.reg(reg).offset * stride;
                    let src = &data[offs[b] + t0 * d..offs[b] + (t0 + n) * d];
                    let dst = &mut s.tile.buf[base..base + d * stride];
                    for (t, row) in src.chunks_exact(d).enumerate() {
                        for (c, &x) in row.iter().enumerate() {
                            dst[c * stride + t] = x;
                        }
                    }
                }
                let mut ctx = Ctx {
                    uni: &mut s.uni.buf,
                    tile: &mut s.tile.buf,
                    stride,
                    n,
                    outer_row: &[],
                    outer_offsets: &self.outer_offsets,
                    params: &params,
                };
                self.prog.run(Phase::Inner, &mut ctx);
                for r in 0..rows {
                    let mut ctx = Ctx {
                        uni: &mut s.uni.buf,
                        tile: &mut s.tile.buf,
                        stride,
                        n,
                        outer_row: &s.outer.buf[r * w..(r + 1) * w],
                        outer_offsets: &self.outer_offsets,
                        params: &params,
                    };
                    self.prog.run(Phase::Outer, &mut ctx);
                    self.prog.run(Phase::Pair, &mut ctx);
                    s.states[r].accumulate_lanes(&s.tile.buf[root..], stride, n, t0 as i64);
                }
                tiles += 1;
                t0 += n;
            }
        }
        for (r, st) in s.states[..rows].iter().enumerate() {
            st.finalize_into(
                &mut values[r * self.vw..(r + 1) * self.vw],
                &mut indices[r * self.iw..(r + 1) * self.iw],
            );
        }
        if let Some((m, sv)) = lse {
            for (r, st) in s.states[..rows].iter().enumerate() {
                let (a, c) = st.lse_parts().expect("LogSumExp state");
                m[r] = a;
                sv[r] = c;
            }
        }
        tiles
    }
}

/// Per-row `(m, s)` normalizers of a LogSumExp forward pass.
pub(crate) struct LseState<T> {
    pub m: Vec<T>,
    pub s: Vec<T>,
}

/// Evaluates reductions. Cheap to share; safe for concurrent use.
pub struct Engine {
    pool: Option<rayon::ThreadPool>,
    last: Mutex<Option<EvalStats>>,
    pairs: AtomicU64,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("workers", &self.workers())
            .finish()
    }
}

impl Engine {
    /// An engine running on rayon's global pool.
    pub fn new() -> Self {
        Self {
            pool: None,
            last: Mutex::new(None),
            pairs: AtomicU64::new(0),
        }
    }

    /// An engine with its own pool of `workers` threads.
    pub fn with_workers(workers: usize) -> Result<Self, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| EngineError::ThreadPool(e.to_string()))?;
        Ok(Self {
            pool: Some(pool),
            ..Self::new()
        })
    }

    pub fn workers(&self) -> usize {
        match &self.pool {
            Some(p) => p.current_num_threads(),
            None => rayon::current_num_threads(),
        }
    }

    /// Statistics of the most recent evaluation.
    pub fn last_stats(&self) -> Option<EvalStats> {
        *self.last.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Peak auxiliary bytes of the most recent evaluation.
    pub fn memory_report(&self) -> Option<usize> {
        self.last_stats().map(|s| s.peak_aux_bytes)
    }

    /// Pair evaluations performed by this engine since it was created.
    pub fn pair_evaluations(&self) -> u64 {
        self.pairs.load(Ordering::Relaxed)
    }

    pub fn evaluate<T: Scalar>(&self, req: &EvalRequest<'_, T>) -> Result<EvalOutput<T>, EngineError> {
        self.run(req, false).map(|r| r.0)
    }

    fn run<T: Scalar>(
        &self,
        req: &EvalRequest<'_, T>,
        keep_lse: bool,
    ) -> Result<(EvalOutput<T>, Option<LseState<T>>), EngineError> {
        let layout = layout(req)?;
        let result = match &self.pool {
            Some(p) => p.install(|| execute(req, &layout, keep_lse)),
            None => execute(req, &layout, keep_lse),
        };
        *self.last.lock().unwrap_or_else(|e| e.into_inner()) = Some(result.0.stats);
        self.pairs
            .fetch_add(result.0.stats.pair_evaluations, Ordering::Relaxed);
        Ok(result)
    }

    /// Vector-Jacobian product of a Sum or LogSumExp reduction with respect
    /// to the array bound to `(category, slot)`.
    ///
    /// `cotangent` has the shape of the primal output. The result has the
    /// shape of the differentiated binding: contributions are summed over
    /// batch dimensions the binding is broadcast along.
    pub fn evaluate_vjp<T: Scalar>(
        &self,
        req: &EvalRequest<'_, T>,
        wrt: (Category, usize),
        cotangent: &[T],
    ) -> Result<Vec<T>, EngineError> {
        let kind = req.reduction.kind;
        if !kind.is_differentiable() {
            return Err(GradError::NonDifferentiableReduction(kind).into());
        }
        let var = req.formula.find_var(wrt.0, wrt.1).ok_or_else(|| {
            let missing = VarSpec {
                category: wrt.0,
                slot: wrt.1,
                dim: 1,
            };
            EngineError::Grad(GradError::VariableNotPresent(missing))
        })?;
        let lay = layout(req)?;
        let axis = req.reduction.axis;
        let out_rows = lay.out_rows(axis);
        let outdim = req.formula.dim();
        let expected = lay.batch_count * out_rows * outdim;
        if cotangent.len() != expected {
            return Err(EngineError::CotangentShape {
                expected,
                got: cotangent.len(),
            });
        }
        let g = grad_reduction(&req.reduction, &req.formula, var, outdim)?;
        let lse = if g.lse_aux.is_some() {
            self.run(req, true)?.1
        } else {
            None
        };
        let out_cat = g.gradin.category;
        let mut greq = EvalRequest {
            formula: g.formula.clone(),
            reduction: g.reduction,
            bindings: req.bindings.clone(),
            ranges: req.ranges.clone(),
            batch_shape: req.batch_shape.clone(),
            tile: req.tile,
            rows_i: Some(lay.m),
            rows_j: Some(lay.n),
        };
        if g.reduction.axis != axis {
            greq.ranges = req.ranges.as_ref().map(RangeSpec::transposed);
        }
        greq.bindings.push(Binding::batched(
            out_cat,
            g.gradin.slot,
            cotangent,
            &req.batch_shape,
        ));
        if let (Some((mv, sv)), Some(st)) = (g.lse_aux, lse.as_ref()) {
            greq.bindings
                .push(Binding::batched(out_cat, mv.slot, &st.m, &req.batch_shape));
            greq.bindings
                .push(Binding::batched(out_cat, sv.slot, &st.s, &req.batch_shape));
        }
        let out = self.evaluate(&greq)?;

        // Fold the per-batch, per-row result into the binding's shape.
        let binding = req
            .bindings
            .iter()
            .find(|b| b.category == wrt.0 && b.slot == wrt.1)
            .expect("validated binding");
        let (_, _, offsets) = lay.var(&var);
        let rows = if g.sum_rows { 1 } else { out.shape[out.shape.len() - 2] };
        let per_batch = out.values.len() / lay.batch_count.max(1);
        let mut hi = vec![0f64; binding.data.len()];
        let mut lo = vec![0f64; binding.data.len()];
        for (b, chunk) in out.values.chunks(per_batch.max(1)).enumerate().take(lay.batch_count) {
            let base = offsets[b];
            for (k, &v) in chunk.iter().enumerate() {
                let dst = if g.sum_rows { base + k % var.dim } else { base + k };
                debug_assert!(dst < base + rows * var.dim);
                let (s, e) = two_sum(hi[dst], v.as_f64());
                hi[dst] = s;
                lo[dst] += e;
            }
        }
        Ok(hi
            .iter()
            .zip(&lo)
            .map(|(&h, &l)| T::from_f64(h + l))
            .collect())
    }
}

fn execute<T: Scalar>(
    req: &EvalRequest<'_, T>,
    layout: &Layout<'_, T>,
    keep_lse: bool,
) -> (EvalOutput<T>, Option<LseState<T>>) {
    let spec = req.reduction;
    let outdim = req.formula.dim();
    let (outer_cat, out_rows, red_rows) = match spec.axis {
        Axis::OverJ => (Category::I, layout.m, layout.n),
        Axis::OverI => (Category::J, layout.n, layout.m),
    };
    let vw = spec.value_width(outdim);
    let iw = spec.index_width(outdim);
    let batch_count = layout.batch_count;
    let mut values = vec![T::zero(); batch_count * out_rows * vw];
    let mut indices = vec![0i64; batch_count * out_rows * iw];
    let lse_len = if keep_lse { batch_count * out_rows } else { 0 };
    let mut lse_m = vec![T::zero(); lse_len];
    let mut lse_s = vec![T::zero(); lse_len];

    let counter = MemCounter::new();
    let prog = Program::compile(&req.formula, outer_cat);
    let init = AccState::init(&spec, outdim).expect("validated reduction");
    let mut outer_offsets = Vec::new();
    let mut outer_vars = Vec::new();
    let mut outer_width = 0;
    for v in &prog.outer_vars {
        outer_offsets.push(outer_width);
        outer_vars.push((outer_width, layout.var(v)));
        outer_width += v.dim;
    }
    let plan = Plan {
        prog: &prog,
        init,
        vw,
        iw,
        rows_cap: req.tile.min(out_rows).max(1),
        stride: req.tile.min(red_rows).max(1),
        outer_width,
        outer_offsets,
        outer_vars,
        inner_vars: prog
            .inner_vars
            .iter()
            .map(|(v, r)| (layout.var(v), *r))
            .collect(),
        param_vars: prog.param_vars.iter().map(|v| layout.var(v)).collect(),
    };

    let full = [(0..out_rows, vec![0..red_rows])];
    let clusters: &[(Range<usize>, Vec<Range<usize>>)] = match &layout.clusters {
        Some(c) => c,
        None if out_rows > 0 => &full,
        None => &[],
    };
    // Rows not covered by any cluster finalize the neutral state.
    if layout.clusters.is_some() {
        let neutral = plan.init.finalize();
        let mut covered = clusters.iter().map(|c| c.0.clone()).peekable();
        let mut row = 0;
        while row < out_rows {
            if let Some(c) = covered.peek() {
                if c.start <= row {
                    row = c.end;
                    covered.next();
                    continue;
                }
            }
            for b in 0..batch_count {
                let at = b * out_rows + row;
                values[at * vw..(at + 1) * vw].copy_from_slice(&neutral.values);
                indices[at * iw..(at + 1) * iw].copy_from_slice(&neutral.indices);
                if keep_lse {
                    lse_m[at] = T::neg_infinity();
                    lse_s[at] = T::zero();
                }
            }
            row += 1;
        }
    }

    let tile = req.tile;
    let mut first_block = Vec::with_capacity(clusters.len() + 1);
    let mut per_batch = 0usize;
    for c in clusters {
        first_block.push(per_batch);
        per_batch += (c.0.len()).div_ceil(tile);
    }
    let total = per_batch * batch_count;

    let tiles = AtomicU64::new(0);
    let pairs = AtomicU64::new(0);
    let pool: Mutex<Vec<Scratch<'_, T>>> = Mutex::new(Vec::new());
    let (vp, ip) = (OutPtr(values.as_mut_ptr()), OutPtr(indices.as_mut_ptr()));
    let (mp, sp) = (OutPtr(lse_m.as_mut_ptr()), OutPtr(lse_s.as_mut_ptr()));
    (0..total).into_par_iter().for_each(|blk| {
        let b = blk / per_batch;
        let local = blk % per_batch;
        let c = first_block.partition_point(|&f| f <= local) - 1;
        let (rows_iv, reduced) = &clusters[c];
        let row0 = rows_iv.start + (local - first_block[c]) * tile;
        let rows = tile.min(rows_iv.end - row0);
        let at = b * out_rows + row0;
        // SAFETY: blocks map to disjoint row ranges of disjoint clusters,
        // and each buffer holds batch_count * out_rows rows of its width.
        let (vals, idx, lse) = unsafe {
            (
                vp.slice(at * vw, rows * vw),
                ip.slice(at * iw, rows * iw),
                keep_lse.then(|| (mp.slice(at, rows), sp.slice(at, rows))),
            )
        };
        let mut scratch = pool
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop()
            .unwrap_or_else(|| plan.scratch(&counter));
        let t = plan.run_block(&mut scratch, b, row0, rows, reduced, vals, idx, lse);
        pool.lock().unwrap_or_else(|e| e.into_inner()).push(scratch);
        let admitted: usize = reduced.iter().map(|r| r.len()).sum();
        tiles.fetch_add(t, Ordering::Relaxed);
        pairs.fetch_add((rows * admitted) as u64, Ordering::Relaxed);
    });
    drop(pool);

    let mut shape = req.batch_shape.clone();
    shape.extend([out_rows, vw]);
    let stats = EvalStats {
        peak_aux_bytes: counter.peak(),
        tiles: tiles.into_inner(),
        pair_evaluations: pairs.into_inner(),
        blocks: total as u64,
    };
    let output = EvalOutput {
        values,
        indices: (iw > 0).then_some(indices),
        shape,
        index_width: iw,
        stats,
    };
    let lse = keep_lse.then_some(LseState { m: lse_m, s: lse_s });
    (output, lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_formula;

    fn gaussian() -> Formula {
        parse_formula("Exp(-SqDist(Vi(0,3),Vj(0,3))) * Vj(1,1)").unwrap()
    }

    #[test]
    fn single_pair_gaussian_is_one() {
        let f = gaussian();
        let z = [0.0f64; 3];
        let b = [1.0];
        let req = EvalRequest::new(f, ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
            .bind_i(0, &z)
            .bind_j(0, &z)
            .bind_j(1, &b);
        let out = Engine::new().evaluate(&req).unwrap();
        assert_eq!(out.values, vec![1.0]);
        assert_eq!(out.shape, vec![1, 1]);
    }

    #[test]
    fn argkmin_finds_exact_copy() {
        let f = parse_formula("SqDist(Vi(0,2),Vj(0,2))").unwrap();
        let y: Vec<f64> = (0..8).flat_map(|j| [j as f64 * 0.37, 1.0 - j as f64]).collect();
        let x = [y[10], y[11]];
        let req = EvalRequest::new(f, ReductionSpec::arg_k_min(Axis::OverJ, 1))
            .bind_i(0, &x)
            .bind_j(0, &y);
        let out = Engine::new().evaluate(&req).unwrap();
        assert_eq!(out.indices.unwrap(), vec![5]);
    }

    #[test]
    fn vjp_of_product() {
        let f = parse_formula("Mult(Vi(0,1),Vj(0,1))").unwrap();
        let (x, y) = ([1.0f64, 2.0], [3.0, 4.0, 5.0]);
        let req = EvalRequest::new(f, ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
            .bind_i(0, &x)
            .bind_j(0, &y);
        let e = Engine::new();
        assert_eq!(e.evaluate_vjp(&req, (Category::J, 0), &[1.0, 1.0]).unwrap(), vec![3.0; 3]);
        assert_eq!(e.evaluate_vjp(&req, (Category::I, 0), &[1.0, 1.0]).unwrap(), vec![12.0; 2]);
        assert_eq!(e.evaluate_vjp(&req, (Category::J, 0), &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn binding_errors() {
        let f = gaussian();
        let x = [0.0f64; 4];
        let req = EvalRequest::new(f.clone(), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
            .bind_i(0, &x);
        assert!(matches!(
            Engine::new().evaluate(&req),
            Err(EngineError::BindingShapeMismatch { .. })
        ));
        let x = [0.0f64; 3];
        let req = EvalRequest::new(f, ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
            .bind_i(0, &x);
        assert!(matches!(
            Engine::new().evaluate(&req),
            Err(EngineError::MissingBinding(_))
        ));
    }

    #[test]
    fn ranges_are_checked() {
        let f = parse_formula("Vi(0,1)*Vj(0,1)").unwrap();
        let (x, y) = ([1.0f64, 2.0], [3.0, 4.0, 5.0]);
        let req = |r: RangeSpec| {
            EvalRequest::new(f.clone(), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
                .bind_i(0, &x)
                .bind_j(0, &y)
                .with_ranges(r)
        };
        let e = Engine::new();
        assert!(matches!(
            e.evaluate(&req(RangeSpec::new().cluster(0..1, vec![0..4]))),
            Err(EngineError::RangeOutOfBounds(_))
        ));
        assert!(matches!(
            e.evaluate(&req(RangeSpec::new().cluster(0..2, vec![0..1]).cluster(1..2, vec![0..1]))),
            Err(EngineError::RangeOutOfBounds(_))
        ));
        let out = e
            .evaluate(&req(RangeSpec::new().cluster(1..2, vec![0..1, 2..3])))
            .unwrap();
        assert_eq!(out.values, vec![0.0, 16.0]);
    }

    #[test]
    fn transposed_ranges_admit_the_same_pairs() {
        let r = RangeSpec::new()
            .cluster(0..3, vec![0..2, 5..7])
            .cluster(4..6, vec![1..6]);
        let t = r.transposed();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(r.admits(i, j), t.admits(j, i), "({i}, {j})");
            }
        }
    }
}
