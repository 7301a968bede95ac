//! Streaming, mergeable accumulators for every reduction kind.
//!
//! A reduction row is folded one value (or one tile of values) at a time into
//! an [`AccState`]; partial states from disjoint index sets combine with
//! [`AccState::merge`]. Ties between equal values always resolve to the
//! smallest index, and NaN never wins an extremum or a top-k slot over a
//! number, so results do not depend on how the index range was split.

use std::cmp::Ordering;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReductionKind {
    Sum,
    LogSumExp,
    Max,
    Min,
    ArgMax,
    ArgMin,
    ArgKMin,
}

impl ReductionKind {
    pub const ALL: [ReductionKind; 7] = [
        ReductionKind::Sum,
        ReductionKind::LogSumExp,
        ReductionKind::Max,
        ReductionKind::Min,
        ReductionKind::ArgMax,
        ReductionKind::ArgMin,
        ReductionKind::ArgKMin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReductionKind::Sum => "Sum",
            ReductionKind::LogSumExp => "LogSumExp",
            ReductionKind::Max => "Max",
            ReductionKind::Min => "Min",
            ReductionKind::ArgMax => "ArgMax",
            ReductionKind::ArgMin => "ArgMin",
            ReductionKind::ArgKMin => "ArgKMin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Kinds whose result is an index array.
    pub fn is_arg(self) -> bool {
        matches!(
            self,
            ReductionKind::ArgMax | ReductionKind::ArgMin | ReductionKind::ArgKMin
        )
    }

    pub fn is_differentiable(self) -> bool {
        matches!(self, ReductionKind::Sum | ReductionKind::LogSumExp)
    }
}

/// Which index is reduced away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Axis 0: reduce over `j`, one output row per `i`.
    OverJ,
    /// Axis 1: reduce over `i`, one output row per `j`.
    OverI,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::OverJ => 0,
            Axis::OverI => 1,
        }
    }

    pub fn from_index(axis: usize) -> Option<Axis> {
        match axis {
            0 => Some(Axis::OverJ),
            1 => Some(Axis::OverI),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReductionSpec {
    pub kind: ReductionKind,
    pub axis: Axis,
    /// Number of neighbours kept by `ArgKMin`; 1 for every other kind.
    pub k: usize,
}

impl ReductionSpec {
    pub fn new(kind: ReductionKind, axis: Axis) -> Self {
        Self { kind, axis, k: 1 }
    }

    pub fn arg_k_min(axis: Axis, k: usize) -> Self {
        Self {
            kind: ReductionKind::ArgKMin,
            axis,
            k,
        }
    }

    /// Checks that this reduction can run on a formula of dimension `outdim`.
    pub fn validate(&self, outdim: usize) -> Result<(), ReductionError> {
        if self.k == 0 {
            return Err(ReductionError::InvalidK(0));
        }
        let scalar_only = matches!(
            self.kind,
            ReductionKind::LogSumExp
                | ReductionKind::ArgMax
                | ReductionKind::ArgMin
                | ReductionKind::ArgKMin
        );
        if scalar_only && outdim != 1 {
            return Err(ReductionError::UnsupportedDim {
                kind: self.kind,
                outdim,
            });
        }
        Ok(())
    }

    /// Values per output row.
    pub fn value_width(&self, outdim: usize) -> usize {
        match self.kind {
            ReductionKind::Sum | ReductionKind::LogSumExp | ReductionKind::Max | ReductionKind::Min => {
                outdim
            }
            ReductionKind::ArgMax | ReductionKind::ArgMin => 1,
            ReductionKind::ArgKMin => self.k,
        }
    }

    /// Indices per output row (0 when the kind reports no indices).
    pub fn index_width(&self, outdim: usize) -> usize {
        match self.kind {
            ReductionKind::Sum | ReductionKind::LogSumExp => 0,
            ReductionKind::Max | ReductionKind::Min => outdim,
            ReductionKind::ArgMax | ReductionKind::ArgMin => 1,
            ReductionKind::ArgKMin => self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReductionError {
    #[error("{} supports only scalar formulas, got dimension {outdim}", kind.name())]
    UnsupportedDim { kind: ReductionKind, outdim: usize },
    #[error("K must be at least 1, got {0}")]
    InvalidK(usize),
}

/// Error-free transformation `a + b = s + e`. The error term is dropped when
/// the sum overflows so infinities do not turn into NaN.
#[inline(always)]
pub(crate) fn two_sum<T: Scalar>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bp = s - a;
    let e = (a - (s - bp)) + (b - bp);
    (s, if s.is_finite() { e } else { T::zero() })
}

/// Orders `(value, index)` keys ascending, NaN after every number, ties by
/// index.
#[inline]
pub fn key_cmp<T: Scalar>(a: (T, i64), b: (T, i64)) -> Ordering {
    match (a.0.is_nan(), b.0.is_nan()) {
        (false, false) => a
            .0
            .partial_cmp(&b.0)
            .expect("non-NaN")
            .then(a.1.cmp(&b.1)),
        (true, true) => a.1.cmp(&b.1),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
    }
}

const LANES: usize = 16;

/// Running state of one output row.
#[derive(Clone, Debug, PartialEq)]
pub enum AccState<T> {
    /// Compensated sums, `LANES` per coordinate: index `j` of coordinate
    /// `c` goes to slot `c * LANES + j mod LANES`. Lanes are combined in a
    /// fixed order when the row is finalized, so the result depends only on
    /// which indices were folded in, not on how they were split into tiles.
    Sum { hi: Vec<T>, lo: Vec<T> },
    /// Running extremum per coordinate and where it was found (`-1` while
    /// nothing has been seen).
    Extremum {
        largest: bool,
        values: Vec<T>,
        indices: Vec<i64>,
    },
    /// The `k` smallest `(value, index)` pairs seen so far, sorted.
    KMin { k: usize, items: Vec<(T, i64)> },
    /// `log Σ e^v = m + log s`.
    LogSumExp { m: T, s: T },
}

/// Final values and indices of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct Finalized<T> {
    pub values: Vec<T>,
    pub indices: Vec<i64>,
}

impl<T: Scalar> AccState<T> {
    /// The neutral state for `spec` over a formula of dimension `outdim`.
    pub fn init(spec: &ReductionSpec, outdim: usize) -> Result<Self, ReductionError> {
        spec.validate(outdim)?;
        Ok(match spec.kind {
            ReductionKind::Sum => AccState::Sum {
                hi: vec![T::zero(); outdim * LANES],
                lo: vec![T::zero(); outdim * LANES],
            },
            ReductionKind::Max | ReductionKind::ArgMax => AccState::Extremum {
                largest: true,
                values: vec![T::neg_infinity(); outdim],
                indices: vec![-1; outdim],
            },
            ReductionKind::Min | ReductionKind::ArgMin => AccState::Extremum {
                largest: false,
                values: vec![T::infinity(); outdim],
                indices: vec![-1; outdim],
            },
            ReductionKind::ArgKMin => AccState::KMin {
                k: spec.k,
                items: Vec::with_capacity(spec.k),
            },
            ReductionKind::LogSumExp => AccState::LogSumExp {
                m: T::neg_infinity(),
                s: T::zero(),
            },
        })
    }

    /// Approximate heap footprint, for memory accounting.
    pub fn heap_bytes(&self) -> usize {
        let t = std::mem::size_of::<T>();
        match self {
            AccState::Sum { hi, .. } => 2 * hi.len() * t,
            AccState::Extremum { values, .. } => values.len() * (t + 8),
            AccState::KMin { k, .. } => k * std::mem::size_of::<(T, i64)>(),
            AccState::LogSumExp { .. } => 0,
        }
    }

    /// Folds in the formula value `value` found at reduced index `index`.
    pub fn accumulate(&mut self, value: &[T], index: i64) {
        match self {
            AccState::Sum { hi, lo } => {
                let lane = index.rem_euclid(LANES as i64) as usize;
                for (c, &v) in value.iter().enumerate() {
                    let at = c * LANES + lane;
                    let (s, e) = two_sum(hi[at], v);
                    hi[at] = s;
                    lo[at] = lo[at] + e;
                }
            }
            AccState::Extremum {
                largest,
                values,
                indices,
            } => {
                for ((best, at), &v) in values.iter_mut().zip(indices.iter_mut()).zip(value) {
                    if beats(*largest, v, index, *best, *at) {
                        *best = v;
                        *at = index;
                    }
                }
            }
            AccState::KMin { k, items } => insert_kmin(*k, items, value[0], index),
            AccState::LogSumExp { m, s } => lse_push(m, s, value[0]),
        }
    }

    /// Folds in `n` consecutive indices `first..first + n` whose values are
    /// stored coordinate-major: coordinate `c` of lane `t` is
    /// `values[c * stride + t]`.
    ///
    pub fn accumulate_lanes(&mut self, values: &[T], stride: usize, n: usize, first: i64) {
        match self {
            AccState::Sum { hi, lo } => {
                for (c, (h, l)) in hi
                    .chunks_exact_mut(LANES)
                    .zip(lo.chunks_exact_mut(LANES))
                    .enumerate()
                {
                    add_run(h, l, &values[c * stride..c * stride + n], first);
                }
            }
            AccState::Extremum {
                largest,
                values: best,
                indices,
            } => {
                for (c, (b, at)) in best.iter_mut().zip(indices.iter_mut()).enumerate() {
                    for (t, &v) in values[c * stride..c * stride + n].iter().enumerate() {
                        let j = first + t as i64;
                        if beats(*largest, v, j, *b, *at) {
                            *b = v;
                            *at = j;
                        }
                    }
                }
            }
            AccState::KMin { k, items } => {
                for (t, &v) in values[..n].iter().enumerate() {
                    insert_kmin(*k, items, v, first + t as i64);
                }
            }
            AccState::LogSumExp { m, s } => {
                let (mt, st) = lse_tile(&values[..n]);
                lse_merge(m, s, mt, st);
            }
        }
    }

    /// Combines the partial state of a disjoint index set into `self`.
    pub fn merge(&mut self, other: &AccState<T>) {
        match (self, other) {
            (AccState::Sum { hi, lo }, AccState::Sum { hi: h2, lo: l2 }) => {
                for (((h, l), &oh), &ol) in hi.iter_mut().zip(lo.iter_mut()).zip(h2).zip(l2) {
                    let (s, e) = two_sum(*h, oh);
                    *h = s;
                    *l = *l + ol + e;
                }
            }
            (
                AccState::Extremum {
                    largest,
                    values,
                    indices,
                },
                AccState::Extremum {
                    values: v2,
                    indices: i2,
                    ..
                },
            ) => {
                for (((b, at), &v), &j) in values.iter_mut().zip(indices.iter_mut()).zip(v2).zip(i2) {
                    if j >= 0 && beats(*largest, v, j, *b, *at) {
                        *b = v;
                        *at = j;
                    }
                }
            }
            (AccState::KMin { k, items }, AccState::KMin { items: other, .. }) => {
                for &(v, j) in other {
                    insert_kmin(*k, items, v, j);
                }
            }
            (AccState::LogSumExp { m, s }, AccState::LogSumExp { m: m2, s: s2 }) => {
                lse_merge(m, s, *m2, *s2)
            }
            _ => panic!("merging accumulators of different kinds"),
        }
    }

    /// `(m, s)` of a LogSumExp state.
    pub fn lse_parts(&self) -> Option<(T, T)> {
        match self {
            AccState::LogSumExp { m, s } => Some((*m, *s)),
            _ => None,
        }
    }

    pub fn finalize(&self) -> Finalized<T> {
        match self {
            AccState::Sum { hi, lo } => Finalized {
                values: hi
                    .chunks_exact(LANES)
                    .zip(lo.chunks_exact(LANES))
                    .map(|(h, l)| combine_lanes(h, l))
                    .collect(),
                indices: Vec::new(),
            },
            AccState::Extremum {
                values, indices, ..
            } => Finalized {
                values: values.clone(),
                indices: indices.clone(),
            },
            AccState::KMin { k, items } => {
                let mut values: Vec<T> = items.iter().map(|p| p.0).collect();
                let mut indices: Vec<i64> = items.iter().map(|p| p.1).collect();
                values.resize(*k, T::infinity());
                indices.resize(*k, -1);
                Finalized { values, indices }
            }
            AccState::LogSumExp { m, s } => Finalized {
                values: vec![lse_value(*m, *s)],
                indices: Vec::new(),
            },
        }
    }

    /// Writes the final row into preallocated slices of the widths given by
    /// [`ReductionSpec::value_width`] and [`ReductionSpec::index_width`].
    pub fn finalize_into(&self, values: &mut [T], indices: &mut [i64]) {
        match self {
            AccState::Sum { hi, lo } => {
                for ((o, h), l) in values
                    .iter_mut()
                    .zip(hi.chunks_exact(LANES))
                    .zip(lo.chunks_exact(LANES))
                {
                    *o = combine_lanes(h, l);
                }
            }
            AccState::LogSumExp { m, s } => values[0] = lse_value(*m, *s),
            _ => {
                let f = self.finalize();
                values.copy_from_slice(&f.values);
                indices.copy_from_slice(&f.indices);
            }
        }
    }
}

#[inline]
fn beats<T: Scalar>(largest: bool, v: T, j: i64, best: T, at: i64) -> bool {
    if v.is_nan() {
        return false;
    }
    if at < 0 {
        return true;
    }
    let strictly = if largest { v > best } else { v < best };
    strictly || (v == best && j < at)
}

fn insert_kmin<T: Scalar>(k: usize, items: &mut Vec<(T, i64)>, v: T, j: i64) {
    if items.len() == k {
        if let Some(&last) = items.last() {
            if key_cmp((v, j), last) != Ordering::Less {
                return;
            }
        }
        items.pop();
    }
    let at = items.partition_point(|&p| key_cmp(p, (v, j)) == Ordering::Less);
    items.insert(at, (v, j));
}

fn lse_value<T: Scalar>(m: T, s: T) -> T {
    if m == T::neg_infinity() {
        T::neg_infinity()
    } else if m == T::infinity() {
        m
    } else {
        m + s.ln()
    }
}

fn lse_push<T: Scalar>(m: &mut T, s: &mut T, v: T) {
    if m.is_nan() || v.is_nan() {
        *m = T::nan();
        *s = T::nan();
    } else if v == T::neg_infinity() {
    } else if v > *m {
        *s = *s * (*m - v).exponential() + T::one();
        *m = v;
    } else if v == *m {
        *s = *s + T::one();
    } else {
        *s = *s + (v - *m).exponential();
    }
}

fn lse_merge<T: Scalar>(m: &mut T, s: &mut T, m2: T, s2: T) {
    if m.is_nan() || m2.is_nan() || s2.is_nan() {
        *m = T::nan();
        *s = T::nan();
    } else if m2 == T::neg_infinity() {
    } else if *m == T::neg_infinity() {
        *m = m2;
        *s = s2;
    } else if m2 > *m {
        *s = *s * (*m - m2).exponential() + s2;
        *m = m2;
    } else if m2 == *m {
        *s = *s + s2;
    } else {
        *s = *s + s2 * (m2 - *m).exponential();
    }
}

/// `(max, Σ e^{v - max})` of a tile.
fn lse_tile<T: Scalar>(values: &[T]) -> (T, T) {
    let mut m = T::neg_infinity();
    let mut nan = false;
    for &v in values {
        nan |= v.is_nan();
        m = if v > m { v } else { m };
    }
    if nan {
        return (T::nan(), T::nan());
    }
    if m == T::neg_infinity() {
        return (m, T::zero());
    }
    if m == T::infinity() {
        let count = values.iter().filter(|&&v| v == m).count();
        return (m, T::from_f64(count as f64));
    }
    let mut acc = [T::zero(); LANES];
    let mut chunks = values.chunks_exact(LANES);
    for chunk in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a = *a + (v - m).exponential();
        }
    }
    for (a, &v) in acc.iter_mut().zip(chunks.remainder()) {
        *a = *a + (v - m).exponential();
    }
    (m, acc.iter().fold(T::zero(), |x, &y| x + y))
}

/// Adds the run `values`, whose first element has index `first`, into the
/// lane accumulators of one coordinate.
#[inline]
fn add_run<T: Scalar>(hi: &mut [T], lo: &mut [T], values: &[T], first: i64) {
    let hi: &mut [T; LANES] = hi.try_into().expect("LANES accumulators");
    let lo: &mut [T; LANES] = lo.try_into().expect("LANES accumulators");
    let (mut h, mut l) = (*hi, *lo);
    let mut lane = first.rem_euclid(LANES as i64) as usize;
    let mut t = 0;
    while lane != 0 && t < values.len() {
        let (s, e) = two_sum(h[lane], values[t]);
        h[lane] = s;
        l[lane] = l[lane] + e;
        t += 1;
        lane = (lane + 1) % LANES;
    }
    let mut chunks = values[t..].chunks_exact(LANES);
    for chunk in &mut chunks {
        for k in 0..LANES {
            let (s, e) = two_sum(h[k], chunk[k]);
            h[k] = s;
            l[k] = l[k] + e;
        }
    }
    for (k, &v) in chunks.remainder().iter().enumerate() {
        let (s, e) = two_sum(h[k], v);
        h[k] = s;
        l[k] = l[k] + e;
    }
    *hi = h;
    *lo = l;
}

fn combine_lanes<T: Scalar>(hi: &[T], lo: &[T]) -> T {
    let mut s = T::zero();
    let mut e = T::zero();
    for (&h, &l) in hi.iter().zip(lo) {
        let (s2, e2) = two_sum(s, h);
        s = s2;
        e = e + e2 + l;
    }
    if s.is_finite() {
        s + e
    } else {
        s
    }
}
