//! Reference evaluation by materializing every pair.

use std::cmp::Ordering;

use super::memory::{MemCounter, Tracked};
use super::{layout, EngineError, EvalOutput, EvalRequest, EvalStats};
use crate::formula::{Category, VarSpec};
use crate::reduction::{Axis, ReductionKind};
use crate::scalar::Scalar;

/// Evaluates a request by building the full `rows × reduced × outdim` table
/// of formula values and reducing it directly, with exact summation.
///
/// Meant as ground truth for tests and as the "dense" strategy of
/// benchmarks; it refuses requests whose table exceeds `cap` entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseOracle {
    pub cap: u128,
}

impl Default for DenseOracle {
    fn default() -> Self {
        Self { cap: 1 << 24 }
    }
}

impl DenseOracle {
    pub fn with_cap(cap: u128) -> Self {
        Self { cap }
    }

    pub fn evaluate<T: Scalar>(&self, req: &EvalRequest<'_, T>) -> Result<EvalOutput<T>, EngineError> {
        let lay = layout(req)?;
        let spec = req.reduction;
        let outdim = req.formula.dim();
        let (rows, cols) = match spec.axis {
            Axis::OverJ => (lay.m, lay.n),
            Axis::OverI => (lay.n, lay.m),
        };
        let required = rows as u128 * cols as u128 * outdim as u128;
        if required > self.cap {
            return Err(EngineError::CapExceeded {
                required,
                cap: self.cap,
            });
        }
        let (vw, iw) = (spec.value_width(outdim), spec.index_width(outdim));
        let counter = MemCounter::new();
        let mut table = Tracked::new(&counter, rows * cols * outdim, T::zero());
        let mut mask = Tracked::new(&counter, rows * cols, lay.clusters.is_none());
        if let Some(clusters) = &lay.clusters {
            for (rs, ivs) in clusters {
                for r in rs.clone() {
                    for iv in ivs {
                        mask.buf[r * cols + iv.start..r * cols + iv.end].fill(true);
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(lay.batch_count * rows * vw);
        let mut indices = Vec::with_capacity(lay.batch_count * rows * iw);
        let mut stack = Vec::new();
        let mut view: Vec<(VarSpec, &[T])> = lay.vars.iter().map(|v| (v.0, &v.1[..0])).collect();
        for b in 0..lay.batch_count {
            for r in 0..rows {
                for c in 0..cols {
                    let (i, j) = match spec.axis {
                        Axis::OverJ => (r, c),
                        Axis::OverI => (c, r),
                    };
                    for (slot, (v, data, offs)) in view.iter_mut().zip(&lay.vars) {
                        let row = match v.category {
                            Category::I => i,
                            Category::J => j,
                            Category::P => 0,
                        };
                        slot.1 = &data[offs[b] + row * v.dim..offs[b] + (row + 1) * v.dim];
                    }
                    let at = (r * cols + c) * outdim;
                    req.formula
                        .eval_pair_into(view.as_slice(), &mut table.buf[at..at + outdim], &mut stack);
                }
            }
            for r in 0..rows {
                let admitted: Vec<usize> = (0..cols).filter(|&c| mask.buf[r * cols + c]).collect();
                let entry = |c: usize, d: usize| table.buf[(r * cols + c) * outdim + d];
                match spec.kind {
                    ReductionKind::Sum => {
                        for d in 0..outdim {
                            let s = exact_sum(admitted.iter().map(|&c| entry(c, d).as_f64()));
                            values.push(T::from_f64(s));
                        }
                    }
                    ReductionKind::LogSumExp => {
                        values.push(T::from_f64(log_sum_exp(
                            admitted.iter().map(|&c| entry(c, 0).as_f64()),
                        )))
                    }
                    ReductionKind::Max | ReductionKind::Min | ReductionKind::ArgMax | ReductionKind::ArgMin => {
                        let largest = matches!(spec.kind, ReductionKind::Max | ReductionKind::ArgMax);
                        for d in 0..outdim {
                            let mut best: Option<(T, usize)> = None;
                            for &c in &admitted {
                                let v = entry(c, d);
                                if v.is_nan() {
                                    continue;
                                }
                                let better = match best {
                                    None => true,
                                    Some((bv, _)) => {
                                        if largest {
                                            v > bv
                                        } else {
                                            v < bv
                                        }
                                    }
                                };
                                if better {
                                    best = Some((v, c));
                                }
                            }
                            let (v, c) = match best {
                                Some((v, c)) => (v, c as i64),
                                None if largest => (T::neg_infinity(), -1),
                                None => (T::infinity(), -1),
                            };
                            values.push(v);
                            indices.push(c);
                        }
                    }
                    ReductionKind::ArgKMin => {
                        let mut all: Vec<(T, usize)> = admitted.iter().map(|&c| (entry(c, 0), c)).collect();
                        all.sort_by(|a, b| {
                            a.0.is_nan()
                                .cmp(&b.0.is_nan())
                                .then(a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
                                .then(a.1.cmp(&b.1))
                        });
                        for q in 0..spec.k {
                            match all.get(q) {
                                Some(&(v, c)) => {
                                    values.push(v);
                                    indices.push(c as i64);
                                }
                                None => {
                                    values.push(T::infinity());
                                    indices.push(-1);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut shape = req.batch_shape.clone();
        shape.extend([rows, vw]);
        let pairs = (lay.batch_count * rows * cols) as u64;
        let stats = EvalStats {
            peak_aux_bytes: counter.peak(),
            tiles: 1,
            pair_evaluations: pairs,
            blocks: 1,
        };
        Ok(EvalOutput {
            values,
            indices: (iw > 0).then_some(indices),
            shape,
            index_width: iw,
            stats,
        })
    }
}

/// `log Σ e^v` with the sum of shifted exponentials computed exactly.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    if values.clone().any(f64::is_nan) {
        return f64::NAN;
    }
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + exact_sum(values.map(|v| (v - m).exp())).ln()
}

/// Correctly rounded sum of `values` (Shewchuk's algorithm with a final
/// round-half-even fix-up). Non-finite inputs follow IEEE addition.
pub(crate) fn exact_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut special = 0.0;
    let mut nonfinite = false;
    for v in values {
        if !v.is_finite() {
            special += v;
            nonfinite = true;
            continue;
        }
        let mut x = v;
        let mut i = 0;
        for k in 0..partials.len() {
            let mut y = partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if nonfinite {
        return special;
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}
