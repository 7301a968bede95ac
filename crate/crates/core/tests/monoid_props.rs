use genred::{AccState, Axis, ReductionKind, ReductionSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(kind: ReductionKind) -> ReductionSpec {
    match kind {
        ReductionKind::ArgKMin => ReductionSpec::arg_k_min(Axis::OverJ, 3),
        _ => ReductionSpec::new(kind, Axis::OverJ),
    }
}

fn fold(kind: ReductionKind, items: &[(f64, i64)]) -> AccState<f64> {
    let mut st = AccState::init(&spec(kind), 1).unwrap();
    for &(v, j) in items {
        st.accumulate(&[v], j);
    }
    st
}

/// Splits `items` into random chunks and merges their states in a random
/// order.
fn fold_tree(kind: ReductionKind, items: &[(f64, i64)], rng: &mut ChaCha8Rng) -> AccState<f64> {
    let mut parts = Vec::new();
    let mut rest = items;
    while !rest.is_empty() {
        let k = rng.gen_range(1..=rest.len());
        parts.push(fold(kind, &rest[..k]));
        rest = &rest[k..];
    }
    parts.shuffle(rng);
    let mut acc = AccState::init(&spec(kind), 1).unwrap();
    for p in &parts {
        acc.merge(p);
    }
    acc
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            -1e3f64..1e3,
            (-3i32..3).prop_map(f64::from),
        ],
        0..64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn order_and_grouping_do_not_matter(vals in values(), seed in any::<u64>(), kind in 0usize..7) {
        let kind = ReductionKind::ALL[kind];
        let items: Vec<(f64, i64)> = vals.iter().copied().zip(0..).collect();
        let base = fold(kind, &items).finalize();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng);
        for st in [fold(kind, &shuffled), fold_tree(kind, &shuffled, &mut rng)] {
            let out = st.finalize();
            prop_assert_eq!(&out.indices, &base.indices);
            if kind.is_arg() {
                prop_assert_eq!(&out.values, &base.values);
            } else {
                for (a, b) in out.values.iter().zip(&base.values) {
                    prop_assert!(a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()), "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn sum_matches_exact_integer_arithmetic(ints in prop::collection::vec(-(1i64 << 40)..(1i64 << 40), 0..256), shift in 0i32..60) {
        // Every value is an integer times 2^-shift, so the exact sum is an
        // integer sum scaled once.
        let scale = 2f64.powi(-shift);
        let items: Vec<(f64, i64)> = ints.iter().map(|&k| k as f64 * scale).zip(0..).collect();
        let exact = ints.iter().sum::<i64>() as f64 * scale;
        let got = fold(ReductionKind::Sum, &items).finalize().values[0];
        prop_assert!(got == exact || (got - exact).abs() <= 1e-12 * exact.abs(), "{} vs {}", got, exact);
    }

    #[test]
    fn logsumexp_matches_shifted_formula(vals in prop::collection::vec(-700f64..700.0, 1..256)) {
        let items: Vec<(f64, i64)> = vals.iter().copied().zip(0..).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let got = fold(ReductionKind::LogSumExp, &items).finalize().values[0];
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn extrema_match_a_scan(vals in prop::collection::vec(-5i32..5, 1..64)) {
        let items: Vec<(f64, i64)> = vals.iter().map(|&v| f64::from(v)).zip(0..).collect();
        let max = *vals.iter().max().unwrap();
        let first_max = vals.iter().position(|&v| v == max).unwrap() as i64;
        let out = fold(ReductionKind::ArgMax, &items).finalize();
        prop_assert_eq!(out.indices, vec![first_max]);
        let mut sorted: Vec<(i32, i64)> = vals.iter().copied().zip(0..).collect();
        sorted.sort();
        let out = fold(ReductionKind::ArgKMin, &items).finalize();
        let want: Vec<i64> = (0..3).map(|q| sorted.get(q).map_or(-1, |p| p.1)).collect();
        prop_assert_eq!(out.indices, want);
    }

    #[test]
    fn logsumexp_is_finite_for_any_finite_input(vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..32)) {
        let items: Vec<(f64, i64)> = vals.iter().copied().zip(0..).collect();
        let got = fold(ReductionKind::LogSumExp, &items).finalize().values[0];
        prop_assert!(got.is_finite(), "{} for {:?}", got, vals);
        let mut rng = ChaCha8Rng::seed_from_u64(vals.len() as u64);
        let tree = fold_tree(ReductionKind::LogSumExp, &items, &mut rng).finalize().values[0];
        prop_assert!(tree.is_finite());
    }
}
