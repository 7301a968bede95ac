mod common;

use common::{compare, random_formula, random_ranges, random_spec, rng, Instance, Shape};
use genred::engine::Binding;
use genred::lazy::Session;
use genred::{Axis, DenseOracle, Engine, EvalRequest, Formula, RangeSpec, ReductionKind, ReductionSpec};
use proptest::prelude::*;
use rand::Rng;

fn dim_for(kind: ReductionKind, r: &mut impl Rng) -> usize {
    if ReductionSpec::new(kind, Axis::OverJ).validate(2).is_err() {
        1
    } else {
        r.gen_range(1..=3)
    }
}

fn gaussian() -> Formula {
    genred::parse_formula("Scal(Exp(Neg(SqDist(Vi(0,3),Vj(0,3)))),Vj(1,1))").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn engine_matches_the_dense_oracle(seed in any::<u64>(), kind in 0usize..7, batched in any::<bool>()) {
        let mut r = rng(seed);
        let kind = ReductionKind::ALL[kind];
        let dim = dim_for(kind, &mut r);
        let f = random_formula(&mut r, dim, Shape { depth: 3, max_dim: 8, kinks: true });
        let (m, n) = (r.gen_range(1..=40), r.gen_range(1..=40));
        let batch = if batched { vec![2] } else { vec![] };
        let inst = Instance::<f64>::new(&mut r, f, m, n, &batch);
        let req = inst.request(random_spec(&mut r, kind, m, n)).with_tile(r.gen_range(1..=16));
        let got = Engine::new().evaluate(&req).unwrap();
        let want = DenseOracle::default().evaluate(&req).unwrap();
        compare(&got, &want, 1e-12).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn tile_size_and_workers_do_not_change_results(seed in any::<u64>(), kind in 0usize..7) {
        let mut r = rng(seed);
        let kind = ReductionKind::ALL[kind];
        let dim = dim_for(kind, &mut r);
        let f = random_formula(&mut r, dim, Shape::default());
        let (m, n) = (r.gen_range(1..=70), r.gen_range(1..=70));
        let inst = Instance::<f64>::new(&mut r, f, m, n, &[]);
        let spec = random_spec(&mut r, kind, m, n);
        let base = Engine::with_workers(1).unwrap().evaluate(&inst.request(spec).with_tile(1)).unwrap();
        for (tile, workers) in [(7, 4), (64, 1), (1024, 4)] {
            let out = Engine::with_workers(workers).unwrap().evaluate(&inst.request(spec).with_tile(tile)).unwrap();
            prop_assert_eq!(&out.indices, &base.indices);
            if kind.is_arg() {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&out.values), bits(&base.values));
            } else {
                compare(&out, &base, 1e-12).map_err(TestCaseError::fail)?;
            }
        }
    }

    #[test]
    fn ranges_match_the_masked_oracle(seed in any::<u64>(), kind in 0usize..7) {
        let mut r = rng(seed);
        let kind = ReductionKind::ALL[kind];
        let dim = dim_for(kind, &mut r);
        let f = random_formula(&mut r, dim, Shape { depth: 3, ..Shape::default() });
        let (m, n) = (r.gen_range(2..=50), r.gen_range(2..=50));
        let inst = Instance::<f64>::new(&mut r, f, m, n, &[]);
        let spec = random_spec(&mut r, kind, m, n);
        let (rows, reduced) = if spec.axis == Axis::OverJ { (m, n) } else { (n, m) };
        let mut req = inst.request(spec).with_tile(r.gen_range(1..=9));
        req.ranges = Some(random_ranges(&mut r, rows, reduced));
        let got = Engine::new().evaluate(&req).unwrap();
        let want = DenseOracle::default().evaluate(&req).unwrap();
        compare(&got, &want, 1e-12).map_err(TestCaseError::fail)?;

        // A single cluster admitting everything is the same as no ranges.
        req.ranges = Some(RangeSpec::new().cluster(0..rows, vec![0..reduced]));
        let covered = Engine::new().evaluate(&req).unwrap();
        req.ranges = None;
        let plain = Engine::new().evaluate(&req).unwrap();
        prop_assert_eq!(covered.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        plain.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(covered.indices, plain.indices);
    }

    #[test]
    fn broadcast_batch_repeats_the_unbatched_result(seed in any::<u64>(), kind in 0usize..7, b in 1usize..5) {
        let mut r = rng(seed);
        let kind = ReductionKind::ALL[kind];
        let dim = dim_for(kind, &mut r);
        let f = random_formula(&mut r, dim, Shape { depth: 3, ..Shape::default() });
        let (m, n) = (r.gen_range(1..=30), r.gen_range(1..=30));
        let inst = Instance::<f64>::new(&mut r, f.clone(), m, n, &[]);
        let spec = random_spec(&mut r, kind, m, n);
        let single = Engine::new().evaluate(&inst.request(spec)).unwrap();
        let mut req = EvalRequest::new(f, spec).with_batch(&[b]).with_sizes(m, n);
        for (v, values, _) in &inst.data {
            req = req.bind(Binding::batched(v.category, v.slot, values, &[1]));
        }
        let out = Engine::new().evaluate(&req).unwrap();
        prop_assert_eq!(out.shape[0], b);
        prop_assert_eq!(&out.shape[1..], &single.shape[..]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&out.values), bits(&single.values).repeat(b));
        prop_assert_eq!(out.indices, single.indices.map(|ix| ix.repeat(b)));
    }
}

#[test]
fn gaussian_matvec_matches_the_oracle_on_a_small_case() {
    let mut r = rng(11);
    let x: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..9).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let req = EvalRequest::new(gaussian(), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
        .bind_i(0, &x)
        .bind_j(0, &y)
        .bind_j(1, &b);
    let got = Engine::new().evaluate(&req).unwrap();
    let want = DenseOracle::default().evaluate(&req).unwrap();
    compare(&got, &want, 1e-12).unwrap();
}

/// Peak auxiliary bytes of a Gaussian matvec with `m = n` points in f32.
fn gaussian_peak(n: usize, tile: usize) -> usize {
    let mut r = rng(n as u64);
    let x: Vec<f32> = (0..3 * n).map(|_| r.gen_range(0.0..1.0)).collect();
    let y: Vec<f32> = (0..3 * n).map(|_| r.gen_range(0.0..1.0)).collect();
    let b: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let req = EvalRequest::new(gaussian(), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
        .bind_i(0, &x)
        .bind_j(0, &y)
        .bind_j(1, &b)
        .with_tile(tile);
    let engine = Engine::new();
    let out = engine.evaluate(&req).unwrap();
    assert_eq!(out.values.len(), n);
    engine.memory_report().unwrap()
}

#[test]
fn working_memory_does_not_grow_with_n() {
    let peaks: Vec<usize> = [1_000, 10_000, 100_000].iter().map(|&n| gaussian_peak(n, 256)).collect();
    let (lo, hi) = (*peaks.iter().min().unwrap(), *peaks.iter().max().unwrap());
    assert!((hi as f64) < 1.5 * lo as f64, "peaks {peaks:?}");
    assert!(peaks[2] < 10 << 20, "{} bytes at n = 1e5", peaks[2]);
    assert_eq!(gaussian_peak(2_000, 256), gaussian_peak(4_000, 256));
}

#[test]
fn lazy_gaussian_script_matches_the_oracle() {
    let mut r = rng(3);
    let (m, n) = (13, 17);
    let x: Vec<f64> = (0..3 * m).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let s = Session::new();
    let x_i = s.wrap(&x, &[m, 1, 3]).unwrap();
    let y_j = s.wrap(&y, &[1, n, 3]).unwrap();
    let b_j = s.wrap(&b, &[1, n, 1]).unwrap();
    let diff = x_i.sub(&y_j).unwrap();
    let k = diff.mul(&diff).unwrap().sum_coords().neg().exp();
    let pairs_before = s.engine().pair_evaluations();
    let lazy = k.mul(&b_j).unwrap().sum(Axis::OverJ).unwrap();
    assert_eq!(pairs_before, 0);

    let req = EvalRequest::new(gaussian(), ReductionSpec::new(ReductionKind::Sum, Axis::OverJ))
        .bind_i(0, &x)
        .bind_j(0, &y)
        .bind_j(1, &b);
    let want = DenseOracle::default().evaluate(&req).unwrap();
    compare(&lazy, &want, 1e-12).unwrap();
}

#[test]
fn lazy_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let (m, n) = (8, 8);
    let x: Vec<f64> = (0..3 * m).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let cot: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
    let spec = ReductionSpec::new(ReductionKind::Sum, Axis::OverJ);
    let phi = |x: &[f64]| -> f64 {
        let s = Session::new();
        let k = s.wrap(x, &[m, 1, 3]).unwrap().sqdist(&s.wrap(&y, &[1, n, 3]).unwrap()).unwrap().neg().exp();
        let out = k.mul(&s.wrap(&b, &[1, n, 1]).unwrap()).unwrap().sum(Axis::OverJ).unwrap();
        out.values.iter().zip(&cot).map(|(a, c)| a * c).sum()
    };
    let s = Session::new();
    let x_i = s.wrap(&x, &[m, 1, 3]).unwrap();
    let k = x_i.sqdist(&s.wrap(&y, &[1, n, 3]).unwrap()).unwrap().neg().exp();
    let prod = k.mul(&s.wrap(&b, &[1, n, 1]).unwrap()).unwrap();
    let g = prod.vjp(spec, None, &x_i, &cot).unwrap();
    assert_eq!(g.len(), x.len());

    let h = 1e-6;
    let mut fd = vec![0.0; x.len()];
    let mut work = x.clone();
    for e in 0..x.len() {
        work[e] = x[e] + h;
        let up = phi(&work);
        work[e] = x[e] - h;
        let down = phi(&work);
        work[e] = x[e];
        fd[e] = (up - down) / (2.0 * h);
    }
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff <= 1e-5 * norm, "{diff:e} vs {norm:e}");

    let zero = prod.vjp(spec, None, &x_i, &vec![0.0; m]).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}
