mod common;

use common::{random_formula, rng, Instance, Shape};
use genred::{format_formula, format_reduction, parse_formula, parse_reduction, ReductionKind};
use proptest::prelude::*;

/// Strings made of grammar fragments, mostly ill-formed.
fn fragments() -> impl Strategy<Value = String> {
    let atoms = prop::sample::select(vec![
        "Vi(", "Vj(", "Pm(", "0", "1", "3", ",", ")", "(", "+", "-", "*", "/", "Exp(", "SqDist(", "Sum(",
        "ArgKMin(", "2.5", "1e", " ", "Foo(", "Extract(", "Concat(", "[", "]", "Powi(", "^", "é",
    ]);
    prop::collection::vec(atoms, 1..12).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn format_then_parse_is_identity(seed in any::<u64>(), depth in 0usize..=6, dim in 1usize..=3) {
        let shape = Shape { depth, max_dim: 5, kinks: true };
        let f = random_formula(&mut rng(seed), dim, shape);
        let text = format_formula(&f);
        let g = parse_formula(&text).map_err(|e| TestCaseError::fail(e.render(&text)))?;
        prop_assert_eq!(g, f);
    }

    #[test]
    fn reductions_round_trip(seed in any::<u64>(), kind in 0usize..7, axis in 0usize..2, k in 1usize..5) {
        let kind = ReductionKind::ALL[kind];
        let f = random_formula(&mut rng(seed), 1, Shape::default());
        let spec = match kind {
            ReductionKind::ArgKMin => genred::ReductionSpec::arg_k_min(genred::Axis::from_index(axis).unwrap(), k),
            _ => genred::ReductionSpec::new(kind, genred::Axis::from_index(axis).unwrap()),
        };
        let text = format_reduction(&spec, &f);
        let (spec2, g) = parse_reduction(&text).map_err(|e| TestCaseError::fail(e.render(&text)))?;
        prop_assert_eq!(spec2, spec);
        prop_assert_eq!(g, f);
    }

    #[test]
    fn error_spans_are_inside_the_input(text in fragments()) {
        if let Err(e) = parse_formula(&text) {
            prop_assert!(e.span.start < e.span.end, "{:?} for {:?}", e.span, text);
            prop_assert!(e.span.end <= text.len(), "{:?} for {:?}", e.span, text);
            prop_assert!(text.is_char_boundary(e.span.start) && text.is_char_boundary(e.span.end));
        }
        if let Err(e) = parse_reduction(&text) {
            prop_assert!(e.span.start < e.span.end && e.span.end <= text.len(), "{:?} for {:?}", e.span, text);
        }
    }

    #[test]
    fn minus_associates_to_the_left(seed in any::<u64>()) {
        let chained = parse_formula("Vi(0,2)-Vj(0,2)-Pm(0,2)").unwrap();
        let grouped = parse_formula("(Vi(0,2)-Vj(0,2))-Pm(0,2)").unwrap();
        let other = parse_formula("Vi(0,2)-(Vj(0,2)-Pm(0,2))").unwrap();
        let inst = Instance::<f64>::new(&mut rng(seed), chained.clone(), 1, 1, &[]);
        let view = inst.pair_view(0, 0, 0);
        let a = chained.eval_pair(view.as_slice()).unwrap();
        prop_assert_eq!(&a, &grouped.eval_pair(view.as_slice()).unwrap());
        let c = other.eval_pair(view.as_slice()).unwrap();
        // p = 0 exactly would make both groupings agree.
        let p = view.iter().find(|(v, _)| v.category == genred::Category::P).unwrap().1;
        if p.iter().any(|&x| x != 0.0) {
            prop_assert_ne!(a, c);
        }
    }
}

#[test]
fn empty_input_is_an_error() {
    assert!(parse_formula("").is_err());
    assert!(parse_formula("   ").is_err());
}
