use artemis::symbolic::{
    build_library, evaluate_terms, expression_from_coefficients, format_weight, parse_expression, Basis, BasisKind,
    LibrarySpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn basis() -> impl Strategy<Value = Basis> {
    let kind = prop_oneof![
        Just(BasisKind::Last),
        (1usize..50).prop_map(BasisKind::Ma),
        Just(BasisKind::Diff),
        Just(BasisKind::Ratio),
        Just(BasisKind::Var),
    ];
    (kind, 0usize..200).prop_map(|(kind, channel)| Basis { kind, channel })
}

fn weight() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        (-12i32..12, -9.99f64..9.99).prop_map(|(e, m)| m * 10f64.powi(e)),
        Just(9.9999996),
        Just(-0.000099999996),
        Just(999_999.6),
    ]
}

proptest! {
    #[test]
    fn basis_descriptions_round_trip(b in basis()) {
        let back: Basis = b.to_string().parse().unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn weights_keep_six_significant_digits(w in weight()) {
        prop_assume!(w != 0.0);
        let s = format_weight(w);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - w).abs() <= 5e-6 * w.abs(), "{} -> {} -> {}", w, s, back);
        let mantissa = s.trim_start_matches('-').split('e').next().unwrap();
        let significant = mantissa.trim_start_matches(['0', '.']).chars().filter(|c| c.is_ascii_digit()).count();
        prop_assert_eq!(significant, 6, "{}", s);
    }

    #[test]
    fn expressions_parse_back_to_their_terms(
        coefs in prop::collection::vec(prop_oneof![Just(0.0), weight()], 1..40),
        threshold in prop_oneof![Just(0.0), Just(1e-3), Just(0.5)],
    ) {
        let dx = 4;
        let lib = build_library(dx, 12, &LibrarySpec::default()).unwrap();
        let k = coefs.len().min(lib.len());
        let mut c = DVector::zeros(lib.len());
        for j in 0..k {
            c[j] = coefs[j];
        }
        let expr = expression_from_coefficients(&c, &lib, threshold);
        let terms = parse_expression(&expr).unwrap();
        let kept: Vec<usize> = (0..lib.len()).filter(|&j| c[j].abs() > threshold).collect();
        prop_assert_eq!(terms.len(), kept.len());
        for (w, b) in &terms {
            let j = lib.entries.iter().position(|e| e == b).unwrap();
            prop_assert!(kept.contains(&j));
            prop_assert!((w - c[j]).abs() <= 5e-6 * c[j].abs());
        }
        // evaluation agrees with the coefficient vector up to formatting
        let window = DMatrix::from_fn(12, dx, |t, j| 1.0 + 0.1 * t as f64 - 0.3 * j as f64);
        let exact: f64 = kept.iter().map(|&j| c[j] * lib.entries[j].eval(&window)).sum();
        let scale: f64 = kept.iter().map(|&j| (c[j] * lib.entries[j].eval(&window)).abs()).sum::<f64>();
        let got = evaluate_terms(&terms, &window).unwrap();
        prop_assert!((got - exact).abs() <= 1e-5 * scale + 1e-300);
    }
}

#[test]
fn malformed_expressions_are_rejected() {
    for bad in [
        "y = 1.0·last(ch=0)",
        "ŷ = 1.0*last(ch=0)",
        "ŷ = abc·last(ch=0)",
        "ŷ = 1.0·ma(ch=0,w=0)",
        "ŷ = 1.0·last(ch=x)",
        "ŷ = 1.0·median(ch=0)",
        "ŷ = 1.0·last(ch=0) + ",
    ] {
        assert!(parse_expression(bad).is_err(), "{bad}");
    }
    assert!(parse_expression("ŷ = 0").unwrap().is_empty());
}
