use ndde::expr::{Env, Expression, Func, Var};
use ndde::model::{signed_power, Rational};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Expression> {
    prop_oneof![
        (-5.0f64..5.0).prop_map(Expression::constant),
        (1i32..6).prop_map(|k| Expression::constant(k as f64)),
        Just(Expression::t()),
    ]
}

fn tree() -> impl Strategy<Value = Expression> {
    leaf().prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(Expression::neg),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expression::add(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expression::sub(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expression::mul(a, b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expression::div(a, b)),
            (inner.clone(), 2i32..4).prop_map(|(a, k)| Expression::pow(a, Expression::constant(k as f64))),
            (inner.clone(), prop_oneof![Just(Func::Sin), Just(Func::Cos), Just(Func::Exp), Just(Func::Abs)])
                .prop_map(|(a, f)| Expression::call(f, a)),
            (inner, prop_oneof![Just((1, 3)), Just((2, 3)), Just((1, 5)), Just((3, 1))])
                .prop_map(|(a, (n, d))| Expression::sgnpow(a, Rational::new(n, d).unwrap())),
        ]
    })
}

fn same(a: Result<f64, impl std::fmt::Debug>, b: Result<f64, impl std::fmt::Debug>) -> bool {
    match (a, b) {
        (Ok(x), Ok(y)) => x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()),
        (Err(_), Err(_)) => true,
        _ => false,
    }
}

/// Five-point central difference.
fn fd(e: &Expression, t: f64, h: f64) -> Option<f64> {
    let f = |s: f64| e.at(s).ok().filter(|v| v.is_finite());
    Some((f(t - 2.0 * h)? - 8.0 * f(t - h)? + 8.0 * f(t + h)? - f(t + 2.0 * h)?) / (12.0 * h))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn printing_round_trips(e in tree(), ts in prop::collection::vec(-3.0f64..3.0, 100)) {
        let text = e.to_string();
        let back = Expression::parse(&text).map_err(|err| TestCaseError::fail(format!("{text}: {err}")))?;
        prop_assert_eq!(&back, &e, "{}", text);
        prop_assert_eq!(back.to_string(), text);
        for t in ts {
            prop_assert!(same(back.at(t), e.at(t)), "{} at {}", e, t);
        }
    }

    #[test]
    fn signed_power_is_odd(x in -1e6f64..1e6, pick in 0usize..5) {
        let g = [(1, 3), (2, 3), (1, 5), (3, 7), (5, 1)][pick];
        let g = Rational::new(g.0, g.1).unwrap();
        prop_assert_eq!(signed_power(-x, g), -signed_power(x, g));
        let e = Expression::sgnpow(Expression::var(Var::X), g);
        prop_assert_eq!(e.eval(&Env::tx(0.0, -x)).unwrap(), -e.eval(&Env::tx(0.0, x)).unwrap());
    }

    #[test]
    fn derivative_matches_finite_differences(e in tree(), t in -2.0f64..2.0) {
        let Ok(d) = e.differentiate(Var::T) else { return Ok(()) };
        let Ok(exact) = d.at(t) else { return Ok(()) };
        let (Some(f1), Some(f2)) = (fd(&e, t, 1e-3), fd(&e, t, 5e-4)) else { return Ok(()) };
        // skip points where the stencil is not resolving the function
        let degenerate = exact.abs() <= 1e-8
            || !exact.is_finite()
            || (f1 - f2).abs() > 1e-9 * f2.abs().max(1.0)
            || e.at(t).map_or(true, |v| v.abs() > 1e6);
        if !degenerate {
            prop_assert!((exact - f2).abs() <= 1e-6 * exact.abs(), "{} at {}: {} vs {}", e, t, exact, f2);
        }
    }
}

#[test]
fn grammar_examples() {
    let e = Expression::parse("-t^2").unwrap();
    assert_eq!(e.at(3.0).unwrap(), -9.0);
    let e = Expression::parse("2^3^2").unwrap();
    assert_eq!(e.at(0.0).unwrap(), 512.0);
    let e = Expression::parse("sgnpow(t, 1/3)").unwrap();
    assert!((e.at(-8.0).unwrap() + 2.0).abs() < 1e-15);
    assert!(Expression::parse("sgnpow(t, 1/2)").is_err());
    assert!(Expression::parse("sin(t").is_err());
    assert!(Expression::parse("foo(t)").is_err());
}
