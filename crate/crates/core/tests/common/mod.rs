#![allow(dead_code)]

use ndde::criteria::bracket_matched_a;
use ndde::expr::{Expression, Var};
use ndde::model::{AuxiliarySpec, DelaySpec, NeutralPart, ProblemSpec, Rational};

pub const C4: &str = "0.01*(0.8*t+0.2)^(1/3)/((t+0.1)*(t+0.2))";

pub fn ex(s: &str) -> Expression {
    Expression::parse(s).unwrap_or_else(|e| panic!("{s}: {e}"))
}

pub fn linear(a: &str, b: &str, c: &str, r1: &str, r2: &str) -> ProblemSpec {
    ProblemSpec {
        t0: 0.0,
        gamma: Rational::exponent(1, 3).unwrap(),
        a: ex(a),
        c: ex(c),
        nonlinearity: ex("sin(x)"),
        k4: 1.0,
        r1: DelaySpec::new(ex(r1)).unwrap(),
        r2: DelaySpec::new(ex(r2)).unwrap(),
        neutral: NeutralPart::Linear { b: ex(b) },
    }
}

/// General-form problem with `Q = q`, `|Q| ≤ b_q |x|`, `d = d`, `F = f`.
#[allow(clippy::too_many_arguments)]
pub fn general(a: &str, q: &str, b_q: &str, d: &str, f: &str, c: &str, r1: &str, r2: &str) -> ProblemSpec {
    let qe = ex(q);
    ProblemSpec {
        t0: 0.0,
        gamma: Rational::exponent(1, 3).unwrap(),
        a: ex(a),
        c: ex(c),
        nonlinearity: ex("sin(x)"),
        k4: 1.0,
        r1: DelaySpec::new(ex(r1)).unwrap(),
        r2: DelaySpec::new(ex(r2)).unwrap(),
        neutral: NeutralPart::General {
            q_t: qe.differentiate(Var::T).unwrap(),
            q_x: qe.differentiate(Var::X).unwrap(),
            q: qe,
            b_q: ex(b_q),
            d: ex(d),
            f: ex(f),
            k2: 1.0,
            k3: 1.0,
        },
    }
}

pub fn worked_aux() -> AuxiliarySpec {
    AuxiliarySpec::new(0.0, ex("1/(t+0.2)"), ex("0.1/(t+0.1)")).unwrap()
}

/// The worked example with `a` chosen so the combined bracket vanishes.
pub fn worked_example(tmax: f64) -> ProblemSpec {
    let mut p = linear("0", "sin(t)/7", C4, "0.2*t", "0.2*t");
    p.a = bracket_matched_a(&p, &worked_aux(), &Expression::Const(0.0), tmax).unwrap();
    p
}
