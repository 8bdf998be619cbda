//! Equation data: coefficients, delays, auxiliary functions and history.
//!
//! Two equation forms are supported. The general form
//!
//! ```text
//! x'(t) = -a(t) x(t-r1) + d/dt Q(t, x(t-r1)) + d(t) F(x(t-r1), x(t-r2)) + c(t) G(x^γ(t-r2))
//! ```
//!
//! and the linear-neutral form
//!
//! ```text
//! x'(t) = -a(t) x(t-r1) + b(t) x'(t-r1) + c(t) G(x^γ(t-r2))
//! ```
//!
//! The symbol `b` is kept for the linear-neutral coefficient of `x'(t-r1)`.
//! The Lipschitz bound of `Q(t, ·)` in the general form is called `bQ`.

use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{DiffError, Env, EvalError, Expression, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid exponent: {0}")]
    Exponent(String),
    #[error("{what}: {source} (at t = {t})")]
    Eval {
        what: String,
        t: f64,
        #[source]
        source: EvalError,
    },
    #[error("{what}: {source}")]
    Diff {
        what: String,
        #[source]
        source: DiffError,
    },
    #[error("r1'(t) = 1 at t = {t}: the neutral term cannot be integrated by parts")]
    UnitDelaySlope { t: f64 },
    #[error("{name}(t) = {value} < 0 at t = {t}: delays must be nonnegative")]
    NegativeDelay { name: String, t: f64, value: f64 },
    #[error("p(t) = {value} is not positive at t = {t}")]
    NonPositiveWeight { t: f64, value: f64 },
    #[error("g(t) = {value} is negative at t = {t}")]
    NegativeExponentRate { t: f64, value: f64 },
    #[error("{name} must vanish at the origin, got {value} (t = {t})")]
    NonzeroAtOrigin { name: String, t: f64, value: f64 },
    #[error("Lipschitz constant {name} = {constant} violated: ratio {ratio} at {at}")]
    Lipschitz { name: String, constant: f64, ratio: f64, at: String },
    #[error("Lipschitz constant {name} must be positive, got {value}")]
    NonPositiveConstant { name: String, value: f64 },
    #[error("Tmax = {tmax} must exceed t0 = {t0}")]
    Horizon { t0: f64, tmax: f64 },
    #[error("non-finite delayed argument at t = {t}")]
    NonFiniteDelay { t: f64 },
}

impl ModelError {
    pub(crate) fn eval(what: impl Into<String>, t: f64, source: EvalError) -> Self {
        ModelError::Eval { what: what.into(), t, source }
    }
}

/// Exact exponent `num/den` with an odd denominator, so that `x^γ` is real
/// for negative `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rational {
    num: i64,
    den: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Rational {
    /// Reduced fraction; the denominator must be odd (and so nonzero).
    pub fn new(num: i64, den: i64) -> Result<Self, ModelError> {
        if den == 0 {
            return Err(ModelError::Exponent("zero denominator".into()));
        }
        let sign = if den < 0 { -1 } else { 1 };
        let g = gcd(num, den).max(1);
        let (num, den) = (sign * num / g, sign * den / g);
        if den % 2 == 0 {
            return Err(ModelError::Exponent(format!(
                "{num}/{den} has an even denominator; x^γ would be undefined for x < 0"
            )));
        }
        Ok(Rational { num, den })
    }

    /// Exponent of the nonlinearity: additionally requires `0 < γ < 1`.
    pub fn exponent(num: i64, den: i64) -> Result<Self, ModelError> {
        let r = Rational::new(num, den)?;
        if r.num <= 0 || r.num >= r.den {
            return Err(ModelError::Exponent(format!("γ = {r} is not in (0, 1)")));
        }
        Ok(r)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::Exponent(format!("`{text}` is not a fraction of integers"));
        let (n, d) = match text.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (text.trim(), "1"),
        };
        let n: i64 = n.parse().map_err(|_| bad())?;
        let d: i64 = d.parse().map_err(|_| bad())?;
        Rational::new(n, d)
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> i64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `sign(x)·|x|^γ`.
    pub fn signed_power(&self, x: f64) -> f64 {
        signed_power(x, *self)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// `sign(x)·|x|^γ`, the real odd-root power.
pub fn signed_power(x: f64, gamma: Rational) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let root = match gamma.den {
        1 => x.abs(),
        3 => x.abs().cbrt(),
        d => x.abs().powf(1.0 / d as f64),
    };
    let mag = if gamma.num.unsigned_abs() <= i32::MAX as u64 {
        root.powi(gamma.num as i32)
    } else {
        root.powf(gamma.num as f64)
    };
    mag.copysign(x)
}

/// A delay `r(t)` with its derived quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct DelaySpec {
    r: Expression,
    dr: Expression,
    ddr: Expression,
}

impl DelaySpec {
    pub fn new(r: Expression) -> Result<Self, ModelError> {
        let diff = |e: &Expression, what: &str| {
            e.differentiate(Var::T).map_err(|source| ModelError::Diff { what: what.into(), source })
        };
        let dr = diff(&r, "delay derivative")?;
        let ddr = diff(&dr, "delay second derivative")?;
        Ok(DelaySpec { r, dr, ddr })
    }

    pub fn expression(&self) -> &Expression {
        &self.r
    }

    pub fn r(&self, t: f64) -> Result<f64, EvalError> {
        self.r.at(t)
    }

    pub fn dr(&self, t: f64) -> Result<f64, EvalError> {
        self.dr.at(t)
    }

    pub fn ddr(&self, t: f64) -> Result<f64, EvalError> {
        self.ddr.at(t)
    }

    /// Delayed argument `t - r(t)`.
    pub fn tau(&self, t: f64) -> Result<f64, EvalError> {
        Ok(t - self.r.at(t)?)
    }

    /// Derivative of the delayed argument, `1 - r'(t)`.
    pub fn dtau(&self, t: f64) -> Result<f64, EvalError> {
        Ok(1.0 - self.dr.at(t)?)
    }

    /// Symbolic `t - r(t)`.
    pub fn tau_expression(&self) -> Expression {
        Expression::sub(Expression::t(), self.r.clone())
    }
}

/// Data specific to each equation form.
#[derive(Clone, Debug, PartialEq)]
pub enum NeutralPart {
    General {
        /// `Q(t, x)`.
        q: Expression,
        q_t: Expression,
        q_x: Expression,
        /// Lipschitz bound of `Q(t, ·)`.
        b_q: Expression,
        d: Expression,
        /// `F(x, y)`.
        f: Expression,
        k2: f64,
        k3: f64,
    },
    Linear {
        /// Coefficient of `x'(t - r1(t))`.
        b: Expression,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Form {
    General,
    LinearNeutral,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::General => "general",
            Form::LinearNeutral => "linear-neutral",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub t0: f64,
    pub gamma: Rational,
    pub a: Expression,
    pub c: Expression,
    /// Nonlinearity `G(x)`.
    pub nonlinearity: Expression,
    pub k4: f64,
    pub r1: DelaySpec,
    pub r2: DelaySpec,
    pub neutral: NeutralPart,
}

/// Non-fatal findings from validation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Warning(pub String);

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Number of sample points used by grid validations.
const VALIDATION_SAMPLES: usize = 2001;
const LIPSCHITZ_PAIRS: usize = 10_000;

fn sample_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |i| if i + 1 == n { hi } else { lo + step * i as f64 })
}

impl ProblemSpec {
    pub fn form(&self) -> Form {
        match self.neutral {
            NeutralPart::General { .. } => Form::General,
            NeutralPart::Linear { .. } => Form::LinearNeutral,
        }
    }

    /// `G(sign(x)|x|^γ)`.
    pub fn g_of_power(&self, x: f64) -> Result<f64, EvalError> {
        self.nonlinearity.eval(&Env::tx(0.0, signed_power(x, self.gamma)))
    }

    /// Lipschitz bound of the neutral functional at `t`: `bQ(t)` in the
    /// general form, `|b(t)/(1 - r1'(t))|` in the linear-neutral form.
    pub fn neutral_bound(&self, t: f64) -> Result<f64, ModelError> {
        match &self.neutral {
            NeutralPart::General { b_q, .. } => {
                b_q.at(t).map(f64::abs).map_err(|e| ModelError::eval("bQ", t, e))
            }
            NeutralPart::Linear { b } => {
                let b = b.at(t).map_err(|e| ModelError::eval("b", t, e))?;
                let dtau = self.r1.dtau(t).map_err(|e| ModelError::eval("r1'", t, e))?;
                if dtau == 0.0 {
                    return Err(ModelError::UnitDelaySlope { t });
                }
                Ok((b / dtau).abs())
            }
        }
    }

    /// Checks every structural hypothesis on `[m(t0), tmax]`. Returns
    /// warnings for properties that can only be reported, not enforced.
    pub fn validate(&self, tmax: f64) -> Result<Vec<Warning>, ModelError> {
        let mut warnings = Vec::new();
        let (m, _) = horizon(self, tmax)?;
        for (name, delay) in [("r1", &self.r1), ("r2", &self.r2)] {
            let mut prev_tau = f64::NEG_INFINITY;
            let mut monotone = true;
            for t in sample_grid(self.t0, tmax, VALIDATION_SAMPLES) {
                let r = delay.r(t).map_err(|e| ModelError::eval(name, t, e))?;
                if r < 0.0 {
                    return Err(ModelError::NegativeDelay { name: name.into(), t, value: r });
                }
                let tau = t - r;
                if tau < prev_tau {
                    monotone = false;
                }
                prev_tau = tau;
            }
            let tau0 = delay.tau(self.t0).map_err(|e| ModelError::eval(name, self.t0, e))?;
            if !monotone || prev_tau <= tau0 {
                warnings.push(Warning(format!(
                    "t - {name}(t) is not increasing on the sample grid; divergence to infinity is not witnessed"
                )));
            }
        }
        for t in sample_grid(m, tmax, VALIDATION_SAMPLES) {
            let dr = self.r1.dr(t).map_err(|e| ModelError::eval("r1'", t, e))?;
            if (1.0 - dr).abs() < 1e-12 {
                return Err(ModelError::UnitDelaySlope { t });
            }
        }
        if self.k4 <= 0.0 {
            return Err(ModelError::NonPositiveConstant { name: "k4".into(), value: self.k4 });
        }
        let mut rng = StdRng::seed_from_u64(0x5eed_0001);
        let g0 = self.nonlinearity.eval(&Env::xy(0.0, 0.0)).map_err(|e| ModelError::eval("G", 0.0, e))?;
        if g0 != 0.0 {
            return Err(ModelError::NonzeroAtOrigin { name: "G(0)".into(), t: 0.0, value: g0 });
        }
        check_lipschitz("k4", self.k4, &mut rng, |x, y| {
            let gx = self.nonlinearity.eval(&Env::xy(x, 0.0))?;
            let gy = self.nonlinearity.eval(&Env::xy(y, 0.0))?;
            Ok(((gx - gy).abs(), (x - y).abs(), format!("x = {x}, y = {y}")))
        })?;
        match &self.neutral {
            NeutralPart::Linear { .. } => {}
            NeutralPart::General { q, b_q, f, k2, k3, .. } => {
                for (name, k) in [("k2", *k2), ("k3", *k3)] {
                    if k <= 0.0 {
                        return Err(ModelError::NonPositiveConstant { name: name.into(), value: k });
                    }
                }
                let f00 = f.eval(&Env::xy(0.0, 0.0)).map_err(|e| ModelError::eval("F", 0.0, e))?;
                if f00 != 0.0 {
                    return Err(ModelError::NonzeroAtOrigin { name: "F(0,0)".into(), t: 0.0, value: f00 });
                }
                check_lipschitz("k2", *k2, &mut rng, |x, z| {
                    let y = 2.0 * x.fract().abs() - 1.0;
                    let a = f.eval(&Env::xy(x, y))?;
                    let b = f.eval(&Env::xy(z, y))?;
                    Ok(((a - b).abs(), (x - z).abs(), format!("F({x},{y}) vs F({z},{y})")))
                })?;
                check_lipschitz("k3", *k3, &mut rng, |y, w| {
                    let x = 2.0 * y.fract().abs() - 1.0;
                    let a = f.eval(&Env::xy(x, y))?;
                    let b = f.eval(&Env::xy(x, w))?;
                    Ok(((a - b).abs(), (y - w).abs(), format!("F({x},{y}) vs F({x},{w})")))
                })?;
                let times: Vec<f64> = sample_grid(self.t0, tmax, 101).collect();
                for &t in &times {
                    let q0 = q.eval(&Env::tx(t, 0.0)).map_err(|e| ModelError::eval("Q", t, e))?;
                    if q0 != 0.0 {
                        return Err(ModelError::NonzeroAtOrigin { name: "Q(t,0)".into(), t, value: q0 });
                    }
                }
                let mut pick = 0usize;
                check_lipschitz("bQ", 1.0, &mut rng, |x, y| {
                    let t = times[pick % times.len()];
                    pick += 1;
                    let bound = b_q.at(t)?.abs();
                    let a = q.eval(&Env::tx(t, x))?;
                    let b = q.eval(&Env::tx(t, y))?;
                    // normalise so that the check reads |ΔQ| ≤ bQ(t)|Δx|
                    let scale = if bound > 0.0 { bound } else { f64::MIN_POSITIVE };
                    Ok(((a - b).abs() / scale, (x - y).abs(), format!("t = {t}, x = {x}, y = {y}")))
                })?;
            }
        }
        Ok(warnings)
    }
}

fn check_lipschitz<F>(name: &str, k: f64, rng: &mut StdRng, mut diff: F) -> Result<(), ModelError>
where
    F: FnMut(f64, f64) -> Result<(f64, f64, String), EvalError>,
{
    for _ in 0..LIPSCHITZ_PAIRS {
        let x: f64 = rng.gen_range(-1.0..=1.0);
        let y: f64 = rng.gen_range(-1.0..=1.0);
        let (num, den, at) = diff(x, y).map_err(|e| ModelError::eval(name, 0.0, e))?;
        if den == 0.0 {
            continue;
        }
        if num > k * den * (1.0 + 1e-9) + 1e-15 {
            return Err(ModelError::Lipschitz { name: name.into(), constant: k, ratio: num / den, at });
        }
    }
    Ok(())
}

/// `inf_{t ≥ t0} (t - r_j(t))` over both delays, sampled on `[t0, tmax]`.
/// Returns the infimum and the time attaining it.
pub fn horizon(problem: &ProblemSpec, tmax: f64) -> Result<(f64, f64), ModelError> {
    if tmax.is_nan() || tmax <= problem.t0 {
        return Err(ModelError::Horizon { t0: problem.t0, tmax });
    }
    let mut best = (f64::INFINITY, problem.t0);
    for delay in [&problem.r1, &problem.r2] {
        let found = delay_infimum(delay, problem.t0, tmax)?;
        if found.0 < best.0 {
            best = found;
        }
    }
    Ok(best)
}

fn delay_infimum(delay: &DelaySpec, t0: f64, tmax: f64) -> Result<(f64, f64), ModelError> {
    const N: usize = 1025;
    let tau = |t: f64| -> Result<f64, ModelError> {
        let v = delay.tau(t).map_err(|e| ModelError::eval("delayed argument", t, e))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFiniteDelay { t })
        }
    };
    let grid: Vec<f64> = sample_grid(t0, tmax, N).collect();
    let mut values = Vec::with_capacity(N);
    for &t in &grid {
        values.push(tau(t)?);
    }
    let (mut best_i, mut best) = (0, values[0]);
    for (i, &v) in values.iter().enumerate() {
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let mut arg = grid[best_i];
    let lo = grid[best_i.saturating_sub(1)];
    let hi = grid[(best_i + 1).min(N - 1)];
    // golden-section refinement of the bracketing cells
    let (mut a, mut b) = (lo, hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        if b - a <= 1e-14 * (1.0 + a.abs()) {
            break;
        }
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if tau(c)? < tau(d)? {
            b = d;
        } else {
            a = c;
        }
    }
    for t in [a, b, 0.5 * (a + b)] {
        let v = tau(t)?;
        if v < best {
            best = v;
            arg = t;
        }
    }
    Ok((best, arg))
}

/// Auxiliary weight `p` and exponent rate `g`.
///
/// `p` is given for `t ≥ t0` and extended by the constant 1 to the left of
/// `t0`; `p'` is zero there.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliarySpec {
    pub t0: f64,
    pub p: Expression,
    pub dp: Expression,
    pub g: Expression,
}

impl AuxiliarySpec {
    pub fn new(t0: f64, p: Expression, g: Expression) -> Result<Self, ModelError> {
        let dp = p
            .differentiate(Var::T)
            .map_err(|source| ModelError::Diff { what: "p'".into(), source })?;
        Ok(AuxiliarySpec { t0, p, dp, g })
    }

    /// `p ≡ 1`, `g ≡ 0`.
    pub fn trivial(t0: f64) -> Self {
        AuxiliarySpec {
            t0,
            p: Expression::Const(1.0),
            dp: Expression::Const(0.0),
            g: Expression::Const(0.0),
        }
    }

    pub fn p(&self, t: f64) -> Result<f64, EvalError> {
        if t < self.t0 {
            Ok(1.0)
        } else {
            self.p.at(t)
        }
    }

    pub fn dp(&self, t: f64) -> Result<f64, EvalError> {
        if t < self.t0 {
            Ok(0.0)
        } else {
            self.dp.at(t)
        }
    }

    pub fn g(&self, t: f64) -> Result<f64, EvalError> {
        self.g.at(t)
    }

    /// `g(t) - p'(t)/p(t)`, the drift left after the exponential weight.
    pub fn drift(&self, t: f64) -> Result<f64, EvalError> {
        if t < self.t0 {
            return self.g.at(t);
        }
        let p = self.p.at(t)?;
        if p == 0.0 {
            return Err(EvalError::DivisionByZero);
        }
        Ok(self.g.at(t)? - self.dp.at(t)? / p)
    }

    pub fn validate(&self, m: f64, tmax: f64) -> Result<Vec<Warning>, ModelError> {
        let mut warnings = Vec::new();
        let p0 = self.p.at(self.t0).map_err(|e| ModelError::eval("p", self.t0, e))?;
        if (p0 - 1.0).abs() > 1e-12 {
            warnings.push(Warning(format!(
                "p(t0) = {p0} differs from 1; p is extended by 1 left of t0 and z(t0) = ψ(t0)/p(t0)"
            )));
        }
        let mut pmax: f64 = 0.0;
        for t in sample_grid(self.t0, tmax, VALIDATION_SAMPLES) {
            let p = self.p.at(t).map_err(|e| ModelError::eval("p", t, e))?;
            if p <= 0.0 {
                return Err(ModelError::NonPositiveWeight { t, value: p });
            }
            pmax = pmax.max(p);
        }
        let lo = m.min(self.t0);
        for t in sample_grid(lo, tmax, VALIDATION_SAMPLES) {
            let g = self.g.at(t).map_err(|e| ModelError::eval("g", t, e))?;
            if g < 0.0 {
                return Err(ModelError::NegativeExponentRate { t, value: g });
            }
        }
        if !pmax.is_finite() {
            warnings.push(Warning("p is unbounded on the sample grid".into()));
        }
        Ok(warnings)
    }
}

/// Initial function ψ on `[m(t0), t0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryFunction {
    pub psi: Expression,
    dpsi: Option<Expression>,
    pub m: f64,
    pub t0: f64,
    norm: f64,
}

impl HistoryFunction {
    /// `dpsi` overrides the symbolic derivative (needed when ψ uses `abs`).
    pub fn new(psi: Expression, dpsi: Option<Expression>, m: f64, t0: f64) -> Result<Self, ModelError> {
        let dpsi = match dpsi {
            Some(d) => Some(d),
            None => psi.differentiate(Var::T).ok(),
        };
        let mut h = HistoryFunction { psi, dpsi, m, t0, norm: 0.0 };
        h.norm = h.compute_norm()?;
        Ok(h)
    }

    pub fn constant(value: f64, m: f64, t0: f64) -> Self {
        HistoryFunction {
            psi: Expression::Const(value),
            dpsi: Some(Expression::Const(0.0)),
            m,
            t0,
            norm: value.abs(),
        }
    }

    fn compute_norm(&self) -> Result<f64, ModelError> {
        let f = |t: f64| self.psi.at(t).map(f64::abs).map_err(|e| ModelError::eval("ψ", t, e));
        if self.t0 <= self.m {
            return f(self.t0);
        }
        const N: usize = 513;
        let grid: Vec<f64> = sample_grid(self.m, self.t0, N).collect();
        let mut vals = Vec::with_capacity(N);
        for &t in &grid {
            vals.push(f(t)?);
        }
        let (i, mut best) = vals
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(N - 1)]);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            let (fc, fd) = (f(c)?, f(d)?);
            best = best.max(fc).max(fd);
            if fc > fd {
                b = d;
            } else {
                a = c;
            }
        }
        Ok(best)
    }

    /// `‖ψ‖ = max |ψ|` on `[m(t0), t0]`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn value(&self, t: f64) -> Result<f64, EvalError> {
        self.psi.at(t)
    }

    /// `ψ'(t)`; `None` when ψ is not symbolically differentiable and no
    /// derivative was supplied.
    pub fn derivative(&self, t: f64) -> Option<Result<f64, EvalError>> {
        self.dpsi.as_ref().map(|d| d.at(t))
    }

    /// The same history scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> HistoryFunction {
        let k = Expression::Const(factor);
        HistoryFunction {
            psi: Expression::mul(k.clone(), self.psi.clone()),
            dpsi: self.dpsi.as_ref().map(|d| Expression::mul(k, d.clone())),
            m: self.m,
            t0: self.t0,
            norm: self.norm * factor.abs(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(s: &str) -> Expression {
        Expression::parse(s).unwrap()
    }

    fn linear(r1: &str, r2: &str, t0: f64) -> ProblemSpec {
        ProblemSpec {
            t0,
            gamma: Rational::exponent(1, 3).unwrap(),
            a: ex("1"),
            c: ex("0"),
            nonlinearity: ex("sin(x)"),
            k4: 1.0,
            r1: DelaySpec::new(ex(r1)).unwrap(),
            r2: DelaySpec::new(ex(r2)).unwrap(),
            neutral: NeutralPart::Linear { b: ex("sin(t)/7") },
        }
    }

    #[test]
    fn signed_power_examples() {
        let third = Rational::exponent(1, 3).unwrap();
        assert_eq!(signed_power(-8.0, third), -2.0);
        assert_eq!(signed_power(0.0, third), 0.0);
        let oracle = (third.value() * 0.512f64.ln()).exp();
        assert!((signed_power(0.512, third) - oracle).abs() < 1e-15);
        assert!((signed_power(0.512, third) - 0.8).abs() < 1e-15);
        assert_eq!(signed_power(1.0, third), 1.0);
        assert_eq!(signed_power(-1.0, third), -1.0);
        let two_fifths = Rational::exponent(2, 5).unwrap();
        assert!((signed_power(-32.0, two_fifths) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn exponent_validation() {
        assert!(Rational::exponent(1, 2).is_err());
        assert!(Rational::exponent(3, 3).is_err());
        assert!(Rational::exponent(0, 3).is_err());
        assert!(Rational::exponent(4, 3).is_err());
        assert_eq!(Rational::exponent(2, 6).unwrap(), Rational::exponent(1, 3).unwrap());
        assert!(Rational::exponent(2, 4).is_err());
        assert_eq!(Rational::parse(" 1 / 3 ").unwrap().to_string(), "1/3");
        assert!(Rational::parse("0.3").is_err());
    }

    #[test]
    fn horizon_examples() {
        let p = linear("0.2*t", "0.2*t", 0.0);
        assert_eq!(horizon(&p, 100.0).unwrap(), (0.0, 0.0));
        let p = linear("0.2*t", "0.2*t", 1.0);
        assert_eq!(horizon(&p, 100.0).unwrap().0, 0.8);
        let p = linear("1", "0.2*t", 0.0);
        assert_eq!(horizon(&p, 100.0).unwrap().0, -1.0);
        assert!(horizon(&p, 0.0).is_err());
        let p = linear("1/(t-5)", "0", 0.0);
        assert!(horizon(&p, 10.0).is_err());
    }

    #[test]
    fn horizon_finds_interior_minimum() {
        // t - r(t) = t - 2 sin(t)^2 dips below t0 = 1 inside the interval
        let p = linear("2*sin(t)^2", "0", 1.0);
        let (m, arg) = horizon(&p, 10.0).unwrap();
        // brute force
        let mut best = f64::INFINITY;
        for i in 0..=900_000 {
            let t = 1.0 + 9.0 * i as f64 / 900_000.0;
            best = best.min(t - 2.0 * t.sin().powi(2));
        }
        assert!((m - best).abs() < 1e-9, "{m} vs {best}");
        assert!(arg > 1.0 && arg < 10.0);
    }

    #[test]
    fn rejects_unit_delay_slope() {
        let p = linear("t + 1", "0.2*t", 0.0);
        assert!(matches!(p.validate(10.0), Err(ModelError::UnitDelaySlope { .. })));
    }

    #[test]
    fn rejects_negative_delay() {
        let p = linear("0.2*t - 1", "0.2*t", 0.0);
        assert!(matches!(p.validate(10.0), Err(ModelError::NegativeDelay { .. })));
    }

    #[test]
    fn lipschitz_spot_checks() {
        let mut p = linear("0.2*t", "0.2*t", 0.0);
        assert!(p.validate(10.0).unwrap().is_empty());
        p.k4 = 0.5;
        assert!(matches!(p.validate(10.0), Err(ModelError::Lipschitz { .. })));
        p.k4 = 1.0;
        p.nonlinearity = ex("cos(x)");
        assert!(matches!(p.validate(10.0), Err(ModelError::NonzeroAtOrigin { .. })));
    }

    #[test]
    fn general_form_checks() {
        let mut p = linear("0.2*t", "0.2*t", 0.0);
        p.neutral = NeutralPart::General {
            q: ex("0.1*sin(t)*x"),
            q_t: ex("0.1*cos(t)*x"),
            q_x: ex("0.1*sin(t)"),
            b_q: ex("0.1*abs(sin(t))"),
            d: ex("0.01"),
            f: ex("0.5*x + 0.25*sin(y)"),
            k2: 0.5,
            k3: 0.25,
        };
        p.validate(20.0).unwrap();
        if let NeutralPart::General { k3, .. } = &mut p.neutral {
            *k3 = 0.2;
        }
        assert!(matches!(p.validate(20.0), Err(ModelError::Lipschitz { .. })));
        if let NeutralPart::General { k3, b_q, .. } = &mut p.neutral {
            *k3 = 0.25;
            *b_q = ex("0.05");
        }
        assert!(matches!(p.validate(20.0), Err(ModelError::Lipschitz { .. })));
    }

    #[test]
    fn auxiliary_extension_and_warning() {
        let aux = AuxiliarySpec::new(0.0, ex("1/(t+0.2)"), ex("0.1/(t+0.1)")).unwrap();
        assert_eq!(aux.p(-0.5).unwrap(), 1.0);
        assert_eq!(aux.dp(-0.5).unwrap(), 0.0);
        assert_eq!(aux.p(0.0).unwrap(), 5.0);
        assert!((aux.dp(0.0).unwrap() + 25.0).abs() < 1e-12);
        let w = aux.validate(0.0, 100.0).unwrap();
        assert_eq!(w.len(), 1);
        let bad = AuxiliarySpec::new(0.0, ex("1 - t"), ex("0")).unwrap();
        assert!(bad.validate(0.0, 10.0).is_err());
        let bad_g = AuxiliarySpec::new(0.0, ex("1"), ex("sin(t)")).unwrap();
        assert!(bad_g.validate(0.0, 10.0).is_err());
    }

    #[test]
    fn history_norm() {
        let h = HistoryFunction::new(ex("0.5*sin(3*t)"), None, -2.0, 0.0).unwrap();
        assert!((h.norm() - 0.5).abs() < 1e-12);
        let h = HistoryFunction::new(ex("0.001"), None, 0.0, 0.0).unwrap();
        assert_eq!(h.norm(), 0.001);
        assert_eq!(h.derivative(0.0).unwrap().unwrap(), 0.0);
        let h = HistoryFunction::new(ex("abs(t)"), None, -1.0, 0.0).unwrap();
        assert!(h.derivative(-0.5).is_none());
        assert!((h.norm() - 1.0).abs() < 1e-12);
    }
}
