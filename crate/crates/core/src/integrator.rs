//! Direct time stepping of the original equation.
//!
//! Classic RK4 on a fixed step with cubic Hermite dense output built from
//! node values and node derivatives. Delayed values and delayed derivatives
//! are read from ψ before `t0` and from the dense output after it. When a
//! delayed argument falls inside the step being taken (vanishing or
//! proportional delays) the step is repeated against its own provisional
//! interpolant until the end values settle; if they do not, the step is
//! halved.
//!
//! The same stepper can integrate `z = x/p` instead of `x`
//! ([`Route::Transformed`]); `p z` then reproduces `x` up to discretisation
//! error.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{Coefficients, CriteriaError};
use crate::expr::{Env, EvalError, Expression};
use crate::model::{horizon, signed_power, AuxiliarySpec, HistoryFunction, ModelError, NeutralPart, ProblemSpec};

pub const DEFAULT_STEP: f64 = 1e-3;
const INNER_TOL: f64 = 1e-12;
const INNER_MAX: usize = 25;
const MAX_HALVINGS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{what}: {source} (at t = {t})")]
    Eval {
        what: &'static str,
        t: f64,
        #[source]
        source: EvalError,
    },
    #[error("delayed-argument iteration did not settle at t = {t} (last step {h})")]
    InnerIteration { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("argument {t} outside [{lo}, {hi}]")]
    OutsideDomain { t: f64, lo: f64, hi: f64 },
    #[error("{0}")]
    Invalid(String),
}

fn ev(what: &'static str, t: f64) -> impl FnOnce(EvalError) -> IntegratorError {
    move |source| IntegratorError::Eval { what, t, source }
}

#[derive(Clone, Debug, Default)]
pub enum Route {
    /// Integrate `x`.
    #[default]
    Direct,
    /// Integrate `z = x/p` for the given auxiliary pair.
    Transformed(AuxiliarySpec),
}

#[derive(Clone, Debug)]
pub struct IntegratorOptions {
    pub step: f64,
    pub t_end: f64,
    pub route: Route,
}

impl IntegratorOptions {
    pub fn new(t_end: f64, step: f64) -> Self {
        IntegratorOptions { step, t_end, route: Route::Direct }
    }

    pub fn transformed(mut self, aux: AuxiliarySpec) -> Self {
        self.route = Route::Transformed(aux);
        self
    }
}

/// Accepted nodes with dense output. Values are `x` (or `z` on the
/// transformed route); queries return `x` either way.
///
/// Each node keeps a left and a right derivative so that jumps in `x'`
/// carried forward by the neutral term sit exactly on nodes.
#[derive(Clone, Debug)]
pub struct Trajectory {
    psi: HistoryFunction,
    scale: Option<AuxiliarySpec>,
    t: Vec<f64>,
    y: Vec<f64>,
    dl: Vec<f64>,
    dr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Delayed arguments this close to a node are read as the node.
fn snap(t: f64) -> f64 {
    1e-12 * (1.0 + t.abs())
}

fn hermite(y0: f64, y1: f64, d0: f64, d1: f64, h: f64, th: f64) -> (f64, f64) {
    let t2 = th * th;
    let t3 = t2 * th;
    let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
        + (t3 - 2.0 * t2 + th) * h * d0
        + (3.0 * t2 - 2.0 * t3) * y1
        + (t3 - t2) * h * d1;
    let dv = (6.0 * t2 - 6.0 * th) * (y0 - y1) / h + (3.0 * t2 - 4.0 * th + 1.0) * d0 + (3.0 * t2 - 2.0 * th) * d1;
    (v, dv)
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.t[0]
    }

    pub fn end(&self) -> f64 {
        *self.t.last().expect("non-empty")
    }

    pub fn nodes(&self) -> &[f64] {
        &self.t
    }

    /// Integrated variable at the nodes (`x`, or `z` on the transformed route).
    pub fn raw_values(&self) -> &[f64] {
        &self.y
    }

    pub fn history(&self) -> &HistoryFunction {
        &self.psi
    }

    /// Dense output; returns whether `t` was read as a node.
    fn raw(&self, t: f64, side: Side) -> ((f64, f64), bool) {
        let n = self.t.len();
        let eps = snap(t);
        let j = self.t.partition_point(|&x| x < t - eps);
        if j < n && (self.t[j] - t).abs() <= eps {
            let d = if side == Side::Left { self.dl[j] } else { self.dr[j] };
            return ((self.y[j], d), true);
        }
        if n == 1 {
            return ((self.y[0], self.dr[0]), false);
        }
        let i = j.saturating_sub(1).min(n - 2);
        let h = self.t[i + 1] - self.t[i];
        (hermite(self.y[i], self.y[i + 1], self.dr[i], self.dl[i + 1], h, (t - self.t[i]) / h), false)
    }

    fn lift(&self, t: f64, y: f64, dy: f64) -> Result<(f64, f64), IntegratorError> {
        match &self.scale {
            None => Ok((y, dy)),
            Some(aux) => {
                let p = aux.p(t).map_err(ev("p", t))?;
                let dp = aux.dp(t).map_err(ev("p'", t))?;
                Ok((p * y, dp * y + p * dy))
            }
        }
    }

    /// `(x(t), x'(t))`, from ψ before `t0`; `x'` is the right derivative.
    pub fn state(&self, t: f64) -> Result<(f64, f64), IntegratorError> {
        let (lo, hi) = (self.psi.m, self.end());
        if !(t >= lo - 1e-12 && t <= hi + 1e-12) {
            return Err(IntegratorError::OutsideDomain { t, lo, hi });
        }
        if t < self.t0() {
            return history_state(&self.psi, t);
        }
        let ((y, dy), _) = self.raw(t, Side::Right);
        self.lift(t, y, dy)
    }

    pub fn value(&self, t: f64) -> Result<f64, IntegratorError> {
        Ok(self.state(t)?.0)
    }

    pub fn derivative(&self, t: f64) -> Result<f64, IntegratorError> {
        Ok(self.state(t)?.1)
    }

    /// `x` at the nodes.
    pub fn x_values(&self) -> Result<Vec<f64>, IntegratorError> {
        self.t.iter().zip(&self.y).zip(&self.dr).map(|((&t, &y), &d)| Ok(self.lift(t, y, d)?.0)).collect()
    }

    /// `max |x|` over nodes in `[from, to]`.
    pub fn sup_abs(&self, from: f64, to: f64) -> Result<f64, IntegratorError> {
        let mut best: f64 = 0.0;
        for ((&t, &y), &d) in self.t.iter().zip(&self.y).zip(&self.dr) {
            if t >= from && t <= to {
                best = best.max(self.lift(t, y, d)?.0.abs());
            }
        }
        Ok(best)
    }

    /// `t,x,xprime` rows for every `every`-th node plus the last one.
    pub fn to_csv(&self, every: usize) -> Result<String, IntegratorError> {
        let every = every.max(1);
        let mut out = String::from("t,x,xprime\n");
        let n = self.t.len();
        for i in (0..n).filter(|i| i % every == 0 || *i == n - 1) {
            let (x, dx) = self.lift(self.t[i], self.y[i], self.dr[i])?;
            let _ = writeln!(out, "{},{},{}", self.t[i], x, dx);
        }
        Ok(out)
    }
}

fn history_state(psi: &HistoryFunction, t: f64) -> Result<(f64, f64), IntegratorError> {
    let v = psi.value(t).map_err(ev("ψ", t))?;
    let d = match psi.derivative(t) {
        Some(d) => d.map_err(ev("ψ'", t))?,
        None => {
            let h = 1e-6 * (1.0 + t.abs());
            (psi.value(t + h).map_err(ev("ψ", t))? - psi.value(t - h).map_err(ev("ψ", t))?) / (2.0 * h)
        }
    };
    Ok((v, d))
}

/// Provisional end of the step in progress.
struct Pending {
    tn: f64,
    yn: f64,
    dn: f64,
    h: f64,
    y1: f64,
    d1: f64,
}

#[derive(Default)]
struct Flags {
    /// A reading came from the step in progress.
    provisional: bool,
    /// A left-sided reading landed on a node.
    on_node: bool,
}

struct Stepper<'a> {
    coeffs: Coefficients,
    general: Option<(&'a Expression, &'a Expression, &'a Expression, &'a Expression)>,
    scaled: bool,
}

impl Stepper<'_> {
    fn scale(&self, t: f64) -> Result<(f64, f64), IntegratorError> {
        if self.scaled {
            Ok((self.coeffs.p(t)?, self.coeffs.dp(t)?))
        } else {
            Ok((1.0, 0.0))
        }
    }

    /// `(x, x')` at a delayed argument. Stage evaluations inside a step
    /// approach their delayed arguments from the left; the first stage of
    /// a step reads from the right.
    fn read(
        &self,
        traj: &Trajectory,
        pending: &Pending,
        tau: f64,
        side: Side,
        flags: &mut Flags,
    ) -> Result<(f64, f64), IntegratorError> {
        let t0 = traj.t0();
        let eps = snap(tau);
        let in_history = match side {
            Side::Left => tau <= t0 + eps,
            Side::Right => tau < t0 - eps,
        };
        if in_history {
            if tau < traj.psi.m - 1e-12 {
                return Err(IntegratorError::OutsideDomain { t: tau, lo: traj.psi.m, hi: traj.end() });
            }
            if side == Side::Left && tau >= t0 - eps {
                flags.on_node = true;
                return history_state(&traj.psi, t0);
            }
            return history_state(&traj.psi, tau);
        }
        let (y, dy) = if tau <= pending.tn + eps {
            let (v, node) = traj.raw(tau, side);
            flags.on_node |= node && side == Side::Left;
            v
        } else if tau <= pending.tn + pending.h + eps {
            flags.provisional = true;
            let th = ((tau - pending.tn) / pending.h).min(1.0);
            hermite(pending.yn, pending.y1, pending.dn, pending.d1, pending.h, th)
        } else {
            return Err(IntegratorError::OutsideDomain { t: tau, lo: traj.psi.m, hi: pending.tn + pending.h });
        };
        let (p, dp) = self.scale(tau)?;
        Ok((p * y, dp * y + p * dy))
    }

    /// Derivative of the integrated variable at `(s, y)`.
    fn rhs(
        &self,
        traj: &Trajectory,
        pending: &Pending,
        s: f64,
        y: f64,
        side: Side,
        flags: &mut Flags,
    ) -> Result<f64, IntegratorError> {
        let c = &self.coeffs;
        let problem = &c.problem;
        let (p, dp) = self.scale(s)?;
        let tau1 = c.tau1(s)?;
        let tau2 = c.tau2(s)?;
        let (mut x1, dx1) = self.read(traj, pending, tau1, side, flags)?;
        let mut x2 = self.read(traj, pending, tau2, side, flags)?.0;
        // a vanishing delay reads the stage state itself
        if (tau1 - s).abs() <= 1e-14 * (1.0 + s.abs()) {
            x1 = p * y;
        }
        if (tau2 - s).abs() <= 1e-14 * (1.0 + s.abs()) {
            x2 = p * y;
        }
        let power = problem
            .nonlinearity
            .eval(&Env::tx(s, signed_power(x2, problem.gamma)))
            .map_err(ev("G", s))?;
        let mut dx = -c.a(s)? * x1 + c.c(s)? * power;
        match self.general {
            Some((q_t, q_x, d, f)) => {
                let env = Env::tx(s, x1);
                let qt = q_t.eval(&env).map_err(ev("Q_t", s))?;
                let qx = q_x.eval(&env).map_err(ev("Q_x", s))?;
                dx += qt + qx * dx1 * c.dtau1(s)?;
                let dv = d.at(s).map_err(ev("d", s))?;
                if dv != 0.0 {
                    dx += dv * f.eval(&Env::xy(x1, x2)).map_err(ev("F", s))?;
                }
            }
            None => dx += c.b(s)? * dx1,
        }
        Ok((dx - dp * y) / p)
    }

    /// One RK4 step to `t1`; `None` if the delayed readings inside the
    /// step do not settle. Returns the end value, its left derivative and
    /// whether a left reading sat on a node.
    fn attempt(&self, traj: &Trajectory, t1: f64) -> Result<Option<(f64, f64, bool)>, IntegratorError> {
        let n = traj.t.len() - 1;
        let (tn, yn, dn) = (traj.t[n], traj.y[n], traj.dr[n]);
        let h = t1 - tn;
        let mid = tn + 0.5 * h;
        let mut pending = Pending { tn, yn, dn, h, y1: yn + h * dn, d1: dn };
        for _ in 0..INNER_MAX {
            let mut flags = Flags::default();
            let k1 = dn;
            let k2 = self.rhs(traj, &pending, mid, yn + 0.5 * h * k1, Side::Left, &mut flags)?;
            let k3 = self.rhs(traj, &pending, mid, yn + 0.5 * h * k2, Side::Left, &mut flags)?;
            let k4 = self.rhs(traj, &pending, t1, yn + h * k3, Side::Left, &mut flags)?;
            let y1 = yn + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let d1 = self.rhs(traj, &pending, t1, y1, Side::Left, &mut flags)?;
            if !(y1.is_finite() && d1.is_finite()) {
                return Err(IntegratorError::NonFinite { t: t1 });
            }
            let settled = (y1 - pending.y1).abs() <= INNER_TOL * (1.0 + y1.abs())
                && (d1 - pending.d1).abs() <= INNER_TOL * (1.0 + d1.abs());
            pending.y1 = y1;
            pending.d1 = d1;
            if !flags.provisional || settled {
                return Ok(Some((y1, d1, flags.on_node)));
            }
        }
        Ok(None)
    }

    /// Right derivative at the last node.
    fn right_derivative(&self, traj: &Trajectory) -> Result<f64, IntegratorError> {
        let n = traj.t.len() - 1;
        let (tn, yn) = (traj.t[n], traj.y[n]);
        let pending = Pending { tn, yn, dn: traj.dr[n], h: 0.0, y1: yn, d1: traj.dr[n] };
        self.rhs(traj, &pending, tn, yn, Side::Right, &mut Flags::default())
    }
}

/// Integrates from `t0` to `opts.t_end` with ψ as history.
pub fn integrate(
    problem: &ProblemSpec,
    psi: &HistoryFunction,
    opts: &IntegratorOptions,
) -> Result<Trajectory, IntegratorError> {
    let t0 = problem.t0;
    if !(opts.step > 0.0) || !(opts.t_end > t0) {
        return Err(IntegratorError::Invalid(format!(
            "need step > 0 and T > t0 (step = {}, T = {})",
            opts.step, opts.t_end
        )));
    }
    let (m, _) = horizon(problem, opts.t_end)?;
    if psi.m > m + 1e-12 || (psi.t0 - t0).abs() > 1e-12 {
        return Err(IntegratorError::Invalid(format!(
            "history covers [{}, {}] but [{m}, {t0}] is needed",
            psi.m, psi.t0
        )));
    }
    let (aux, scale) = match &opts.route {
        Route::Direct => (AuxiliarySpec::trivial(t0), None),
        Route::Transformed(aux) => (aux.clone(), Some(aux.clone())),
    };
    let general = match &problem.neutral {
        NeutralPart::General { q_t, q_x, d, f, .. } => Some((q_t, q_x, d, f)),
        NeutralPart::Linear { .. } => None,
    };
    let stepper = Stepper { coeffs: Coefficients::new(problem.clone(), aux)?, general, scaled: scale.is_some() };

    let x0 = psi.value(t0).map_err(ev("ψ", t0))?;
    let (p0, _) = stepper.scale(t0)?;
    let y0 = x0 / p0;
    let mut traj = Trajectory { psi: psi.clone(), scale, t: vec![t0], y: vec![y0], dl: vec![0.0], dr: vec![0.0] };

    // right derivative at t0; only self-referential when τ1(t0) = t0
    let mut d0 = 0.0;
    for _ in 0..200 {
        traj.dr[0] = d0;
        let next = stepper.right_derivative(&traj)?;
        if !next.is_finite() {
            return Err(IntegratorError::NonFinite { t: t0 });
        }
        let done = (next - d0).abs() <= INNER_TOL * (1.0 + next.abs());
        d0 = next;
        if done {
            break;
        }
    }
    traj.dr[0] = d0;
    traj.dl[0] = history_state(psi, t0)?.1 / p0;

    let n_steps = ((opts.t_end - t0) / opts.step - 1e-9).ceil().max(1.0) as usize;
    let h_nominal = (opts.t_end - t0) / n_steps as f64;
    for i in 1..=n_steps {
        let target = if i == n_steps { opts.t_end } else { t0 + h_nominal * i as f64 };
        while *traj.t.last().expect("non-empty") < target {
            let tn = *traj.t.last().expect("non-empty");
            let mut t1 = target;
            let mut halvings = 0;
            let (y1, d1, on_node) = loop {
                match stepper.attempt(&traj, t1)? {
                    Some(v) => break v,
                    None if halvings < MAX_HALVINGS => {
                        t1 = tn + 0.5 * (t1 - tn);
                        halvings += 1;
                    }
                    None => return Err(IntegratorError::InnerIteration { t: tn, h: t1 - tn }),
                }
            };
            traj.t.push(t1);
            traj.y.push(y1);
            traj.dl.push(d1);
            traj.dr.push(d1);
            if on_node {
                let d = stepper.right_derivative(&traj)?;
                *traj.dr.last_mut().expect("non-empty") = d;
            }
        }
    }
    Ok(traj)
}

/// Least-squares slope of `log(error)` against `log(step)`.
pub fn fit_order(steps: &[f64], errors: &[f64]) -> Option<f64> {
    if steps.len() != errors.len() || steps.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(errors)
        .filter(|(h, e)| **h > 0.0 && **e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub steps: Vec<f64>,
    /// `|x_h(T) - x_ref(T)|` with the reference at half the finest step.
    pub errors: Vec<f64>,
    pub order: f64,
}

/// Self-convergence of `x(T)` over `steps` (at least three, coarse to fine).
pub fn convergence_order(
    problem: &ProblemSpec,
    psi: &HistoryFunction,
    t_end: f64,
    steps: &[f64],
) -> Result<ConvergenceStudy, IntegratorError> {
    if steps.len() < 3 {
        return Err(IntegratorError::Invalid("need at least three step sizes".into()));
    }
    let finest = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let runs: Vec<f64> = std::iter::once(0.5 * finest)
        .chain(steps.iter().copied())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&h| integrate(problem, psi, &IntegratorOptions::new(t_end, h))?.value(t_end))
        .collect::<Result<_, _>>()?;
    let errors: Vec<f64> = runs[1..].iter().map(|v| (v - runs[0]).abs()).collect();
    if errors.iter().all(|&e| e < 1e-14) {
        return Err(IntegratorError::Invalid("errors are at round-off level; no order can be fitted".into()));
    }
    let order = fit_order(steps, &errors)
        .ok_or_else(|| IntegratorError::Invalid("degenerate step list".into()))?;
    Ok(ConvergenceStudy { steps: steps.to_vec(), errors, order })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCase {
    pub label: String,
    pub history: String,
    /// `max |x|` over `[m(t0), T]` at the nodes and on ψ.
    pub sup: f64,
    /// `max |x|` over the last tenth of the run.
    pub tail_sup: f64,
    /// `max |x|` over the tenth before that.
    pub previous_sup: f64,
    pub final_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub epsilon: f64,
    pub delta: f64,
    pub t_end: f64,
    pub step: f64,
    pub cases: Vec<StabilityCase>,
    /// Every trajectory stays below ε.
    pub bounded: bool,
    /// Bounded, every `|x(T)| < 0.01 ε`, and every tail is no larger than
    /// the stretch before it.
    pub asymptotic: bool,
}

/// The default perturbed histories of size `delta` on `[m, t0]`: `±δ`,
/// a cosine and a ramp.
pub fn perturbation_family(delta: f64, m: f64, t0: f64) -> Result<Vec<(String, HistoryFunction)>, IntegratorError> {
    let span = t0 - m;
    let parse = |s: String| Expression::parse(&s).map_err(|e| IntegratorError::Invalid(e.to_string()));
    let mut out = vec![
        ("plus".to_string(), HistoryFunction::constant(delta, m, t0)),
        ("minus".to_string(), HistoryFunction::constant(-delta, m, t0)),
    ];
    let cos = parse(format!("{delta:e}*cos(t-({t0:e}))"))?;
    out.push(("cosine".to_string(), HistoryFunction::new(cos, None, m, t0)?));
    let ramp = if span > 0.0 {
        parse(format!("{delta:e}*(t-({m:e}))/{span:e}"))?
    } else {
        parse(format!("{delta:e}"))?
    };
    out.push(("ramp".to_string(), HistoryFunction::new(ramp, None, m, t0)?));
    Ok(out)
}

/// Integrates every member of `family` in parallel and records how far
/// each solution strays.
pub fn stability_experiment(
    problem: &ProblemSpec,
    epsilon: f64,
    delta: f64,
    family: &[(String, HistoryFunction)],
    opts: &IntegratorOptions,
) -> Result<StabilityReport, IntegratorError> {
    if !(delta > 0.0) || !(epsilon > 0.0) {
        return Err(IntegratorError::Invalid(format!("need ε > 0 and δ > 0 (ε = {epsilon}, δ = {delta})")));
    }
    let t0 = problem.t0;
    let span = opts.t_end - t0;
    let tail_from = opts.t_end - 0.1 * span;
    let previous_from = opts.t_end - 0.2 * span;
    let cases: Vec<StabilityCase> = family
        .par_iter()
        .map(|(label, psi)| {
            let traj = integrate(problem, psi, opts)?;
            Ok(StabilityCase {
                label: label.clone(),
                history: psi.psi.to_string(),
                sup: traj.sup_abs(t0, opts.t_end)?.max(psi.norm()),
                tail_sup: traj.sup_abs(tail_from, opts.t_end)?,
                previous_sup: traj.sup_abs(previous_from, tail_from)?,
                final_abs: traj.value(opts.t_end)?.abs(),
            })
        })
        .collect::<Result<_, IntegratorError>>()?;
    let bounded = cases.iter().all(|c| c.sup < epsilon);
    let asymptotic = bounded
        && cases.iter().all(|c| c.final_abs < 0.01 * epsilon && c.tail_sup <= c.previous_sup);
    Ok(StabilityReport { epsilon, delta, t_end: opts.t_end, step: opts.step, cases, bounded, asymptotic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DelaySpec, Rational};

    fn ex(s: &str) -> Expression {
        Expression::parse(s).unwrap()
    }

    fn linear(a: &str, b: &str, r: &str, c: &str) -> ProblemSpec {
        ProblemSpec {
            t0: 0.0,
            gamma: Rational::exponent(1, 3).unwrap(),
            a: ex(a),
            c: ex(c),
            nonlinearity: ex("sin(x)"),
            k4: 1.0,
            r1: DelaySpec::new(ex(r)).unwrap(),
            r2: DelaySpec::new(ex(r)).unwrap(),
            neutral: NeutralPart::Linear { b: ex(b) },
        }
    }

    #[test]
    fn ode_limit_matches_exponential() {
        let p = linear("2", "0", "0", "0");
        let psi = HistoryFunction::constant(1.0, 0.0, 0.0);
        let traj = integrate(&p, &psi, &IntegratorOptions::new(3.0, 0.01)).unwrap();
        assert!((traj.value(3.0).unwrap() - (-6.0f64).exp()).abs() < 1e-9);
        assert!((traj.value(1.234).unwrap() - (-2.468f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn method_of_steps_first_interval() {
        // x' = -x(t-1), ψ ≡ 1: x = 1 - t on [0,1], 1 - t + (t-1)²/2 on [1,2]
        let p = linear("1", "0", "1", "0");
        let psi = HistoryFunction::constant(1.0, -1.0, 0.0);
        let traj = integrate(&p, &psi, &IntegratorOptions::new(2.0, 0.01)).unwrap();
        for t in [0.3, 0.77, 1.0, 1.5, 2.0] {
            let exact = if t <= 1.0 { 1.0 - t } else { 1.0 - t + (t - 1.0f64).powi(2) / 2.0 };
            assert!((traj.value(t).unwrap() - exact).abs() < 1e-12, "t = {t}");
        }
        assert_eq!(traj.value(-0.5).unwrap(), 1.0);
        assert!(traj.value(2.5).is_err());
    }

    #[test]
    fn neutral_method_of_steps() {
        // x' = 0.5 x'(t-1), ψ = t: x' = 0.5 on (0,1], x = t/2 there
        let p = linear("0", "0.5", "1", "0");
        let psi = HistoryFunction::new(ex("t"), None, -1.0, 0.0).unwrap();
        let traj = integrate(&p, &psi, &IntegratorOptions::new(1.5, 0.01)).unwrap();
        assert!((traj.value(1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((traj.value(1.5).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn pantograph_has_the_series_solution() {
        // x' = -x(t/2), x(0) = 1: x = Σ (-1)^n t^n / (n! 2^{n(n-1)/2})
        let p = linear("1", "0", "0.5*t", "0");
        let psi = HistoryFunction::constant(1.0, 0.0, 0.0);
        let traj = integrate(&p, &psi, &IntegratorOptions::new(2.0, 0.01)).unwrap();
        let mut exact = 0.0;
        let mut term = 1.0f64;
        for n in 0..30 {
            if n > 0 {
                term *= -2.0 / n as f64 / 2f64.powi(n - 1);
            }
            exact += term;
        }
        assert!((traj.value(2.0).unwrap() - exact).abs() < 1e-10, "{}", traj.value(2.0).unwrap() - exact);
    }

    #[test]
    fn rk4_order_on_a_smooth_problem() {
        let p = linear("1", "0", "0.5*t", "0");
        let psi = HistoryFunction::constant(1.0, 0.0, 0.0);
        let study = convergence_order(&p, &psi, 2.0, &[0.2, 0.1, 0.05]).unwrap();
        assert!((study.order - 4.0).abs() < 0.3, "{study:?}");
        assert!(convergence_order(&p, &psi, 2.0, &[0.2, 0.1]).is_err());
    }

    #[test]
    fn order_fit_examples() {
        assert!((fit_order(&[0.1, 0.05], &[1e-4, 6.25e-6]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(fit_order(&[0.1], &[1.0]), None);
        assert_eq!(fit_order(&[0.1, 0.1], &[1.0, 2.0]), None);
    }

    #[test]
    fn transformed_route_agrees() {
        let p = linear("1", "0.2*sin(t)", "0.5*t", "0.1");
        let aux = AuxiliarySpec::new(0.0, ex("1/(t+1)"), ex("0")).unwrap();
        let psi = HistoryFunction::constant(0.01, 0.0, 0.0);
        let direct = integrate(&p, &psi, &IntegratorOptions::new(5.0, 0.005)).unwrap();
        let via_z = integrate(&p, &psi, &IntegratorOptions::new(5.0, 0.005).transformed(aux)).unwrap();
        for t in [0.5, 2.0, 5.0] {
            assert!((direct.value(t).unwrap() - via_z.value(t).unwrap()).abs() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn csv_rows() {
        let p = linear("1", "0", "0", "0");
        let psi = HistoryFunction::constant(1.0, 0.0, 0.0);
        let traj = integrate(&p, &psi, &IntegratorOptions::new(1.0, 0.25)).unwrap();
        let csv = traj.to_csv(2).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3);
        assert!(csv.starts_with("t,x,xprime\n0,1,-1\n"));
    }

    #[test]
    fn stability_family_is_small_for_a_damped_problem() {
        let p = linear("1", "0", "1", "0.01");
        let family = perturbation_family(1e-3, -1.0, 0.0).unwrap();
        let report = stability_experiment(&p, 0.1, 1e-3, &family, &IntegratorOptions::new(40.0, 0.01)).unwrap();
        assert_eq!(report.cases.len(), 4);
        assert!(report.bounded && report.asymptotic, "{report:?}");
        assert!(stability_experiment(&p, 0.1, 0.0, &family, &IntegratorOptions::new(40.0, 0.01)).is_err());
    }

    #[test]
    fn zero_family_stays_at_zero() {
        let p = linear("1", "0.3", "1", "0.01");
        let family = vec![("zero".to_string(), HistoryFunction::constant(0.0, -1.0, 0.0))];
        let report = stability_experiment(&p, 0.1, 1e-3, &family, &IntegratorOptions::new(5.0, 0.01)).unwrap();
        assert_eq!(report.cases[0].sup, 0.0);
        assert!(report.bounded);
    }
}
