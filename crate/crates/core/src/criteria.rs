//! Boundedness and stability criteria.
//!
//! Every condition quantifies over all `t ≥ t0`; here it is evaluated on
//! `[t0, Tmax]` with a supremum scan and tail diagnostics, so a "satisfied"
//! verdict means grid-certified, not proved.
//!
//! Notation: `k(u) = g(u) - p'(u)/p(u)` with `p` extended by 1 left of `t0`,
//! `τj(t) = t - rj(t)`, `w(s, t) = e^{-∫_s^t g}`. In the linear-neutral form
//! `β = b/(1 - r1')` and `c̄ = p(τ1)/p · β` (the neutral combination, not
//! the coefficient `c` of the nonlinearity).

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{DiffError, EvalError, Expression, Var};
use crate::model::{horizon, signed_power, AuxiliarySpec, Form, ModelError, NeutralPart, ProblemSpec};
use crate::quadrature::{
    sup_scan, CumulativeExponent, CumulativeIntegral, Integrand, QuadError, WeightedIntegral,
};

pub const DEFAULT_TMAX: f64 = 1e4;
pub const DEFAULT_COARSE: usize = 4096;
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Window lengths used for the empirical Lipschitz constants.
const WINDOWS: [f64; 3] = [1.0, 0.125, 1.0 / 64.0];
const TAIL_SAMPLES: usize = 257;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CriteriaError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("{what}: {source} (at t = {t})")]
    Eval {
        what: &'static str,
        t: f64,
        #[source]
        source: EvalError,
    },
    #[error("{what}: {source}")]
    Diff {
        what: &'static str,
        #[source]
        source: DiffError,
    },
    #[error("alpha = {0} is not below 1")]
    AlphaTooLarge(f64),
    #[error("{0}")]
    Invalid(String),
}

fn ev(what: &'static str, t: f64) -> impl FnOnce(EvalError) -> CriteriaError {
    move |source| CriteriaError::Eval { what, t, source }
}

/// Pointwise coefficient algebra shared by the criteria, the operator and
/// the bracket-matched coefficient builder.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub problem: ProblemSpec,
    pub aux: AuxiliarySpec,
    db: Option<Expression>,
}

impl Coefficients {
    pub fn new(problem: ProblemSpec, aux: AuxiliarySpec) -> Result<Self, CriteriaError> {
        let db = match &problem.neutral {
            NeutralPart::Linear { b } => Some(
                b.differentiate(Var::T)
                    .map_err(|source| CriteriaError::Diff { what: "b'", source })?,
            ),
            NeutralPart::General { .. } => None,
        };
        Ok(Coefficients { problem, aux, db })
    }

    pub fn form(&self) -> Form {
        self.problem.form()
    }

    pub fn t0(&self) -> f64 {
        self.problem.t0
    }

    /// `p` extended by 1 left of `t0`.
    pub fn p(&self, t: f64) -> Result<f64, CriteriaError> {
        self.aux.p(t).map_err(ev("p", t))
    }

    pub fn dp(&self, t: f64) -> Result<f64, CriteriaError> {
        self.aux.dp(t).map_err(ev("p'", t))
    }

    pub fn g(&self, t: f64) -> Result<f64, CriteriaError> {
        self.aux.g(t).map_err(ev("g", t))
    }

    /// `k = g - p'/p`.
    pub fn k(&self, t: f64) -> Result<f64, CriteriaError> {
        self.aux.drift(t).map_err(ev("g - p'/p", t))
    }

    pub fn a(&self, t: f64) -> Result<f64, CriteriaError> {
        self.problem.a.at(t).map_err(ev("a", t))
    }

    pub fn c(&self, t: f64) -> Result<f64, CriteriaError> {
        self.problem.c.at(t).map_err(ev("c", t))
    }

    pub fn tau1(&self, t: f64) -> Result<f64, CriteriaError> {
        self.problem.r1.tau(t).map_err(ev("t - r1(t)", t))
    }

    pub fn tau2(&self, t: f64) -> Result<f64, CriteriaError> {
        self.problem.r2.tau(t).map_err(ev("t - r2(t)", t))
    }

    /// `1 - r1'(t)`, never zero.
    pub fn dtau1(&self, t: f64) -> Result<f64, CriteriaError> {
        let v = self.problem.r1.dtau(t).map_err(ev("r1'", t))?;
        if v == 0.0 {
            return Err(ModelError::UnitDelaySlope { t }.into());
        }
        Ok(v)
    }

    fn linear_b(&self) -> Result<&Expression, CriteriaError> {
        match &self.problem.neutral {
            NeutralPart::Linear { b } => Ok(b),
            NeutralPart::General { .. } => {
                Err(CriteriaError::Invalid("operation needs the linear-neutral form".into()))
            }
        }
    }

    pub fn b(&self, t: f64) -> Result<f64, CriteriaError> {
        self.linear_b()?.at(t).map_err(ev("b", t))
    }

    /// `β = b/(1 - r1')`.
    pub fn beta(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok(self.b(t)? / self.dtau1(t)?)
    }

    /// `β' = (b'(1 - r1') + b r1'')/(1 - r1')²`.
    pub fn dbeta(&self, t: f64) -> Result<f64, CriteriaError> {
        let db = self.db.as_ref().ok_or_else(|| CriteriaError::Invalid("b' unavailable".into()))?;
        let db = db.at(t).map_err(ev("b'", t))?;
        let b = self.b(t)?;
        let dtau = self.dtau1(t)?;
        let ddr = self.problem.r1.ddr(t).map_err(ev("r1''", t))?;
        Ok((db * dtau + b * ddr) / (dtau * dtau))
    }

    /// `c̄ = p(τ1)/p · β`.
    pub fn cbar(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok(self.p(self.tau1(t)?)? / self.p(t)? * self.beta(t)?)
    }

    /// `c̄'` by the chain rule on the extended `p`.
    pub fn dcbar(&self, t: f64) -> Result<f64, CriteriaError> {
        let tau = self.tau1(t)?;
        let p1 = self.p(tau)?;
        let dp1 = self.dp(tau)? * self.dtau1(t)?;
        let p = self.p(t)?;
        let dp = self.dp(t)?;
        let beta = self.beta(t)?;
        let dbeta = self.dbeta(t)?;
        Ok(dp1 * beta / p + p1 * dbeta / p - p1 * beta * dp / (p * p))
    }

    /// `(μ̄, c̄, β̄)` of the linear-neutral criterion at `s`.
    pub fn linear_form_coefficients(&self, s: f64) -> Result<(f64, f64, f64), CriteriaError> {
        let tau = self.tau1(s)?;
        let p = self.p(s)?;
        if p <= 0.0 {
            return Err(ModelError::NonPositiveWeight { t: s, value: p }.into());
        }
        let mu = (self.a(s)? * self.p(tau)? - self.b(s)? * self.dp(tau)?) / p;
        let cbar = self.cbar(s)?;
        let betabar = self.g(s)? * cbar + self.dcbar(s)?;
        Ok((mu, cbar, betabar))
    }

    /// Bound of the neutral functional: `bQ(t)` or `|β(t)|`.
    pub fn neutral_bound(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok(self.problem.neutral_bound(t)?)
    }

    /// `|p(τ1)/p · bQ|` at `t`.
    pub fn neutral_term(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok((self.p(self.tau1(t)?)? / self.p(t)?).abs() * self.neutral_bound(t)?)
    }

    /// `k(τ1)(1 - r1') - a p(τ1)/p`.
    pub fn bracket_general(&self, s: f64) -> Result<f64, CriteriaError> {
        let tau = self.tau1(s)?;
        Ok(self.k(tau)? * self.dtau1(s)? - self.a(s)? * self.p(tau)? / self.p(s)?)
    }

    /// `-μ̄ + k(τ1)(1 - r1') - β̄`.
    pub fn bracket_linear(&self, s: f64) -> Result<f64, CriteriaError> {
        let (mu, _, betabar) = self.linear_form_coefficients(s)?;
        Ok(-mu + self.k(self.tau1(s)?)? * self.dtau1(s)? - betabar)
    }

    /// `|(g p - p')/p²| · bQ · |p(τ1)|`.
    pub fn neutral_weighted(&self, s: f64) -> Result<f64, CriteriaError> {
        let p = self.p(s)?;
        let lead = (self.g(s)? * p - self.dp(s)?) / (p * p);
        Ok(lead.abs() * self.neutral_bound(s)? * self.p(self.tau1(s)?)?.abs())
    }

    /// `|d/p| · |k2 p(τ1) + k3 p(τ2)|`.
    pub fn d_term(&self, s: f64) -> Result<f64, CriteriaError> {
        match &self.problem.neutral {
            NeutralPart::General { d, k2, k3, .. } => {
                let d = d.at(s).map_err(ev("d", s))?;
                if d == 0.0 {
                    return Ok(0.0);
                }
                let mix = k2 * self.p(self.tau1(s)?)? + k3 * self.p(self.tau2(s)?)?;
                Ok((d / self.p(s)?).abs() * mix.abs())
            }
            NeutralPart::Linear { .. } => Ok(0.0),
        }
    }

    /// `|c/p| · p^γ(τ2)`, the integrand of the Lipschitz window and of the
    /// compact part.
    pub fn c_density(&self, s: f64) -> Result<f64, CriteriaError> {
        let c = self.c(s)?;
        if c == 0.0 {
            return Ok(0.0);
        }
        let p2 = self.p(self.tau2(s)?)?;
        Ok((c / self.p(s)?).abs() * signed_power(p2, self.problem.gamma).abs())
    }
}

/// Which criterion a term belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    Pointwise,
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[allow(clippy::enum_variant_names)]
enum Term {
    Neutral,
    DriftWindow,
    BracketGeneral,
    BracketLinear,
    WindowMemory,
    NeutralWeighted,
    DTerm,
    CTerm,
}

impl Term {
    fn id(self, form: Form) -> &'static str {
        match (self, form) {
            (Term::Neutral, _) => "t1",
            (Term::DriftWindow, _) => "t2",
            (Term::BracketGeneral | Term::BracketLinear, _) => "t3",
            (Term::WindowMemory, _) => "t4",
            (Term::NeutralWeighted, _) => "t5",
            (Term::DTerm, _) => "t6a",
            (Term::CTerm, Form::General) => "t6b",
            (Term::CTerm, Form::LinearNeutral) => "t5",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Term::Neutral => "neutral ratio",
            Term::DriftWindow => "drift window",
            Term::BracketGeneral => "delayed-drift bracket",
            Term::BracketLinear => "combined bracket",
            Term::WindowMemory => "window memory",
            Term::NeutralWeighted => "weighted neutral",
            Term::DTerm => "d-term",
            Term::CTerm => "c-term",
        }
    }

    fn kind(self) -> TermKind {
        match self {
            Term::Neutral | Term::DriftWindow => TermKind::Pointwise,
            _ => TermKind::Weighted,
        }
    }
}

fn terms_for(form: Form) -> &'static [Term] {
    match form {
        Form::General => &[
            Term::Neutral,
            Term::DriftWindow,
            Term::BracketGeneral,
            Term::WindowMemory,
            Term::NeutralWeighted,
            Term::DTerm,
            Term::CTerm,
        ],
        Form::LinearNeutral => &[
            Term::Neutral,
            Term::DriftWindow,
            Term::BracketLinear,
            Term::WindowMemory,
            Term::CTerm,
        ],
    }
}

fn quad_err(s: f64) -> impl FnOnce(CriteriaError) -> QuadError {
    move |e| match e {
        CriteriaError::Quad(q) => q,
        other => QuadError::integrand(s, other),
    }
}

/// Criterion evaluator for one problem/auxiliary pair on `[t0, tmax]`.
pub struct Evaluator {
    coeffs: Arc<Coefficients>,
    m: f64,
    tmax: f64,
    exponent: Arc<CumulativeExponent>,
    abs_drift: Arc<CumulativeIntegral>,
    weighted: Vec<(Term, WeightedIntegral, Integrand)>,
    compact: WeightedIntegral,
}

impl Evaluator {
    pub fn new(problem: &ProblemSpec, aux: &AuxiliarySpec, tmax: f64) -> Result<Self, CriteriaError> {
        let (m, _) = horizon(problem, tmax)?;
        let coeffs = Arc::new(Coefficients::new(problem.clone(), aux.clone())?);
        let t0 = problem.t0;

        let c = coeffs.clone();
        let g: Integrand = Arc::new(move |s| c.g(s).map_err(quad_err(s)));
        let exponent = Arc::new(CumulativeExponent::new(g, m, t0));

        let c = coeffs.clone();
        let abs_k: Integrand = Arc::new(move |s| c.k(s).map(f64::abs).map_err(quad_err(s)));
        let abs_drift = Arc::new(CumulativeIntegral::new(abs_k, m, t0));

        let mut weighted = Vec::new();
        for &term in terms_for(problem.form()) {
            if term.kind() != TermKind::Weighted {
                continue;
            }
            let c = coeffs.clone();
            let window = abs_drift.clone();
            let f: Integrand = Arc::new(move |s| {
                let v = match term {
                    Term::BracketGeneral => c.bracket_general(s).map(f64::abs),
                    Term::BracketLinear => c.bracket_linear(s).map(f64::abs),
                    Term::WindowMemory => c.g(s).and_then(|g| {
                        if g == 0.0 {
                            return Ok(0.0);
                        }
                        Ok(g.abs() * window.between(c.tau1(s)?, s)?)
                    }),
                    Term::NeutralWeighted => c.neutral_weighted(s),
                    Term::DTerm => c.d_term(s),
                    Term::CTerm => c.c_density(s).map(|v| c.problem.k4 * v),
                    Term::Neutral | Term::DriftWindow => unreachable!("pointwise term"),
                };
                v.map_err(quad_err(s))
            });
            weighted.push((term, WeightedIntegral::new(f.clone(), exponent.clone()), f));
        }
        let c = coeffs.clone();
        let density: Integrand = Arc::new(move |s| c.c_density(s).map_err(quad_err(s)));
        let compact = WeightedIntegral::new(density, exponent.clone());

        Ok(Evaluator { coeffs, m, tmax, exponent, abs_drift, weighted, compact })
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    pub fn horizon(&self) -> f64 {
        self.m
    }

    pub fn exponent(&self) -> &Arc<CumulativeExponent> {
        &self.exponent
    }

    pub fn form(&self) -> Form {
        self.coeffs.form()
    }

    /// Term identifiers in report order.
    pub fn term_ids(&self) -> Vec<&'static str> {
        terms_for(self.form()).iter().map(|t| t.id(self.form())).collect()
    }

    fn check_time(&self, t: f64) -> Result<(), CriteriaError> {
        if !(t >= self.coeffs.t0()) || t > self.tmax {
            return Err(CriteriaError::Invalid(format!(
                "t = {t} outside [{}, {}]",
                self.coeffs.t0(),
                self.tmax
            )));
        }
        Ok(())
    }

    fn term_value(&self, term: Term, t: f64) -> Result<f64, CriteriaError> {
        match term {
            Term::Neutral => match self.form() {
                Form::General => self.coeffs.neutral_term(t),
                Form::LinearNeutral => self.coeffs.cbar(t).map(f64::abs),
            },
            Term::DriftWindow => Ok(self.abs_drift.between(self.coeffs.tau1(t)?, t)?),
            _ => {
                let (_, w, _) = self.weighted.iter().find(|(x, _, _)| *x == term).expect("weighted term");
                Ok(w.value(t)?)
            }
        }
    }

    /// All criterion addends at `t`, in report order.
    pub fn term_values(&self, t: f64) -> Result<Vec<f64>, CriteriaError> {
        self.check_time(t)?;
        terms_for(self.form()).iter().map(|&term| self.term_value(term, t)).collect()
    }

    pub fn criterion_sum(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok(self.term_values(t)?.iter().sum())
    }

    /// `G(t) = ∫_{t0}^t g`.
    pub fn cumulative_exponent(&self, t: f64) -> Result<f64, CriteriaError> {
        Ok(self.exponent.value(t)?)
    }

    /// The compact-part magnitude `∫ w |c/p| p^γ(τ2)` at `t` (no `k4`).
    pub fn compact_term(&self, t: f64) -> Result<f64, CriteriaError> {
        self.check_time(t)?;
        Ok(self.compact.value(t)?)
    }

    /// Builds every table up to `tmax` so later parallel scans only read.
    fn warm(&self) -> Result<(), CriteriaError> {
        self.term_values(self.tmax)?;
        self.compact.value(self.tmax)?;
        Ok(())
    }

    /// Supremum of the criterion on `[t0, tmax]` with per-term diagnostics.
    pub fn alpha_estimate(&self, n_coarse: usize) -> Result<AlphaEstimate, CriteriaError> {
        if n_coarse < 64 {
            return Err(CriteriaError::Invalid(format!("n_coarse = {n_coarse} < 64")));
        }
        self.warm()?;
        let t0 = self.coeffs.t0();
        let span = self.tmax - t0;
        let sum = sup_scan(|t| self.criterion_sum(t), t0, self.tmax, n_coarse)?;
        let (mut alpha, mut argsup) = (sum.sup, sum.argsup);

        let tail_grid: Vec<f64> = (0..TAIL_SAMPLES)
            .map(|i| t0 + span * (0.8 + 0.2 * i as f64 / (TAIL_SAMPLES - 1) as f64))
            .collect();
        let half = TAIL_SAMPLES / 2;

        let mut terms = Vec::new();
        for &term in terms_for(self.form()) {
            let scan = sup_scan(|t| self.term_value(term, t), t0, self.tmax, n_coarse)?;
            let at_own = self.criterion_sum(scan.argsup)?;
            if at_own > alpha {
                alpha = at_own;
                argsup = scan.argsup;
            }
            let projection = match term.kind() {
                TermKind::Pointwise => {
                    let vals: Vec<f64> =
                        tail_grid.par_iter().map(|&t| self.term_value(term, t)).collect::<Result<_, _>>()?;
                    let prev = vals[..=half].iter().copied().fold(0.0, f64::max);
                    let last = vals[half..].iter().copied().fold(0.0, f64::max);
                    let slope = (last - prev) / (0.1 * span);
                    last + slope.max(0.0) * span
                }
                TermKind::Weighted => {
                    let (_, w, f) = self.weighted.iter().find(|(x, _, _)| *x == term).expect("weighted term");
                    let mut ratio: f64 = 0.0;
                    for &s in &tail_grid[half..] {
                        let fs = f(s)?;
                        let gs = self.coeffs.g(s)?;
                        ratio = ratio.max(if fs == 0.0 {
                            0.0
                        } else if gs > 0.0 {
                            fs / gs
                        } else {
                            f64::INFINITY
                        });
                    }
                    w.value(self.tmax)?.max(ratio)
                }
            };
            terms.push(TermSup {
                id: term.id(self.form()).to_string(),
                label: term.label().to_string(),
                kind: term.kind(),
                sup: scan.sup,
                argsup: scan.argsup,
                tail_slope: scan.tail_slope,
                projection,
            });
        }
        let sum_of_sups = terms.iter().map(|t| t.sup).sum();
        let projected = alpha.max(terms.iter().map(|t| t.projection).sum());
        let verdict = if alpha >= 1.0 {
            Verdict::Violated
        } else if projected < 1.0 {
            Verdict::Satisfied
        } else {
            Verdict::Inconclusive
        };
        Ok(AlphaEstimate {
            alpha,
            argsup,
            tail_slope: sum.tail_slope,
            sum_of_sups,
            projected,
            verdict,
            terms,
        })
    }

    /// Empirical window constant of `|c/p| p^γ(τ2)` (L1) or `g` (L2).
    pub fn window_lipschitz(&self, kind: WindowKind, n_coarse: usize) -> Result<WindowLipschitz, CriteriaError> {
        let t0 = self.coeffs.t0();
        if self.tmax <= t0 + 1.0 {
            return Err(CriteriaError::Invalid("window constants need Tmax > t0 + 1".into()));
        }
        let c = self.coeffs.clone();
        let f: Integrand = match kind {
            WindowKind::CTerm => Arc::new(move |s| c.c_density(s).map_err(quad_err(s))),
            WindowKind::G => Arc::new(move |s| c.g(s).map_err(quad_err(s))),
        };
        let table = CumulativeIntegral::new(f.clone(), t0, t0);
        table.value(self.tmax)?;
        let mut windowed: f64 = 0.0;
        for len in WINDOWS {
            let hi = self.tmax - len;
            let step = (hi - t0) / (n_coarse - 1) as f64;
            let best = (0..n_coarse)
                .into_par_iter()
                .map(|i| {
                    let a = t0 + step * i as f64;
                    Ok::<f64, QuadError>(table.between(a, a + len)?.abs() / len)
                })
                .try_reduce(|| 0.0, |x, y| Ok(x.max(y)))?;
            windowed = windowed.max(best);
        }
        let pointwise = sup_scan(|t| Ok::<_, CriteriaError>(f(t)?.abs()), t0, self.tmax, n_coarse)?.sup;
        Ok(WindowLipschitz { windowed, pointwise, value: windowed.max(pointwise) })
    }

    /// `K = sup_{t0 ≤ t1 ≤ t2} e^{-∫_{t1}^{t2} g}` on the grid.
    pub fn k_estimate(&self, n_coarse: usize) -> Result<f64, CriteriaError> {
        k_estimate(&self.exponent, self.coeffs.t0(), self.tmax, n_coarse)
    }

    /// Tail behaviour of the compact part and of `G`.
    pub fn asymptotic_check(&self) -> Result<Asymptotics, CriteriaError> {
        self.compact.value(self.tmax)?;
        let t0 = self.coeffs.t0();
        let span = self.tmax - t0;
        let a_tail = self.compact.value(self.tmax)?;
        let a_tail_slope = (a_tail - self.compact.value(self.tmax - 0.1 * span)?) / (0.1 * span);
        let g_end = self.exponent.value(self.tmax)?;
        let g_half = self.exponent.value(t0 + 0.5 * span)?;
        let g_quarter = self.exponent.value(t0 + 0.25 * span)?;
        let inc = g_end - g_half;
        let prev = g_half - g_quarter;
        let g_divergent = inc > std::f64::consts::LN_2 || (prev > 0.0 && inc >= 0.99 * prev);
        Ok(Asymptotics {
            a_tail,
            a_tail_slope,
            a_decaying: a_tail_slope < 0.0 || a_tail < 1e-3,
            g_end,
            g_divergent,
        })
    }

    /// `C = 1 + ∫_{τ1(t0)}^{t0} |k| + bQ(t0)`.
    pub fn head_constant(&self) -> Result<f64, CriteriaError> {
        let t0 = self.coeffs.t0();
        let tau = self.coeffs.tau1(t0)?;
        Ok(1.0 + self.abs_drift.between(tau, t0)? + self.coeffs.neutral_bound(t0)?)
    }
}

/// `K` for an arbitrary exponent table (also used for sign-changing `g`).
pub fn k_estimate(exponent: &CumulativeExponent, t0: f64, tmax: f64, n: usize) -> Result<f64, CriteriaError> {
    let step = (tmax - t0) / (n - 1) as f64;
    let mut running = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let t = if i + 1 == n { tmax } else { t0 + step * i as f64 };
        let g = exponent.value(t)?;
        running = running.max(g);
        worst = worst.max(running - g);
    }
    Ok(worst.exp())
}

/// `δ_existence = (1-α)/C` and `δ_uniform = min{ε, (1-α)ε/(2K)}` shrunk by
/// a relative `1e-9` so the defining inequality is strict.
pub fn delta_bounds(alpha: f64, k: f64, epsilon: f64, head: f64) -> Result<DeltaBounds, CriteriaError> {
    if !(alpha < 1.0) {
        return Err(CriteriaError::AlphaTooLarge(alpha));
    }
    if !(k >= 1.0) || !(epsilon > 0.0) || !(head > 0.0) {
        return Err(CriteriaError::Invalid(format!("need K >= 1, ε > 0, C > 0 (K = {k}, ε = {epsilon}, C = {head})")));
    }
    let existence = (1.0 - alpha) / head;
    let uniform = epsilon.min((1.0 - alpha) * epsilon / (2.0 * k)) * (1.0 - 1e-9);
    Ok(DeltaBounds { epsilon, existence, uniform })
}

/// The coefficient `a(t)` that makes the linear-neutral combined bracket
/// equal `target(t)`:
/// `a = [p (k(τ1)(1 - r1') - β̄ - target) + b p'(τ1)] / p(τ1)`.
///
/// Built symbolically from the user's `p`, so it requires `τ1(t) ≥ t0` on
/// the working interval (checked on a grid up to `tmax`).
pub fn bracket_matched_a(
    problem: &ProblemSpec,
    aux: &AuxiliarySpec,
    target: &Expression,
    tmax: f64,
) -> Result<Expression, CriteriaError> {
    let b = match &problem.neutral {
        NeutralPart::Linear { b } => b.clone(),
        NeutralPart::General { .. } => {
            return Err(CriteriaError::Invalid("bracket matching needs the linear-neutral form".into()))
        }
    };
    let t0 = problem.t0;
    let n = 2001;
    for i in 0..n {
        let t = t0 + (tmax - t0) * i as f64 / (n - 1) as f64;
        let tau = problem.r1.tau(t).map_err(ev("t - r1(t)", t))?;
        if tau < t0 - 1e-12 {
            return Err(CriteriaError::Invalid(format!(
                "bracket matching needs t - r1(t) >= t0; got {tau} at t = {t}"
            )));
        }
    }
    use Expression as E;
    let tau = problem.r1.tau_expression();
    let at_tau = |e: &Expression| e.substitute(Var::T, &tau);
    let p = aux.p.clone();
    let p1 = at_tau(&aux.p);
    let dp1 = at_tau(&aux.dp);
    let k1 = E::sub(at_tau(&aux.g), E::div(dp1.clone(), p1.clone()));
    let dtau = E::sub(E::Const(1.0), problem.r1.expression().differentiate(Var::T).map_err(|source| {
        CriteriaError::Diff { what: "r1'", source }
    })?);
    let beta = E::div(b.clone(), dtau.clone());
    let cbar = E::mul(E::div(p1.clone(), p.clone()), beta);
    let dcbar = cbar.differentiate(Var::T).map_err(|source| CriteriaError::Diff { what: "c̄'", source })?;
    let betabar = E::add(E::mul(aux.g.clone(), cbar), dcbar);
    let inner = E::sub(E::sub(E::mul(k1, dtau), betabar), target.clone());
    Ok(E::div(E::add(E::mul(p, inner), E::mul(b, dp1)), p1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// `|c/p| p^γ(τ2)`, constant L1.
    CTerm,
    /// `g`, constant L2.
    G,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Satisfied => "satisfied",
            Verdict::Violated => "violated",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermSup {
    pub id: String,
    pub label: String,
    pub kind: TermKind,
    pub sup: f64,
    pub argsup: f64,
    pub tail_slope: f64,
    /// Estimated limit superior beyond `tmax`.
    pub projection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    /// Supremum of the summed criterion.
    pub alpha: f64,
    pub argsup: f64,
    pub tail_slope: f64,
    pub sum_of_sups: f64,
    /// `max(alpha, Σ projections)`.
    pub projected: f64,
    pub verdict: Verdict,
    pub terms: Vec<TermSup>,
}

impl AlphaEstimate {
    pub fn term(&self, id: &str) -> Option<&TermSup> {
        self.terms.iter().find(|t| t.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLipschitz {
    pub windowed: f64,
    pub pointwise: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asymptotics {
    pub a_tail: f64,
    pub a_tail_slope: f64,
    pub a_decaying: bool,
    pub g_end: f64,
    pub g_divergent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBounds {
    pub epsilon: f64,
    pub existence: f64,
    pub uniform: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub bounded: Verdict,
    pub uniform_stability: Verdict,
    pub asymptotic_stability: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub tmax: f64,
    pub n_coarse: usize,
    pub epsilon: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { tmax: DEFAULT_TMAX, n_coarse: DEFAULT_COARSE, epsilon: DEFAULT_EPSILON }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub form: Form,
    pub t0: f64,
    pub horizon: f64,
    pub tmax: f64,
    pub n_coarse: usize,
    pub certification: String,
    pub alpha: AlphaEstimate,
    pub l1: WindowLipschitz,
    pub l2: WindowLipschitz,
    pub k: f64,
    pub head_constant: f64,
    pub delta: Option<DeltaBounds>,
    pub asymptotics: Asymptotics,
    pub verdicts: Verdicts,
    pub warnings: Vec<String>,
}

/// Evaluates every criterion and assembles the report.
pub fn evaluate(
    problem: &ProblemSpec,
    aux: &AuxiliarySpec,
    options: &ReportOptions,
) -> Result<CriteriaReport, CriteriaError> {
    let mut warnings: Vec<String> = problem.validate(options.tmax)?.into_iter().map(|w| w.0).collect();
    let evaluator = Evaluator::new(problem, aux, options.tmax)?;
    warnings.extend(aux.validate(evaluator.horizon(), options.tmax)?.into_iter().map(|w| w.0));

    let alpha = evaluator.alpha_estimate(options.n_coarse)?;
    let l1 = evaluator.window_lipschitz(WindowKind::CTerm, options.n_coarse)?;
    let l2 = evaluator.window_lipschitz(WindowKind::G, options.n_coarse)?;
    let k = evaluator.k_estimate(options.n_coarse)?;
    let head_constant = evaluator.head_constant()?;
    let delta = delta_bounds(alpha.alpha, k, options.epsilon, head_constant).ok();
    let asymptotics = evaluator.asymptotic_check()?;

    let bounded = alpha.verdict;
    let uniform_stability = match bounded {
        Verdict::Satisfied if k.is_finite() => Verdict::Satisfied,
        Verdict::Satisfied => Verdict::Inconclusive,
        other => other,
    };
    let asymptotic_stability = match bounded {
        Verdict::Satisfied if asymptotics.a_decaying && asymptotics.g_divergent => Verdict::Satisfied,
        Verdict::Satisfied => Verdict::Inconclusive,
        other => other,
    };
    if alpha.verdict == Verdict::Satisfied && alpha.tail_slope > 1e-9 {
        warnings.push(format!(
            "criterion still increasing at Tmax (slope {:.3e}); verdict relies on the tail projection {:.6}",
            alpha.tail_slope, alpha.projected
        ));
    }
    if !asymptotics.a_decaying {
        warnings.push(format!(
            "compact term does not decay: value {:.6} at Tmax with slope {:.3e}",
            asymptotics.a_tail, asymptotics.a_tail_slope
        ));
    }

    Ok(CriteriaReport {
        form: problem.form(),
        t0: problem.t0,
        horizon: evaluator.horizon(),
        tmax: options.tmax,
        n_coarse: options.n_coarse,
        certification: "grid-certified".into(),
        alpha,
        l1,
        l2,
        k,
        head_constant,
        delta,
        asymptotics,
        verdicts: Verdicts { bounded, uniform_stability, asymptotic_stability },
        warnings,
    })
}

impl CriteriaReport {
    /// Flat `key = value` lines, one quantity per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("form", self.form.to_string());
        put("certification", self.certification.clone());
        put("t0", fmt_num(self.t0));
        put("horizon", fmt_num(self.horizon));
        put("tmax", fmt_num(self.tmax));
        put("n_coarse", self.n_coarse.to_string());
        for t in &self.alpha.terms {
            put(&format!("term.{}.sup", t.id), fmt_num(t.sup));
            put(&format!("term.{}.argsup", t.id), fmt_num(t.argsup));
            put(&format!("term.{}.tail_slope", t.id), fmt_num(t.tail_slope));
            put(&format!("term.{}.projection", t.id), fmt_num(t.projection));
        }
        put("alpha.sup_of_sum", fmt_num(self.alpha.alpha));
        put("alpha.argsup", fmt_num(self.alpha.argsup));
        put("alpha.tail_slope", fmt_num(self.alpha.tail_slope));
        put("alpha.sum_of_sups", fmt_num(self.alpha.sum_of_sups));
        put("alpha.projected", fmt_num(self.alpha.projected));
        put("l1", fmt_num(self.l1.value));
        put("l2", fmt_num(self.l2.value));
        put("k", fmt_num(self.k));
        put("head_constant", fmt_num(self.head_constant));
        match &self.delta {
            Some(d) => {
                put("epsilon", fmt_num(d.epsilon));
                put("delta.existence", fmt_num(d.existence));
                put("delta.uniform", fmt_num(d.uniform));
            }
            None => {
                put("delta.existence", "none".into());
                put("delta.uniform", "none".into());
            }
        }
        put("asymptotic.a_tail", fmt_num(self.asymptotics.a_tail));
        put("asymptotic.a_tail_slope", fmt_num(self.asymptotics.a_tail_slope));
        put("asymptotic.a_decaying", self.asymptotics.a_decaying.to_string());
        put("asymptotic.g_end", fmt_num(self.asymptotics.g_end));
        put("asymptotic.g_divergent", self.asymptotics.g_divergent.to_string());
        put("verdict.bounded", self.verdicts.bounded.to_string());
        put("verdict.uniform_stability", self.verdicts.uniform_stability.to_string());
        put("verdict.asymptotic_stability", self.verdicts.asymptotic_stability.to_string());
        for (i, w) in self.warnings.iter().enumerate() {
            put(&format!("warning.{i}"), w.clone());
        }
        out
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x:.12e}")
}
