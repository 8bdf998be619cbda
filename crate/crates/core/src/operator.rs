//! Fixed-point form of the transformed equation and its Picard solver.
//!
//! With `x = p z` on `[t0, T]` the solution satisfies `z = A z + B z`, where
//! `A` carries the fractional-power term and `B` everything else (see
//! [`FixedPointOperator`]). Both maps are evaluated on a uniform mesh: panel
//! integrals use six-point Gauss-Legendre, delayed readings use the cubic
//! Hermite interpolant of the current iterate, and every factor that does
//! not depend on `z` is computed once when the operator is built.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{Coefficients, CriteriaError};
use crate::expr::{Env, EvalError};
use crate::model::{horizon, signed_power, AuxiliarySpec, HistoryFunction, NeutralPart, ProblemSpec};
use crate::quadrature::{CumulativeExponent, CumulativeIntegral, Integrand, QuadError};

pub const DEFAULT_MESH_STEP: f64 = 0.01;
pub const DEFAULT_PICARD_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Iterates larger than this are treated as divergence.
const BLOW_UP: f64 = 1e12;

/// Six-point Gauss-Legendre on [0, 1].
const GL_NODES: [f64; 6] = [
    0.033_765_242_898_423_98,
    0.169_395_306_766_867_74,
    0.380_690_406_958_401_55,
    0.619_309_593_041_598_5,
    0.830_604_693_233_132_3,
    0.966_234_757_101_576,
];
const GL_WEIGHTS: [f64; 6] = [
    0.085_662_246_189_585_17,
    0.180_380_786_524_069_3,
    0.233_956_967_286_345_53,
    0.233_956_967_286_345_53,
    0.180_380_786_524_069_3,
    0.085_662_246_189_585_17,
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("{what}: {source} (at t = {t})")]
    Eval {
        what: &'static str,
        t: f64,
        #[source]
        source: EvalError,
    },
    #[error("delayed argument {t} lies outside the mesh [{lo}, {hi}]")]
    OutsideMesh { t: f64, lo: f64, hi: f64 },
    #[error("grid function does not live on the operator mesh")]
    MeshMismatch,
    #[error("{0}")]
    Invalid(String),
}

impl From<crate::model::ModelError> for OperatorError {
    fn from(e: crate::model::ModelError) -> Self {
        OperatorError::Criteria(e.into())
    }
}

/// Piecewise cubic Hermite function on a mesh over `[m(t0), T]`.
///
/// The node at index `junction` is `t0`. Slopes are five-point finite
/// differences computed separately on each side of the junction.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    nodes: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    junction: usize,
}

impl GridFunction {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>, junction: usize) -> Result<Self, OperatorError> {
        if nodes.len() != values.len() || nodes.is_empty() || junction >= nodes.len() {
            return Err(OperatorError::Invalid("nodes and values must match and contain the junction".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(OperatorError::Invalid("mesh nodes must be strictly increasing".into()));
        }
        let mut slopes = vec![0.0; nodes.len()];
        fd_slopes(&nodes[..=junction], &values[..=junction], &mut slopes[..=junction]);
        fd_slopes(&nodes[junction..], &values[junction..], &mut slopes[junction..]);
        Ok(GridFunction { nodes, values, slopes, junction })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn junction(&self) -> usize {
        self.junction
    }

    pub fn t0(&self) -> f64 {
        self.nodes[self.junction]
    }

    pub fn end(&self) -> f64 {
        *self.nodes.last().expect("non-empty mesh")
    }

    /// Hermite interpolant; history intervals are used for `t < t0`.
    pub fn eval(&self, t: f64) -> Result<f64, OperatorError> {
        let (lo, hi) = (self.nodes[0], self.end());
        if !(t >= lo && t <= hi) {
            return Err(OperatorError::OutsideMesh { t, lo, hi });
        }
        if self.nodes.len() == 1 {
            return Ok(self.values[0]);
        }
        let i = self.nodes.partition_point(|&x| x <= t).saturating_sub(1).min(self.nodes.len() - 2);
        let h = self.nodes[i + 1] - self.nodes[i];
        Ok(self.hermite(i, (t - self.nodes[i]) / h))
    }

    fn hermite(&self, i: usize, theta: f64) -> f64 {
        let h = self.nodes[i + 1] - self.nodes[i];
        hermite(self.values[i], self.values[i + 1], h * self.slopes[i], h * self.slopes[i + 1], theta)
    }

    /// `max |value|` over all nodes.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |value|` over nodes `t ≥ t0`.
    pub fn sup_norm_future(&self) -> f64 {
        self.values[self.junction..].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self - other|` over nodes `t ≥ t0`.
    pub fn distance(&self, other: &GridFunction) -> Result<f64, OperatorError> {
        if self.nodes != other.nodes || self.junction != other.junction {
            return Err(OperatorError::MeshMismatch);
        }
        Ok(self.values[self.junction..]
            .iter()
            .zip(&other.values[self.junction..])
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Two-column CSV with `#` metadata lines.
    pub fn to_csv(&self, name: &str, metadata: &[(&str, String)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {name}");
        let _ = writeln!(out, "# nodes = {}", self.nodes.len());
        let _ = writeln!(out, "# t0 = {}", self.t0());
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "t,value");
        for (t, v) in self.nodes.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

fn hermite(y0: f64, y1: f64, d0: f64, d1: f64, theta: f64) -> f64 {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + theta) * d0 + (3.0 * t2 - 2.0 * t3) * y1 + (t3 - t2) * d1
}

/// Fourth-order finite-difference slopes; assumes a (nearly) uniform mesh
/// and falls back to lower order on short segments.
#[allow(clippy::needless_range_loop)]
fn fd_slopes(t: &[f64], y: &[f64], out: &mut [f64]) {
    let n = t.len();
    match n {
        0 => {}
        1 => out[0] = 0.0,
        2..=4 => {
            for i in 0..n {
                let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
                out[i] = (y[b] - y[a]) / (t[b] - t[a]);
            }
        }
        _ => {
            let h = (t[n - 1] - t[0]) / (n - 1) as f64;
            for i in 0..n {
                out[i] = if i >= 2 && i + 2 < n {
                    (y[i - 2] - 8.0 * y[i - 1] + 8.0 * y[i + 1] - y[i + 2]) / (12.0 * h)
                } else if i == 0 {
                    (-25.0 * y[0] + 48.0 * y[1] - 36.0 * y[2] + 16.0 * y[3] - 3.0 * y[4]) / (12.0 * h)
                } else if i == 1 {
                    (-3.0 * y[0] - 10.0 * y[1] + 18.0 * y[2] - 6.0 * y[3] + y[4]) / (12.0 * h)
                } else if i == n - 2 {
                    (3.0 * y[n - 1] + 10.0 * y[n - 2] - 18.0 * y[n - 3] + 6.0 * y[n - 4] - y[n - 5]) / (12.0 * h)
                } else {
                    (25.0 * y[n - 1] - 48.0 * y[n - 2] + 36.0 * y[n - 3] - 16.0 * y[n - 4] + 3.0 * y[n - 5])
                        / (12.0 * h)
                };
            }
        }
    }
}

/// Reading of `z` at a fixed delayed argument.
#[derive(Clone, Copy, Debug)]
enum Reading {
    /// `τ < t0`: the history value.
    History(f64),
    /// Future interval `idx` (absolute node index) at local coordinate `theta`.
    Mesh { idx: usize, theta: f64 },
}

/// `C(u) = ∫_{t0}^u k Z` at a fixed `u`.
#[derive(Clone, Debug)]
enum CQuery {
    History(f64),
    Mesh { idx: usize, terms: Vec<(f64, f64)> },
}

#[derive(Clone, Debug)]
struct PanelPoint {
    /// Quadrature weight times `w(s, t_{i+1})`.
    weight: f64,
    s: f64,
    g: f64,
    /// `k(τ1)(1 - r1')`.
    k1d: f64,
    /// `a`, or `a + β'` in the linear-neutral form.
    a_eff: f64,
    p: f64,
    /// `(g p - p')/p²`.
    lead: f64,
    d_over_p: f64,
    c_over_p: f64,
    /// `β(s)` for the linear-neutral form.
    beta: f64,
    z1: Reading,
    px1: f64,
    z2: Reading,
    px2: f64,
    c_s: CQuery,
    c_tau: CQuery,
}

#[derive(Clone, Debug)]
struct Panel {
    decay: f64,
    points: Vec<PanelPoint>,
    /// `(theta, k(v) · weight · h)` for `∫_{t_i}^{t_{i+1}} k Z`.
    k_terms: [(f64, f64); 6],
}

#[derive(Clone, Debug)]
struct NodeData {
    t: f64,
    p: f64,
    beta: f64,
    head_weight: f64,
    z1: Reading,
    px1: f64,
    c_tau: CQuery,
}

/// The pair `(A, B)` on a fixed mesh for one problem, auxiliary pair and
/// history:
///
/// `(A z)(t) = ∫_{t0}^t w(s,t) (c/p) G(X(τ2)^γ) ds`
///
/// `(B z)(t) = head·w(t0,t) + H(t) - ∫ w g H + ∫ w [k(τ1)(1-r1') Z(τ1) - a X(τ1)/p]
///            + Q(t, X(τ1(t)))/p(t) - ∫ w Q(s, X(τ1)) (g p - p')/p² + ∫ w (d/p) F(X(τ1), X(τ2))`
///
/// with `H(s) = ∫_{τ1(s)}^s k Z`, `X(τ) = ψ(τ)` for `τ ≤ t0` and `p(τ) z(τ)`
/// after, and `head = z(t0) - H(t0) - Q(t0, X(τ1(t0)))/p(t0)`. The
/// linear-neutral form uses `Q = β x` and `a + β'` in place of `a`.
pub struct FixedPointOperator {
    coeffs: Arc<Coefficients>,
    psi: HistoryFunction,
    nodes: Vec<f64>,
    junction: usize,
    z0: f64,
    head: f64,
    panels: Vec<Panel>,
    node_data: Vec<NodeData>,
}

impl FixedPointOperator {
    pub fn new(
        problem: &ProblemSpec,
        aux: &AuxiliarySpec,
        psi: &HistoryFunction,
        t_end: f64,
        step: f64,
    ) -> Result<Self, OperatorError> {
        if !(step > 0.0) || !(t_end > problem.t0) {
            return Err(OperatorError::Invalid(format!("need step > 0 and T > t0 (step = {step}, T = {t_end})")));
        }
        let t0 = problem.t0;
        let (m, _) = horizon(problem, t_end)?;
        let coeffs = Arc::new(Coefficients::new(problem.clone(), aux.clone())?);

        let mut nodes = Vec::new();
        if m < t0 {
            let nh = ((t0 - m) / step - 1e-9).ceil().max(1.0) as usize;
            for i in 0..nh {
                nodes.push(m + (t0 - m) * i as f64 / nh as f64);
            }
        }
        let junction = nodes.len();
        let nf = ((t_end - t0) / step - 1e-9).ceil().max(1.0) as usize;
        for i in 0..=nf {
            nodes.push(if i == nf { t_end } else { t0 + (t_end - t0) * i as f64 / nf as f64 });
        }

        let c = coeffs.clone();
        let g: Integrand = Arc::new(move |s| c.g(s).map_err(|e| QuadError::integrand(s, e)));
        let exponent = CumulativeExponent::new(g, m, t0);
        exponent.value(t_end)?;

        let c = coeffs.clone();
        let psi_c = psi.clone();
        let k_psi: Integrand = Arc::new(move |u| {
            let k = c.k(u).map_err(|e| QuadError::integrand(u, e))?;
            let v = psi_c.value(u).map_err(|e| QuadError::integrand(u, e))?;
            Ok(k * v)
        });
        let history_c = CumulativeIntegral::new(k_psi, m, t0);

        let p_t0 = coeffs.p(t0)?;
        let psi_t0 = psi.value(t0).map_err(|source| OperatorError::Eval { what: "ψ", t: t0, source })?;
        let z0 = psi_t0 / p_t0;

        let layout = Layout { nodes: &nodes, junction, t0, m, t_end };
        let linear = matches!(problem.neutral, NeutralPart::Linear { .. });

        let reading = |tau: f64| -> Result<(Reading, f64), OperatorError> {
            if tau < t0 {
                if tau < m - 1e-12 {
                    return Err(OperatorError::OutsideMesh { t: tau, lo: m, hi: t_end });
                }
                let v = psi.value(tau).map_err(|source| OperatorError::Eval { what: "ψ", t: tau, source })?;
                Ok((Reading::History(v), 1.0))
            } else {
                let (idx, theta) = layout.locate(tau)?;
                Ok((Reading::Mesh { idx, theta }, coeffs.p(tau)?))
            }
        };
        let c_query = |u: f64| -> Result<CQuery, OperatorError> {
            if u < t0 {
                return Ok(CQuery::History(history_c.value(u)?));
            }
            let (idx, _) = layout.locate(u)?;
            let a = nodes[idx];
            let len = u - a;
            let mut terms = Vec::new();
            if len > 0.0 {
                let h = nodes[idx + 1] - a;
                for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    let v = a + len * x;
                    terms.push(((v - a) / h, coeffs.k(v)? * w * len));
                }
            }
            Ok(CQuery::Mesh { idx, terms })
        };

        let mut node_data = Vec::with_capacity(nodes.len() - junction);
        for &t in &nodes[junction..] {
            let tau = coeffs.tau1(t)?;
            let (z1, px1) = reading(tau)?;
            node_data.push(NodeData {
                t,
                p: coeffs.p(t)?,
                beta: if linear { coeffs.beta(t)? } else { 0.0 },
                head_weight: (-exponent.value(t)?).exp(),
                z1,
                px1,
                c_tau: c_query(tau)?,
            });
        }

        let panel_range: Vec<usize> = (junction..nodes.len() - 1).collect();
        let panels: Vec<Panel> = panel_range
            .par_iter()
            .map(|&i| -> Result<Panel, OperatorError> {
                let (a, b) = (nodes[i], nodes[i + 1]);
                let h = b - a;
                let g_b = exponent.value(b)?;
                let decay = (exponent.value(a)? - g_b).exp();
                let mut points = Vec::with_capacity(6);
                let mut k_terms = [(0.0, 0.0); 6];
                for (j, (x, w)) in GL_NODES.iter().zip(GL_WEIGHTS).enumerate() {
                    let s = a + h * x;
                    k_terms[j] = (*x, coeffs.k(s)? * w * h);
                    let tau1 = coeffs.tau1(s)?;
                    let tau2 = coeffs.tau2(s)?;
                    let p = coeffs.p(s)?;
                    let g = coeffs.g(s)?;
                    let (a_eff, beta) = if linear {
                        (coeffs.a(s)? + coeffs.dbeta(s)?, coeffs.beta(s)?)
                    } else {
                        (coeffs.a(s)?, 0.0)
                    };
                    let d_over_p = match &problem.neutral {
                        NeutralPart::General { d, .. } => {
                            d.at(s).map_err(|source| OperatorError::Eval { what: "d", t: s, source })? / p
                        }
                        NeutralPart::Linear { .. } => 0.0,
                    };
                    let (z1, px1) = reading(tau1)?;
                    let (z2, px2) = reading(tau2)?;
                    points.push(PanelPoint {
                        weight: w * h * (exponent.value(s)? - g_b).exp(),
                        s,
                        g,
                        k1d: coeffs.k(tau1)? * coeffs.dtau1(s)?,
                        a_eff,
                        p,
                        lead: (g * p - coeffs.dp(s)?) / (p * p),
                        d_over_p,
                        c_over_p: coeffs.c(s)? / p,
                        beta,
                        z1,
                        px1,
                        z2,
                        px2,
                        c_s: c_query(s)?,
                        c_tau: c_query(tau1)?,
                    });
                }
                Ok(Panel { decay, points, k_terms })
            })
            .collect::<Result<_, _>>()?;

        let mut op = FixedPointOperator {
            coeffs,
            psi: psi.clone(),
            nodes,
            junction,
            z0,
            head: 0.0,
            panels,
            node_data,
        };
        // head = z(t0) - H(t0) - Q(t0, X(τ1(t0)))/p(t0); only history enters
        let start = op.initial_guess()?;
        let prefix = op.prefix(&start);
        let nd = &op.node_data[0];
        let h_t0 = -op.c_value(&nd.c_tau, &start, &prefix);
        let x1 = nd.px1 * op.read(&nd.z1, &start);
        op.head = z0 - h_t0 - op.q(nd.t, x1, nd.beta)? / nd.p;
        Ok(op)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn junction(&self) -> usize {
        self.junction
    }

    /// `z(t0) = ψ(t0)/p(t0)`.
    pub fn z_at_t0(&self) -> f64 {
        self.z0
    }

    pub fn history(&self) -> &HistoryFunction {
        &self.psi
    }

    /// Builds a grid function on this mesh: ψ on history nodes, `z(t0)` at
    /// the junction and `f` after it.
    pub fn grid_from<F>(&self, f: F) -> Result<GridFunction, OperatorError>
    where
        F: Fn(f64) -> f64,
    {
        let mut values = Vec::with_capacity(self.nodes.len());
        for &t in &self.nodes[..self.junction] {
            values.push(self.psi.value(t).map_err(|source| OperatorError::Eval { what: "ψ", t, source })?);
        }
        values.push(self.z0);
        for &t in &self.nodes[self.junction + 1..] {
            values.push(f(t));
        }
        GridFunction::new(self.nodes.clone(), values, self.junction)
    }

    /// The constant extension of `z(t0)`, Picard's starting point.
    pub fn initial_guess(&self) -> Result<GridFunction, OperatorError> {
        let z0 = self.z0;
        self.grid_from(|_| z0)
    }

    fn check(&self, z: &GridFunction) -> Result<(), OperatorError> {
        if z.nodes != self.nodes || z.junction != self.junction {
            return Err(OperatorError::MeshMismatch);
        }
        Ok(())
    }

    fn read(&self, r: &Reading, z: &GridFunction) -> f64 {
        match *r {
            Reading::History(v) => v,
            Reading::Mesh { idx, theta } => {
                if theta == 0.0 || idx + 1 == z.nodes.len() {
                    z.values[idx]
                } else {
                    z.hermite(idx, theta)
                }
            }
        }
    }

    /// `C(t_i)` at every future node.
    fn prefix(&self, z: &GridFunction) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.node_data.len());
        let mut acc = 0.0;
        out.push(0.0);
        for (offset, panel) in self.panels.iter().enumerate() {
            let idx = self.junction + offset;
            for (theta, f) in panel.k_terms {
                acc += f * z.hermite(idx, theta);
            }
            out.push(acc);
        }
        out
    }

    fn c_value(&self, q: &CQuery, z: &GridFunction, prefix: &[f64]) -> f64 {
        match q {
            CQuery::History(v) => *v,
            CQuery::Mesh { idx, terms } => {
                let mut v = prefix[idx - self.junction];
                for &(theta, f) in terms {
                    v += f * z.hermite(*idx, theta);
                }
                v
            }
        }
    }

    fn q(&self, t: f64, x: f64, beta: f64) -> Result<f64, OperatorError> {
        match &self.coeffs.problem.neutral {
            NeutralPart::General { q, .. } => {
                q.eval(&Env::tx(t, x)).map_err(|source| OperatorError::Eval { what: "Q", t, source })
            }
            NeutralPart::Linear { .. } => Ok(beta * x),
        }
    }

    fn f_term(&self, s: f64, x1: f64, x2: f64) -> Result<f64, OperatorError> {
        match &self.coeffs.problem.neutral {
            NeutralPart::General { f, .. } => {
                f.eval(&Env::xy(x1, x2)).map_err(|source| OperatorError::Eval { what: "F", t: s, source })
            }
            NeutralPart::Linear { .. } => Ok(0.0),
        }
    }

    fn g_term(&self, s: f64, x2: f64) -> Result<f64, OperatorError> {
        let problem = &self.coeffs.problem;
        problem
            .nonlinearity
            .eval(&Env::tx(s, signed_power(x2, problem.gamma)))
            .map_err(|source| OperatorError::Eval { what: "G", t: s, source })
    }

    /// Node values of `A z` and `B z` on `[t0, T]`.
    fn apply_parts(&self, z: &GridFunction) -> Result<(Vec<f64>, Vec<f64>), OperatorError> {
        self.check(z)?;
        let prefix = self.prefix(z);
        let sums: Vec<(f64, f64)> = self
            .panels
            .par_iter()
            .map(|panel| -> Result<(f64, f64), OperatorError> {
                let (mut sa, mut sb) = (0.0, 0.0);
                for pt in &panel.points {
                    let z1 = self.read(&pt.z1, z);
                    let x1 = pt.px1 * z1;
                    let x2 = pt.px2 * self.read(&pt.z2, z);
                    if pt.c_over_p != 0.0 {
                        sa += pt.weight * pt.c_over_p * self.g_term(pt.s, x2)?;
                    }
                    let h = self.c_value(&pt.c_s, z, &prefix) - self.c_value(&pt.c_tau, z, &prefix);
                    let mut fb = -pt.g * h + pt.k1d * z1 - pt.a_eff * x1 / pt.p;
                    if pt.lead != 0.0 {
                        fb -= self.q(pt.s, x1, pt.beta)? * pt.lead;
                    }
                    if pt.d_over_p != 0.0 {
                        fb += pt.d_over_p * self.f_term(pt.s, x1, x2)?;
                    }
                    sb += pt.weight * fb;
                }
                Ok((sa, sb))
            })
            .collect::<Result<_, _>>()?;

        let n = self.node_data.len();
        let mut a_vals = Vec::with_capacity(n);
        let mut b_vals = Vec::with_capacity(n);
        let (mut ia, mut ib) = (0.0, 0.0);
        for (i, nd) in self.node_data.iter().enumerate() {
            if i > 0 {
                let panel = &self.panels[i - 1];
                ia = panel.decay * ia + sums[i - 1].0;
                ib = panel.decay * ib + sums[i - 1].1;
            }
            let h = prefix[i] - self.c_value(&nd.c_tau, z, &prefix);
            let x1 = nd.px1 * self.read(&nd.z1, z);
            let b = if i == 0 {
                self.z0
            } else {
                self.head * nd.head_weight + h + ib + self.q(nd.t, x1, nd.beta)? / nd.p
            };
            a_vals.push(ia);
            b_vals.push(b);
        }
        Ok((a_vals, b_vals))
    }

    fn assemble(&self, history: &[f64], future: Vec<f64>) -> Result<GridFunction, OperatorError> {
        let mut values = history.to_vec();
        values.extend(future);
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(OperatorError::Invalid(format!("non-finite operator value {v}")));
        }
        GridFunction::new(self.nodes.clone(), values, self.junction)
    }

    /// `A z`: zero on the history part.
    pub fn apply_a(&self, z: &GridFunction) -> Result<GridFunction, OperatorError> {
        let (a, _) = self.apply_parts(z)?;
        self.assemble(&vec![0.0; self.junction], a)
    }

    /// `B z`: ψ on the history part.
    pub fn apply_b(&self, z: &GridFunction) -> Result<GridFunction, OperatorError> {
        let (_, b) = self.apply_parts(z)?;
        self.assemble(&z.values[..self.junction], b)
    }

    /// `A z1 + B z2`.
    pub fn apply_mixed(&self, z1: &GridFunction, z2: &GridFunction) -> Result<GridFunction, OperatorError> {
        let (a, _) = self.apply_parts(z1)?;
        let (_, b) = self.apply_parts(z2)?;
        let sum = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.assemble(&z2.values[..self.junction], sum)
    }

    /// `A z + B z`.
    pub fn apply(&self, z: &GridFunction) -> Result<GridFunction, OperatorError> {
        let (a, b) = self.apply_parts(z)?;
        let sum = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.assemble(&z.values[..self.junction], sum)
    }

    /// `max_{t ≥ t0} |z - (A z + B z)|` over the mesh.
    pub fn residual(&self, z: &GridFunction) -> Result<f64, OperatorError> {
        self.apply(z)?.distance(z)
    }

    /// `sup|B z1 - B z2| / sup|z1 - z2|` on `[t0, T]`.
    pub fn contraction_ratio(&self, z1: &GridFunction, z2: &GridFunction) -> Result<f64, OperatorError> {
        let d = z1.distance(z2)?;
        if d == 0.0 {
            return Ok(0.0);
        }
        Ok(self.apply_b(z1)?.distance(&self.apply_b(z2)?)? / d)
    }

    /// Picard iteration `z_{n+1} = A z_n + B z_n` from the constant
    /// extension of `z(t0)`.
    pub fn picard(&self, tol: f64, max_iter: usize) -> Result<PicardResult, OperatorError> {
        let mut z = self.initial_guess()?;
        let mut steps: Vec<f64> = Vec::new();
        let mut ratios = Vec::new();
        let mut cap_exceeded = z.sup_norm_future() > 1.0;
        let mut status = PicardStatus::MaxIterations;
        let mut iterations = 0;
        while iterations < max_iter {
            iterations += 1;
            let next = match self.apply(&z) {
                Ok(n) => n,
                Err(OperatorError::Invalid(_)) => {
                    status = PicardStatus::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            };
            let step = next.distance(&z)?;
            if let Some(&prev) = steps.last() {
                if prev > 0.0 {
                    ratios.push(step / prev);
                }
            }
            steps.push(step);
            cap_exceeded |= next.sup_norm_future() > 1.0;
            z = next;
            if !step.is_finite() || z.sup_norm_future() > BLOW_UP {
                status = PicardStatus::Diverged;
                break;
            }
            if step < tol {
                status = PicardStatus::Converged;
                break;
            }
        }
        let residual = if status == PicardStatus::Diverged { f64::NAN } else { self.residual(&z)? };
        Ok(PicardResult { z, iterations, steps, ratios, status, cap_exceeded, residual })
    }
}

struct Layout<'a> {
    nodes: &'a [f64],
    junction: usize,
    t0: f64,
    m: f64,
    t_end: f64,
}

impl Layout<'_> {
    /// Future interval containing `u ∈ [t0, T]`: `(idx, theta)` with
    /// `idx + 1` valid whenever `theta > 0`.
    fn locate(&self, u: f64) -> Result<(usize, f64), OperatorError> {
        if !(u >= self.t0 && u <= self.t_end) {
            return Err(OperatorError::OutsideMesh { t: u, lo: self.m, hi: self.t_end });
        }
        let future = &self.nodes[self.junction..];
        let k = future.partition_point(|&x| x <= u).saturating_sub(1);
        let idx = self.junction + k;
        if idx + 1 == self.nodes.len() {
            return Ok((idx, 0.0));
        }
        let h = self.nodes[idx + 1] - self.nodes[idx];
        Ok((idx, (u - self.nodes[idx]) / h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PicardStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct PicardResult {
    pub z: GridFunction,
    pub iterations: usize,
    /// `sup|z_{n+1} - z_n|` per iteration.
    pub steps: Vec<f64>,
    /// Successive step ratios.
    pub ratios: Vec<f64>,
    pub status: PicardStatus,
    /// Some iterate left the unit ball (monitored, not projected).
    pub cap_exceeded: bool,
    pub residual: f64,
}

/// `x = p z`, with `p ≡ 1` on the history part.
pub fn reconstruct_x(z: &GridFunction, aux: &AuxiliarySpec) -> Result<GridFunction, OperatorError> {
    let mut values = Vec::with_capacity(z.nodes.len());
    for (i, (&t, &v)) in z.nodes.iter().zip(&z.values).enumerate() {
        let p = if i < z.junction {
            1.0
        } else {
            aux.p(t).map_err(|source| OperatorError::Eval { what: "p", t, source })?
        };
        values.push(p * v);
    }
    GridFunction::new(z.nodes.clone(), values, z.junction)
}
