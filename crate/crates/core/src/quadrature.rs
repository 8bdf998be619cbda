//! Adaptive quadrature for cumulative exponents, exponentially damped
//! integrals, window integrals and supremum scans.
//!
//! Every integral is built from adaptive Simpson leaves. A converged leaf
//! stores its five samples; the Richardson-extrapolated leaf value is Boole's
//! rule, i.e. the exact integral of the quartic through those samples, so a
//! partial integral up to any point inside the leaf is read off the same
//! quartic without new integrand evaluations.
//!
//! Cumulative tables are split into checkpoint panels (unit spacing by
//! default) that are built on demand. Readers share the table; the first
//! query past the built range extends it under a write lock.

use std::sync::{Arc, OnceLock};

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEPTH: u32 = 40;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_SPACING: f64 = 1.0;
const MAX_PANELS: usize = 4_000_000;
const ABS_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("adaptive quadrature did not converge on [{a}, {b}] within depth {MAX_DEPTH}")]
    NonConvergence { a: f64, b: f64 },
    #[error("non-finite integrand sample at {at}")]
    NonFinite { at: f64 },
    #[error("integrand failed at {at}: {message}")]
    Integrand { at: f64, message: String },
    #[error("{t} lies below the start {lo} of the integration domain")]
    BelowDomain { t: f64, lo: f64 },
    #[error("{t} is beyond the supported table range")]
    TooFar { t: f64 },
}

impl QuadError {
    pub fn integrand(at: f64, err: impl std::fmt::Display) -> Self {
        QuadError::Integrand { at, message: err.to_string() }
    }
}

/// Shared scalar integrand.
pub type Integrand = Arc<dyn Fn(f64) -> Result<f64, QuadError> + Send + Sync>;

#[derive(Clone, Copy, Debug)]
struct Leaf {
    a: f64,
    h: f64,
    /// Integral from the panel start to `a`.
    before: f64,
    samples: [f64; 5],
}

impl Leaf {
    /// Integral of the quartic interpolant over `[a, a + θh]`.
    fn partial(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return 0.0;
        }
        if theta >= 1.0 {
            // Boole's rule
            let s = &self.samples;
            return self.h * (7.0 * (s[0] + s[4]) + 32.0 * (s[1] + s[3]) + 12.0 * s[2]) / 90.0;
        }
        // three-point Gauss-Legendre is exact for the quartic
        let r = 0.5 * 0.6f64.sqrt();
        let nodes = [theta * (0.5 - r), 0.5 * theta, theta * (0.5 + r)];
        let weights = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            acc += w * quartic(&self.samples, *x);
        }
        self.h * theta * acc
    }
}

/// Lagrange interpolant through samples at 0, 1/4, 1/2, 3/4, 1.
fn quartic(s: &[f64; 5], x: f64) -> f64 {
    const NODES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
    // prod_{k≠j} (x_j - x_k) for equispaced nodes with spacing 1/4
    const DENOM: [f64; 5] = [3.0 / 32.0, -3.0 / 128.0, 1.0 / 64.0, -3.0 / 128.0, 3.0 / 32.0];
    let mut acc = 0.0;
    for j in 0..5 {
        let mut num = 1.0;
        for (k, xk) in NODES.iter().enumerate() {
            if k != j {
                num *= x - xk;
            }
        }
        acc += s[j] * num / DENOM[j];
    }
    acc
}

fn sample<F>(f: &F, x: f64) -> Result<f64, QuadError>
where
    F: Fn(f64) -> Result<f64, QuadError> + ?Sized,
{
    let v = f(x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QuadError::NonFinite { at: x })
    }
}

/// Adaptive Simpson over `[a, b]` (`a < b`), emitting converged leaves in
/// order. The error allowance is `tol` per unit length.
fn adaptive_leaves<F>(f: &F, a: f64, b: f64, tol: f64, out: &mut Vec<Leaf>) -> Result<f64, QuadError>
where
    F: Fn(f64) -> Result<f64, QuadError> + ?Sized,
{
    let fa = sample(f, a)?;
    let fm = sample(f, 0.5 * (a + b))?;
    let fb = sample(f, b)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut total = 0.0;
    refine(f, a, b, [fa, fm, fb], whole, tol, 0, &mut total, out)?;
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn refine<F>(
    f: &F,
    a: f64,
    b: f64,
    [fa, fm, fb]: [f64; 3],
    whole: f64,
    tol: f64,
    depth: u32,
    total: &mut f64,
    out: &mut Vec<Leaf>,
) -> Result<(), QuadError>
where
    F: Fn(f64) -> Result<f64, QuadError> + ?Sized,
{
    let h = b - a;
    let m = 0.5 * (a + b);
    let flm = sample(f, a + 0.25 * h)?;
    let frm = sample(f, a + 0.75 * h)?;
    let left = h / 12.0 * (fa + 4.0 * flm + fm);
    let right = h / 12.0 * (fm + 4.0 * frm + fb);
    let refined = left + right;
    let err = refined - whole;
    // the absolute floor lets jump discontinuities terminate
    let allowed = (tol * h).max(1e-15 * refined.abs()).max(ABS_FLOOR);
    let unsplittable = h <= 8.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0);
    if err.abs() <= 15.0 * allowed || unsplittable {
        let value = refined + err / 15.0;
        out.push(Leaf { a, h, before: *total, samples: [fa, flm, fm, frm, fb] });
        *total += value;
        return Ok(());
    }
    if depth >= MAX_DEPTH {
        return Err(QuadError::NonConvergence { a, b });
    }
    refine(f, a, m, [fa, flm, fm], left, tol, depth + 1, total, out)?;
    refine(f, m, b, [fm, frm, fb], right, tol, depth + 1, total, out)
}

/// Signed adaptive Simpson integral of `f` over `[a, b]` with absolute
/// tolerance `tol` per unit length.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64, QuadError>
where
    F: Fn(f64) -> Result<f64, QuadError> + ?Sized,
{
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return Ok(-adaptive_simpson(f, b, a, tol)?);
    }
    let mut leaves = Vec::new();
    adaptive_leaves(f, a, b, tol, &mut leaves)
}

/// Signed `∫_{t1}^{t2} f` to absolute accuracy [`DEFAULT_TOL`].
/// Antisymmetric in its endpoints by construction.
pub fn window_integral<F>(f: &F, t1: f64, t2: f64) -> Result<f64, QuadError>
where
    F: Fn(f64) -> Result<f64, QuadError> + ?Sized,
{
    let width = (t2 - t1).abs();
    if width == 0.0 {
        return Ok(0.0);
    }
    adaptive_simpson(f, t1, t2, DEFAULT_TOL / width.max(1.0))
}

struct Panel {
    start: f64,
    /// Accumulated value at `start`.
    base: f64,
    /// Damping exponent at `start` (weighted tables only).
    exponent: f64,
    total: f64,
    leaves: Vec<Leaf>,
}

impl Panel {
    fn partial(&self, t: f64) -> f64 {
        let i = self.leaves.partition_point(|l| l.a <= t).saturating_sub(1);
        let leaf = &self.leaves[i];
        let theta = ((t - leaf.a) / leaf.h).clamp(0.0, 1.0);
        leaf.before + leaf.partial(theta)
    }
}

enum Damping {
    None,
    Exponent(Arc<CumulativeExponent>),
}

/// Checkpointed running integral from `lo`.
struct PanelTable {
    integrand: Integrand,
    damping: Damping,
    lo: f64,
    spacing: f64,
    tol: f64,
    panels: RwLock<Vec<Panel>>,
}

impl PanelTable {
    fn panel_index(&self, t: f64) -> Result<usize, QuadError> {
        if t.is_nan() || t < self.lo {
            return Err(QuadError::BelowDomain { t, lo: self.lo });
        }
        let k = ((t - self.lo) / self.spacing).floor();
        if !k.is_finite() || k >= MAX_PANELS as f64 {
            return Err(QuadError::TooFar { t });
        }
        Ok(k as usize)
    }

    fn ensure(&self, k: usize) -> Result<(), QuadError> {
        if self.panels.read().len() > k {
            return Ok(());
        }
        let mut panels = self.panels.write();
        while panels.len() <= k {
            let idx = panels.len();
            let (base, start) = match panels.last() {
                None => (0.0, self.lo),
                Some(prev) => {
                    let start = self.lo + self.spacing * idx as f64;
                    let carried = prev.base + prev.total;
                    let base = match &self.damping {
                        Damping::None => carried,
                        Damping::Exponent(g) => (prev.exponent - g.value(start)?).exp() * carried,
                    };
                    (base, start)
                }
            };
            let end = self.lo + self.spacing * (idx + 1) as f64;
            let mut leaves = Vec::new();
            let (total, exponent) = match &self.damping {
                Damping::None => (adaptive_leaves(&*self.integrand, start, end, self.tol, &mut leaves)?, 0.0),
                Damping::Exponent(g) => {
                    let g0 = g.value(start)?;
                    let f = &self.integrand;
                    let weighted = |s: f64| -> Result<f64, QuadError> {
                        let v = f(s)?;
                        if v == 0.0 {
                            return Ok(0.0);
                        }
                        Ok((g.value(s)? - g0).exp() * v)
                    };
                    (adaptive_leaves(&weighted, start, end, self.tol, &mut leaves)?, g0)
                }
            };
            panels.push(Panel { start, base, exponent, total, leaves });
        }
        Ok(())
    }

    /// Undamped: `∫_lo^t f`. Damped: `∫_lo^t e^{G(s)-G(t)} f(s) ds`.
    fn value(&self, t: f64) -> Result<f64, QuadError> {
        let k = self.panel_index(t)?;
        self.ensure(k)?;
        let (acc, exponent) = {
            let panels = self.panels.read();
            let panel = &panels[k];
            (panel.base + panel.partial(t), panel.exponent)
        };
        match &self.damping {
            Damping::None => Ok(acc),
            Damping::Exponent(_) if acc == 0.0 => Ok(0.0),
            Damping::Exponent(g) => Ok((exponent - g.value(t)?).exp() * acc),
        }
    }

    fn built_panels(&self) -> usize {
        self.panels.read().len()
    }

    fn checkpoints(&self) -> Vec<(f64, f64)> {
        self.panels.read().iter().map(|p| (p.start, p.base)).collect()
    }
}

/// Running integral `C(t) = ∫_origin^t f(u) du` for `t ≥ lo`, with
/// `lo ≤ origin` (values left of the origin are negative integrals).
pub struct CumulativeIntegral {
    table: PanelTable,
    origin: f64,
    origin_offset: OnceLock<f64>,
}

impl CumulativeIntegral {
    pub fn new(integrand: Integrand, lo: f64, origin: f64) -> Self {
        Self::with_options(integrand, lo, origin, DEFAULT_SPACING, DEFAULT_TOL)
    }

    pub fn with_options(integrand: Integrand, lo: f64, origin: f64, spacing: f64, tol: f64) -> Self {
        assert!(lo <= origin, "table start {lo} must not exceed origin {origin}");
        assert!(spacing > 0.0 && tol > 0.0);
        CumulativeIntegral {
            table: PanelTable {
                integrand,
                damping: Damping::None,
                lo,
                spacing,
                tol,
                panels: RwLock::new(Vec::new()),
            },
            origin,
            origin_offset: OnceLock::new(),
        }
    }

    pub fn lo(&self) -> f64 {
        self.table.lo
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    fn offset(&self) -> Result<f64, QuadError> {
        if self.origin == self.table.lo {
            return Ok(0.0);
        }
        if let Some(v) = self.origin_offset.get() {
            return Ok(*v);
        }
        let v = self.table.value(self.origin)?;
        Ok(*self.origin_offset.get_or_init(|| v))
    }

    pub fn value(&self, t: f64) -> Result<f64, QuadError> {
        if t == self.origin {
            return Ok(0.0);
        }
        Ok(self.table.value(t)? - self.offset()?)
    }

    /// `∫_{t1}^{t2} f` from the table.
    pub fn between(&self, t1: f64, t2: f64) -> Result<f64, QuadError> {
        if t1 == t2 {
            return Ok(0.0);
        }
        Ok(self.table.value(t2)? - self.table.value(t1)?)
    }

    /// Number of checkpoint panels built so far.
    pub fn built_panels(&self) -> usize {
        self.table.built_panels()
    }

    /// `(t_k, C(t_k))` for every built checkpoint, relative to `lo`.
    pub fn checkpoints(&self) -> Vec<(f64, f64)> {
        self.table.checkpoints()
    }
}

/// `G(t) = ∫_{t0}^t g(u) du`, the exponent of the damping weight.
pub struct CumulativeExponent {
    inner: CumulativeIntegral,
}

impl CumulativeExponent {
    pub fn new(g: Integrand, lo: f64, t0: f64) -> Self {
        CumulativeExponent { inner: CumulativeIntegral::new(g, lo, t0) }
    }

    pub fn with_options(g: Integrand, lo: f64, t0: f64, spacing: f64, tol: f64) -> Self {
        CumulativeExponent { inner: CumulativeIntegral::with_options(g, lo, t0, spacing, tol) }
    }

    pub fn t0(&self) -> f64 {
        self.inner.origin()
    }

    pub fn lo(&self) -> f64 {
        self.inner.lo()
    }

    /// `G(t)`.
    pub fn value(&self, t: f64) -> Result<f64, QuadError> {
        self.inner.value(t)
    }

    /// `e^{-∫_s^t g(u) du}`.
    pub fn damping_weight(&self, s: f64, t: f64) -> Result<f64, QuadError> {
        if s == t {
            return Ok(1.0);
        }
        Ok((self.value(s)? - self.value(t)?).exp())
    }

    pub fn checkpoints(&self) -> Vec<(f64, f64)> {
        self.inner.checkpoints()
    }
}

/// `I(t) = ∫_{t0}^t e^{-∫_s^t g} f(s) ds` for `t ≥ t0`.
///
/// Evaluated panel by panel through `I(t2) = e^{-(G(t2)-G(t1))} I(t1) + ∫_{t1}^{t2} e^{-(G(t2)-G(s))} f(s) ds`.
pub struct WeightedIntegral {
    table: PanelTable,
}

impl WeightedIntegral {
    pub fn new(f: Integrand, exponent: Arc<CumulativeExponent>) -> Self {
        Self::with_options(f, exponent, DEFAULT_SPACING, DEFAULT_TOL)
    }

    pub fn with_options(f: Integrand, exponent: Arc<CumulativeExponent>, spacing: f64, tol: f64) -> Self {
        let lo = exponent.t0();
        WeightedIntegral {
            table: PanelTable {
                integrand: f,
                damping: Damping::Exponent(exponent),
                lo,
                spacing,
                tol,
                panels: RwLock::new(Vec::new()),
            },
        }
    }

    pub fn value(&self, t: f64) -> Result<f64, QuadError> {
        if t == self.table.lo {
            return Ok(0.0);
        }
        self.table.value(t)
    }
}

/// Result of [`sup_scan`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupScan {
    pub sup: f64,
    pub argsup: f64,
    /// `(h(hi) - h(hi - 0.1 (hi - lo))) / (0.1 (hi - lo))`.
    pub tail_slope: f64,
}

/// Supremum of `h` over `[lo, hi]`: a uniform coarse scan of `n_coarse`
/// points followed by golden-section refinement around the three best cells.
/// The returned supremum is never below any observed sample.
pub fn sup_scan<F, E>(h: F, lo: f64, hi: f64, n_coarse: usize) -> Result<SupScan, E>
where
    F: Fn(f64) -> Result<f64, E> + Sync,
    E: From<QuadError> + Send,
{
    assert!(n_coarse >= 2 && hi > lo, "sup_scan needs n_coarse >= 2 and hi > lo");
    let checked = |t: f64| -> Result<f64, E> {
        let v = h(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(QuadError::NonFinite { at: t }.into())
        }
    };
    let step = (hi - lo) / (n_coarse - 1) as f64;
    let grid: Vec<f64> = (0..n_coarse)
        .map(|i| if i + 1 == n_coarse { hi } else { lo + step * i as f64 })
        .collect();
    let values: Vec<f64> = grid.par_iter().map(|&t| checked(t)).collect::<Result<_, E>>()?;

    let mut order: Vec<usize> = (0..n_coarse).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let mut sup = values[order[0]];
    let mut argsup = grid[order[0]];

    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for &i in order.iter().take(3) {
        let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(n_coarse - 1)]);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (checked(c)?, checked(d)?);
        for _ in 0..80 {
            for (t, v) in [(c, fc), (d, fd)] {
                if v > sup {
                    sup = v;
                    argsup = t;
                }
            }
            if b - a <= 1e-12 * (1.0 + a.abs()) {
                break;
            }
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = checked(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = checked(d)?;
            }
        }
    }

    let span = 0.1 * (hi - lo);
    let tail_slope = (values[n_coarse - 1] - checked(hi - span)?) / span;
    Ok(SupScan { sup, argsup, tail_slope })
}
