//! The subcommands, as functions from a validated config to printed text
//! and an exit code.
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndde::criteria::{bracket_matched_a, evaluate, CriteriaReport, ReportOptions, TermKind, Verdict};
use ndde::integrator::{integrate, IntegratorOptions, Trajectory};
use ndde::model::Form as ModelForm;
use ndde::operator::{reconstruct_x, FixedPointOperator, PicardResult, PicardStatus};

use crate::config::{DriftSource, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATED: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

#[derive(Debug)]
pub struct Outcome {
    pub text: String,
    pub code: i32,
}

pub fn verdict_code(v: Verdict) -> i32 {
    match v {
        Verdict::Satisfied => EXIT_OK,
        Verdict::Violated => EXIT_VIOLATED,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    pub tmax: Option<f64>,
    pub json: Option<PathBuf>,
    pub key_values: bool,
}

pub fn check_report(cfg: &RunConfig, tmax: Option<f64>) -> Result<CriteriaReport> {
    let tmax = tmax.unwrap_or(cfg.run.tmax);
    let mut problem = cfg.problem.clone();
    if let DriftSource::Bracket(target) = &cfg.drift {
        problem.a = bracket_matched_a(&problem, &cfg.aux, target, tmax)?;
    }
    let opts = ReportOptions { tmax, n_coarse: cfg.run.n_coarse, epsilon: cfg.run.epsilon };
    Ok(evaluate(&problem, &cfg.aux, &opts)?)
}

pub fn run_check(cfg: &RunConfig, opts: &CheckOptions) -> Result<(CriteriaReport, Outcome)> {
    let report = check_report(cfg, opts.tmax)?;
    if let Some(path) = &opts.json {
        write_file(path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    let mut text = if opts.key_values { report.to_key_values() } else { check_table(cfg, &report) };
    if let Some(path) = &opts.json {
        if !opts.key_values {
            let _ = writeln!(text, "report      {}", path.display());
        }
    }
    let code = verdict_code(report.verdicts.bounded);
    Ok((report, Outcome { text, code }))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn check_table(cfg: &RunConfig, r: &CriteriaReport) -> String {
    let mut out = String::new();
    let form = match r.form {
        ModelForm::General => "general",
        ModelForm::LinearNeutral => "linear-neutral",
    };
    let _ = writeln!(out, "config      {}", cfg.origin);
    let _ = writeln!(out, "form        {form}, gamma = {}", cfg.problem.gamma);
    match &cfg.drift {
        DriftSource::Given => {
            let _ = writeln!(out, "a(t)        {}", cfg.problem.a);
        }
        DriftSource::Bracket(target) => {
            let _ = writeln!(out, "a(t)        matched so the combined bracket is {target}");
        }
    }
    let _ = writeln!(
        out,
        "grid        [{}, {}], horizon {}, {} coarse points, {}",
        r.t0, r.tmax, r.horizon, r.n_coarse, r.certification
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "term  kind       {:>13}  {:>13}  {:>13}  label", "sup", "argsup", "projection");
    for t in &r.alpha.terms {
        let kind = match t.kind {
            TermKind::Pointwise => "pointwise",
            TermKind::Weighted => "weighted",
        };
        let _ = writeln!(
            out,
            "{:<5} {:<9}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {}",
            t.id, kind, t.sup, t.argsup, t.projection, t.label
        );
    }
    let _ = writeln!(out);
    let a = &r.alpha;
    let _ = writeln!(out, "alpha       {:.6} (sup of sum, at t = {:.4e})", a.alpha, a.argsup);
    let _ = writeln!(out, "            {:.6} (sum of sups), {:.6} projected", a.sum_of_sups, a.projected);
    let _ = writeln!(out, "windows     L1 = {:.6e}, L2 = {:.6e}", r.l1.value, r.l2.value);
    let _ = writeln!(out, "K           {:.6e}", r.k);
    let _ = writeln!(out, "C           {:.6e}", r.head_constant);
    match &r.delta {
        Some(d) => {
            let _ = writeln!(
                out,
                "delta       {:.6e} (existence), {:.6e} (uniform, eps = {})",
                d.existence, d.uniform, d.epsilon
            );
        }
        None => {
            let _ = writeln!(out, "delta       none (alpha is not below 1)");
        }
    }
    let s = &r.asymptotics;
    let _ = writeln!(out, "A-term      {:.6e} at Tmax, decaying: {}", s.a_tail, yes_no(s.a_decaying));
    let _ = writeln!(out, "G(Tmax)     {:.6e}, divergent: {}", s.g_end, yes_no(s.g_divergent));
    let _ = writeln!(out);
    let v = &r.verdicts;
    let _ = writeln!(out, "bounded               {}", v.bounded);
    let _ = writeln!(out, "uniformly stable      {}", v.uniform_stability);
    let _ = writeln!(out, "asymptotically stable {}", v.asymptotic_stability);
    let mut seen = std::collections::BTreeSet::new();
    for w in cfg.warnings.iter().chain(&r.warnings).filter(|w| seen.insert(w.as_str())) {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct SimulateOptions {
    pub t_end: Option<f64>,
    pub step: Option<f64>,
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SimulateSummary {
    pub t_end: f64,
    pub step: f64,
    pub nodes: usize,
    pub max_abs: f64,
    pub final_abs: f64,
    pub history_norm: f64,
    /// `max |x_direct - p z|` at the nodes, `z` integrated separately.
    pub route_gap: f64,
}

fn trajectory_csv(cfg: &RunConfig, traj: &Trajectory, t_end: f64, step: f64) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# ndde simulate");
    let _ = writeln!(out, "# config = {}", cfg.origin);
    let _ = writeln!(out, "# T = {t_end}");
    let _ = writeln!(out, "# step = {step}");
    let _ = writeln!(out, "# psi = {}", cfg.psi);
    out.push_str(&traj.to_csv(1)?);
    Ok(out)
}

pub fn run_simulate(cfg: &RunConfig, opts: &SimulateOptions) -> Result<(SimulateSummary, Outcome)> {
    let t_end = opts.t_end.unwrap_or(cfg.run.t_end);
    let step = opts.step.unwrap_or(cfg.run.step);
    let psi = cfg.history(t_end)?;
    let iopts = IntegratorOptions::new(t_end, step);
    let (direct, via_z) = rayon::join(
        || integrate(&cfg.problem, &psi, &iopts),
        || integrate(&cfg.problem, &psi, &iopts.clone().transformed(cfg.aux.clone())),
    );
    let (direct, via_z) = (direct?, via_z?);
    let xs = direct.x_values()?;
    let route_gap = xs.iter().zip(via_z.x_values()?).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let summary = SimulateSummary {
        t_end,
        step,
        nodes: xs.len(),
        max_abs: direct.sup_abs(cfg.problem.t0, t_end)?,
        final_abs: direct.value(t_end)?.abs(),
        history_norm: psi.norm(),
        route_gap,
    };
    if let Some(path) = &opts.csv {
        write_file(path, &trajectory_csv(cfg, &direct, t_end, step)?)?;
    }
    let mut text = String::new();
    let _ = writeln!(text, "config      {}", cfg.origin);
    let _ = writeln!(text, "run         RK4, h = {step}, T = {t_end}, {} nodes", summary.nodes);
    let _ = writeln!(text, "|psi|       {:.6e}", summary.history_norm);
    let _ = writeln!(text, "max |x|     {:.6e}", summary.max_abs);
    let _ = writeln!(text, "|x(T)|      {:.6e}", summary.final_abs);
    let _ = writeln!(text, "x vs p*z    {:.3e} (sup over nodes, z integrated separately)", summary.route_gap);
    if let Some(path) = &opts.csv {
        let _ = writeln!(text, "csv         {}", path.display());
    }
    Ok((summary, Outcome { text, code: EXIT_OK }))
}

#[derive(Clone, Debug, Default)]
pub struct PicardOptions {
    pub t_end: Option<f64>,
    pub tol: Option<f64>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug)]
pub struct PicardSummary {
    pub t_end: f64,
    pub mesh: f64,
    pub result: PicardResult,
    pub max_ratio: f64,
    /// `max |p z* - x_direct|` over the mesh nodes in `[t0, T]`.
    pub method_gap: f64,
}

pub fn run_picard(cfg: &RunConfig, opts: &PicardOptions) -> Result<(PicardSummary, Outcome)> {
    let t_end = opts.t_end.unwrap_or(cfg.run.picard_t_end);
    let tol = opts.tol.unwrap_or(cfg.run.tol);
    let psi = cfg.history(t_end)?;
    let op = FixedPointOperator::new(&cfg.problem, &cfg.aux, &psi, t_end, cfg.run.mesh)?;
    let result = op.picard(tol, cfg.run.max_iter)?;
    let x = reconstruct_x(&result.z, &cfg.aux)?;

    let direct = integrate(&cfg.problem, &psi, &IntegratorOptions::new(t_end, cfg.run.step))?;
    let mut method_gap: f64 = 0.0;
    for (&t, &v) in x.nodes().iter().zip(x.values()).skip(x.junction()) {
        method_gap = method_gap.max((v - direct.value(t)?).abs());
    }
    let max_ratio = result.ratios.iter().copied().fold(0.0, f64::max);

    if let Some(path) = &opts.csv {
        let mut body = String::new();
        let _ = writeln!(body, "# ndde picard");
        let _ = writeln!(body, "# config = {}", cfg.origin);
        let _ = writeln!(body, "# T = {t_end}");
        let _ = writeln!(body, "# mesh = {}", cfg.run.mesh);
        let _ = writeln!(body, "# tol = {tol:e}");
        let _ = writeln!(body, "# status = {}", status_name(result.status));
        let _ = writeln!(body, "# iterations = {}", result.iterations);
        let _ = writeln!(body, "t,z,x");
        for ((&t, &z), &xv) in result.z.nodes().iter().zip(result.z.values()).zip(x.values()) {
            let _ = writeln!(body, "{t},{z},{xv}");
        }
        write_file(path, &body)?;
    }

    let mut text = String::new();
    let _ = writeln!(text, "config      {}", cfg.origin);
    let _ = writeln!(text, "mesh        h = {}, T = {t_end}, {} nodes", cfg.run.mesh, result.z.nodes().len());
    let _ = writeln!(text, "status      {} after {} iterations (tol {tol:e})", status_name(result.status), result.iterations);
    if let Some(last) = result.steps.last() {
        let _ = writeln!(text, "last step   {last:.3e}");
    }
    let _ = writeln!(text, "max ratio   {max_ratio:.4}");
    let _ = writeln!(text, "unit ball   {}", if result.cap_exceeded { "left by some iterate" } else { "kept" });
    let _ = writeln!(text, "residual    {:.3e}", result.residual);
    let _ = writeln!(text, "p*z vs x    {method_gap:.3e} (direct RK4, h = {})", cfg.run.step);
    if let Some(path) = &opts.csv {
        let _ = writeln!(text, "csv         {}", path.display());
    }
    let code = if result.status == PicardStatus::Converged { EXIT_OK } else { EXIT_INCONCLUSIVE };
    Ok((PicardSummary { t_end, mesh: cfg.run.mesh, result, max_ratio, method_gap }, Outcome { text, code }))
}

pub fn status_name(s: PicardStatus) -> &'static str {
    match s {
        PicardStatus::Converged => "converged",
        PicardStatus::MaxIterations => "not converged (iteration limit)",
        PicardStatus::Diverged => "diverged",
    }
}
