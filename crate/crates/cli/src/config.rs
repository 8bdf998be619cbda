//! Run configuration files.
//!
//! A config is a flat INI file with four sections. Values are expressions
//! in the coefficient language, optionally wrapped in double quotes:
//!
//! ```text
//! [problem]
//! gamma = "1/3"
//! a_bracket = "0"
//! b = "sin(t)/7"
//! ...
//! ```
//!
//! `#` and `;` start comment lines. Every error carries the line it was
//! found on, or the line of the key it concerns.
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndde::criteria::{bracket_matched_a, CriteriaError, DEFAULT_COARSE, DEFAULT_EPSILON, DEFAULT_TMAX};
use ndde::expr::{Expression, Var};
use ndde::integrator::DEFAULT_STEP;
use ndde::model::{horizon, AuxiliarySpec, DelaySpec, HistoryFunction, ModelError, NeutralPart, ProblemSpec, Rational};
use ndde::operator::{DEFAULT_MAX_ITER, DEFAULT_MESH_STEP, DEFAULT_PICARD_TOL};
use thiserror::Error;

const SECTIONS: [&str; 4] = ["problem", "aux", "history", "run"];

const PROBLEM_KEYS: &[&str] = &[
    "form", "t0", "gamma", "a", "a_bracket", "b", "q", "b_q", "d", "f", "k2", "k3", "c", "G", "k4", "r1", "r2",
];
const AUX_KEYS: &[&str] = &["p", "g"];
const HISTORY_KEYS: &[&str] = &["psi", "dpsi"];
const RUN_KEYS: &[&str] =
    &["tmax", "n_coarse", "epsilon", "T", "step", "picard_T", "mesh", "tol", "max_iter"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: cannot read")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}:{line}: {message}")]
    At { origin: String, line: usize, message: String },
    #[error("{origin}: {message}")]
    File { origin: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Linear,
    General,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Linear => "linear",
            Form::General => "general",
        })
    }
}

/// Where `a(t)` came from.
#[derive(Clone, Debug, PartialEq)]
pub enum DriftSource {
    Given,
    /// Chosen so the combined bracket equals the target expression.
    Bracket(Expression),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub tmax: f64,
    pub n_coarse: usize,
    pub epsilon: f64,
    pub t_end: f64,
    pub step: f64,
    pub picard_t_end: f64,
    pub mesh: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            tmax: DEFAULT_TMAX,
            n_coarse: DEFAULT_COARSE,
            epsilon: DEFAULT_EPSILON,
            t_end: 200.0,
            step: DEFAULT_STEP,
            picard_t_end: 50.0,
            mesh: DEFAULT_MESH_STEP,
            tol: DEFAULT_PICARD_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub origin: String,
    pub form: Form,
    pub problem: ProblemSpec,
    pub drift: DriftSource,
    pub aux: AuxiliarySpec,
    pub psi: Expression,
    pub dpsi: Option<Expression>,
    pub run: RunSection,
    pub warnings: Vec<String>,
}

impl RunConfig {
    /// ψ on `[m, t0]` where `m` is the delay horizon up to `t_end`.
    pub fn history(&self, t_end: f64) -> Result<HistoryFunction, ModelError> {
        let (m, _) = horizon(&self.problem, t_end)?;
        HistoryFunction::new(self.psi.clone(), self.dpsi.clone(), m.min(self.problem.t0), self.problem.t0)
    }
}

struct Entry {
    value: String,
    line: usize,
}

struct Sections {
    origin: String,
    map: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

impl Sections {
    fn err(&self, line: usize, message: impl Into<String>) -> ConfigError {
        ConfigError::At { origin: self.origin.clone(), line, message: message.into() }
    }

    fn section(&self, name: &str) -> Result<&BTreeMap<String, Entry>, ConfigError> {
        self.map.get(name).map(|(_, s)| s).ok_or_else(|| ConfigError::File {
            origin: self.origin.clone(),
            message: format!("missing section [{name}]"),
        })
    }

    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        self.map.get(section).and_then(|(_, s)| s.get(key)).map(|e| e.line)
    }

    fn expr(&self, section: &str, key: &str) -> Result<Option<(Expression, usize)>, ConfigError> {
        let Some(e) = self.section(section)?.get(key) else { return Ok(None) };
        let parsed = Expression::parse(&e.value).map_err(|err| self.err(e.line, format!("{key}: {err}")))?;
        Ok(Some((parsed, e.line)))
    }

    fn required(&self, section: &str, key: &str) -> Result<(Expression, usize), ConfigError> {
        let line = self.map.get(section).map(|(l, _)| *l).unwrap_or(0);
        self.expr(section, key)?.ok_or_else(|| self.err(line, format!("[{section}] is missing required key `{key}`")))
    }

    fn number(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        let Some((e, line)) = self.expr(section, key)? else { return Ok(default) };
        if [Var::T, Var::X, Var::Y].iter().any(|&v| e.depends_on(v)) {
            return Err(self.err(line, format!("{key} must be a constant")));
        }
        let v = e.at(0.0).map_err(|err| self.err(line, format!("{key}: {err}")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("{key} = {v} is not finite")));
        }
        Ok(v)
    }

    fn positive(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.number(section, key, default)?;
        if !(v > 0.0) {
            let line = self.line_of(section, key).unwrap_or(0);
            return Err(self.err(line, format!("{key} must be positive, got {v}")));
        }
        Ok(v)
    }

    fn count(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        let v = self.number(section, key, default as f64)?;
        if v < 1.0 || v.fract() != 0.0 || v > 1e9 {
            let line = self.line_of(section, key).unwrap_or(0);
            return Err(self.err(line, format!("{key} must be a positive integer, got {v}")));
        }
        Ok(v as usize)
    }
}

fn strip_quotes(raw: &str) -> Option<&str> {
    match raw.strip_prefix('"') {
        Some(rest) => rest.strip_suffix('"').filter(|s| !s.contains('"')),
        None => (!raw.contains('"')).then_some(raw),
    }
}

fn split(text: &str, origin: &str) -> Result<Sections, ConfigError> {
    let err = |line: usize, message: String| ConfigError::At { origin: origin.to_string(), line, message };
    let mut map: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line, format!("malformed section header `{s}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, format!("unknown section [{name}]; expected one of {}", SECTIONS.join(", "))));
            }
            if let Some((first, _)) = map.get(name) {
                return Err(err(line, format!("section [{name}] repeated (first on line {first})")));
            }
            map.insert(name.to_string(), (line, BTreeMap::new()));
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{s}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let section = current.as_deref().ok_or_else(|| err(line, format!("`{key}` appears before any section")))?;
        let allowed = match section {
            "problem" => PROBLEM_KEYS,
            "aux" => AUX_KEYS,
            "history" => HISTORY_KEYS,
            _ => RUN_KEYS,
        };
        if !allowed.contains(&key) {
            return Err(err(line, format!("unknown key `{key}` in [{section}]; allowed: {}", allowed.join(", "))));
        }
        let value = strip_quotes(value).ok_or_else(|| err(line, format!("unbalanced quotes in value of `{key}`")))?;
        let entries = &mut map.get_mut(section).expect("section registered").1;
        if let Some(prev) = entries.get(key) {
            return Err(err(line, format!("`{key}` repeated (first on line {})", prev.line)));
        }
        entries.insert(key.to_string(), Entry { value: value.to_string(), line });
    }
    Ok(Sections { origin: origin.to_string(), map })
}

/// The key a model error is about, so the message can point at its line.
fn model_error_key(e: &ModelError) -> Option<(&'static str, String)> {
    let owned = |s: &str| s.to_string();
    match e {
        ModelError::UnitDelaySlope { .. } => Some(("problem", owned("r1"))),
        ModelError::NegativeDelay { name, .. } => Some(("problem", name.clone())),
        ModelError::NonPositiveWeight { .. } => Some(("aux", owned("p"))),
        ModelError::NegativeExponentRate { .. } => Some(("aux", owned("g"))),
        ModelError::NonzeroAtOrigin { name, .. } => Some((
            "problem",
            owned(match name.as_str() {
                "G(0)" => "G",
                "F(0,0)" => "f",
                _ => "q",
            }),
        )),
        ModelError::Lipschitz { name, .. } | ModelError::NonPositiveConstant { name, .. } => Some((
            "problem",
            owned(match name.as_str() {
                "bQ" => "b_q",
                other => other,
            }),
        )),
        ModelError::Exponent(_) => Some(("problem", owned("gamma"))),
        ModelError::Eval { what, .. } | ModelError::Diff { what, .. } => {
            let key = what.trim_end_matches('\'');
            PROBLEM_KEYS
                .iter()
                .find(|k| **k == key)
                .map(|k| ("problem", owned(k)))
                .or_else(|| AUX_KEYS.iter().find(|k| **k == key).map(|k| ("aux", owned(k))))
        }
        _ => None,
    }
}

fn model_err(s: &Sections, e: ModelError) -> ConfigError {
    match model_error_key(&e).and_then(|(sec, key)| s.line_of(sec, &key).map(|l| (l, key))) {
        Some((line, key)) => s.err(line, format!("{key}: {e}")),
        None => ConfigError::File { origin: s.origin.clone(), message: e.to_string() },
    }
}

fn criteria_err(s: &Sections, e: CriteriaError) -> ConfigError {
    match e {
        CriteriaError::Model(m) => model_err(s, m),
        other => {
            let line = s.line_of("problem", "a_bracket").unwrap_or(0);
            s.err(line, format!("a_bracket: {other}"))
        }
    }
}

/// Parses and validates a config held in memory; `origin` names it in
/// error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let s = split(text, origin)?;
    for name in ["problem", "aux", "history"] {
        s.section(name)?;
    }

    let form = match s.section("problem")?.get("form") {
        None => Form::Linear,
        Some(e) => match e.value.as_str() {
            "linear" => Form::Linear,
            "general" => Form::General,
            other => return Err(s.err(e.line, format!("form must be `linear` or `general`, got `{other}`"))),
        },
    };
    let (linear_only, general_only): (&[&str], &[&str]) = (&["b"], &["q", "b_q", "d", "f", "k2", "k3"]);
    let foreign = if form == Form::Linear { general_only } else { linear_only };
    for key in foreign {
        if let Some(line) = s.line_of("problem", key) {
            return Err(s.err(line, format!("`{key}` does not belong to the {form} form")));
        }
    }

    let t0 = s.number("problem", "t0", 0.0)?;
    let gamma = match s.section("problem")?.get("gamma") {
        None => return Err(s.err(s.map["problem"].0, "[problem] is missing required key `gamma`")),
        Some(e) => Rational::parse(&e.value).map_err(|err| s.err(e.line, format!("gamma: {err}")))?,
    };
    let drift_given = s.expr("problem", "a")?;
    let drift_target = s.expr("problem", "a_bracket")?;
    let (a, drift) = match (drift_given, drift_target) {
        (Some((a, _)), None) => (a, DriftSource::Given),
        (None, Some((target, line))) => {
            if form != Form::Linear {
                return Err(s.err(line, "a_bracket needs the linear form"));
            }
            (Expression::Const(0.0), DriftSource::Bracket(target))
        }
        (Some(_), Some((_, line))) => return Err(s.err(line, "give either `a` or `a_bracket`, not both")),
        (None, None) => {
            return Err(s.err(s.map["problem"].0, "[problem] is missing required key `a` (or `a_bracket`)"))
        }
    };
    let (c, _) = s.required("problem", "c")?;
    let (nonlinearity, _) = s.required("problem", "G")?;
    let k4 = s.number("problem", "k4", 1.0)?;
    let delay = |key: &str| -> Result<DelaySpec, ConfigError> {
        let (e, line) = s.required("problem", key)?;
        DelaySpec::new(e).map_err(|err| s.err(line, format!("{key}: {err}")))
    };
    let (r1, r2) = (delay("r1")?, delay("r2")?);
    let neutral = match form {
        Form::Linear => NeutralPart::Linear { b: s.required("problem", "b")?.0 },
        Form::General => {
            let (q, line) = s.required("problem", "q")?;
            let q_t = q.differentiate(Var::T).map_err(|e| s.err(line, format!("q: {e}")))?;
            let q_x = q.differentiate(Var::X).map_err(|e| s.err(line, format!("q: {e}")))?;
            let zero = || Expression::Const(0.0);
            NeutralPart::General {
                q,
                q_t,
                q_x,
                b_q: s.required("problem", "b_q")?.0,
                d: s.expr("problem", "d")?.map_or_else(zero, |e| e.0),
                f: s.expr("problem", "f")?.map_or_else(zero, |e| e.0),
                k2: s.number("problem", "k2", 1.0)?,
                k3: s.number("problem", "k3", 1.0)?,
            }
        }
    };
    let mut problem = ProblemSpec { t0, gamma, a, c, nonlinearity, k4, r1, r2, neutral };

    let (p, _) = s.required("aux", "p")?;
    let (g, _) = s.required("aux", "g")?;
    let aux = AuxiliarySpec::new(t0, p, g).map_err(|e| model_err(&s, e))?;

    let (psi, _) = s.required("history", "psi")?;
    let dpsi = s.expr("history", "dpsi")?.map(|e| e.0);

    let run = if s.map.contains_key("run") {
        let d = RunSection::default();
        RunSection {
            tmax: s.positive("run", "tmax", d.tmax)?,
            n_coarse: s.count("run", "n_coarse", d.n_coarse)?,
            epsilon: s.positive("run", "epsilon", d.epsilon)?,
            t_end: s.positive("run", "T", d.t_end)?,
            step: s.positive("run", "step", d.step)?,
            picard_t_end: s.positive("run", "picard_T", d.picard_t_end)?,
            mesh: s.positive("run", "mesh", d.mesh)?,
            tol: s.positive("run", "tol", d.tol)?,
            max_iter: s.count("run", "max_iter", d.max_iter)?,
        }
    } else {
        RunSection::default()
    };
    for (key, v) in [("tmax", run.tmax), ("T", run.t_end), ("picard_T", run.picard_t_end)] {
        if v <= t0 {
            let line = s.line_of("run", key).unwrap_or(0);
            return Err(s.err(line, format!("{key} = {v} must exceed t0 = {t0}")));
        }
    }

    let reach = run.tmax.max(run.t_end).max(run.picard_t_end);
    if let DriftSource::Bracket(target) = &drift {
        problem.a = bracket_matched_a(&problem, &aux, target, reach).map_err(|e| criteria_err(&s, e))?;
    }
    let mut warnings: Vec<String> =
        problem.validate(reach).map_err(|e| model_err(&s, e))?.into_iter().map(|w| w.0).collect();
    let (m, _) = horizon(&problem, reach).map_err(|e| model_err(&s, e))?;
    warnings.extend(aux.validate(m, reach).map_err(|e| model_err(&s, e))?.into_iter().map(|w| w.0));

    let cfg = RunConfig { origin: origin.to_string(), form, problem, drift, aux, psi, dpsi, run, warnings };
    let hist = cfg.history(reach).map_err(|e| match s.line_of("history", "psi") {
        Some(line) => s.err(line, format!("psi: {e}")),
        None => ConfigError::File { origin: origin.to_string(), message: e.to_string() },
    })?;
    for t in [hist.m, 0.5 * (hist.m + hist.t0), hist.t0] {
        let bad = match hist.derivative(t) {
            None => Some("ψ is not differentiable; supply `dpsi`".to_string()),
            Some(Err(e)) => Some(format!("dpsi at t = {t}: {e}")),
            Some(Ok(_)) => None,
        };
        if let Some(msg) = bad {
            let line = s.line_of("history", "dpsi").or(s.line_of("history", "psi")).unwrap_or(0);
            return Err(s.err(line, msg));
        }
    }
    Ok(cfg)
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { origin: origin.clone(), source })?;
    parse_config(&text, &origin)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
gamma = "1/3"
a = "1"
b = "0.1"
c = "0.01"
G = "sin(x)"
r1 = "1"
r2 = "1"

[aux]
p = "1"
g = "0"

[history]
psi = "0.01"

[run]
tmax = "100"
"#;

    fn line_of(err: ConfigError) -> usize {
        match err {
            ConfigError::At { line, .. } => line,
            other => panic!("no line: {other}"),
        }
    }

    #[test]
    fn minimal_config_loads() {
        let cfg = parse_config(MINIMAL, "mem").unwrap();
        assert_eq!(cfg.form, Form::Linear);
        assert_eq!(cfg.problem.gamma.to_string(), "1/3");
        assert_eq!(cfg.run.tmax, 100.0);
        assert_eq!(cfg.run.t_end, 200.0);
        assert_eq!(cfg.drift, DriftSource::Given);
    }

    #[test]
    fn empty_file_misses_a_section() {
        let e = parse_config("", "empty").unwrap_err();
        assert!(e.to_string().contains("missing section [problem]"), "{e}");
    }

    #[test]
    fn unknown_key_cites_its_line() {
        let text = MINIMAL.replace("G = \"sin(x)\"", "G = \"sin(x)\"\nbeta = \"2\"");
        let e = parse_config(&text, "mem").unwrap_err();
        assert!(e.to_string().contains("unknown key `beta`"), "{e}");
        assert_eq!(line_of(e), 8);
    }

    #[test]
    fn unit_delay_slope_is_rejected_at_r1() {
        let text = MINIMAL.replace("r1 = \"1\"", "r1 = \"t+1\"");
        let e = parse_config(&text, "mem").unwrap_err();
        assert!(e.to_string().contains("r1'(t) = 1"), "{e}");
        assert_eq!(line_of(e), 8);
    }

    #[test]
    fn parse_errors_cite_lines() {
        let text = MINIMAL.replace("c = \"0.01\"", "c = \"0.01*(\"");
        assert_eq!(line_of(parse_config(&text, "mem").unwrap_err()), 6);
        let text = MINIMAL.replace("a = \"1\"", "a = \"1");
        assert_eq!(line_of(parse_config(&text, "mem").unwrap_err()), 4);
        let text = MINIMAL.replace("[aux]", "[aux\n");
        assert!(parse_config(&text, "mem").unwrap_err().to_string().contains("malformed"));
    }

    #[test]
    fn structural_mistakes() {
        let cases = [
            (MINIMAL.replace("a = \"1\"", "a = \"1\"\na_bracket = \"0\""), "either"),
            (MINIMAL.replace("a = \"1\"", ""), "missing required key `a`"),
            (MINIMAL.replace("[run]", "[runs]"), "unknown section"),
            (MINIMAL.replace("b = \"0.1\"", "b = \"0.1\"\nq = \"x\""), "does not belong"),
            (MINIMAL.replace("tmax = \"100\"", "tmax = \"t\""), "constant"),
            (MINIMAL.replace("tmax = \"100\"", "tmax = \"-1\""), "positive"),
            (MINIMAL.replace("G = \"sin(x)\"", "G = \"cos(x)\""), "G"),
            (format!("x = \"1\"\n{MINIMAL}"), "before any section"),
            (MINIMAL.replace("[history]\npsi = \"0.01\"", ""), "missing section [history]"),
            (MINIMAL.replace("psi = \"0.01\"", "psi = \"abs(t)\""), "dpsi"),
        ];
        for (text, needle) in cases {
            let e = parse_config(&text, "mem").unwrap_err().to_string();
            assert!(e.contains(needle), "{needle}: {e}");
        }
    }

    #[test]
    fn repeated_keys_and_sections() {
        let text = MINIMAL.replace("a = \"1\"", "a = \"1\"\na = \"2\"");
        assert!(parse_config(&text, "mem").unwrap_err().to_string().contains("repeated (first on line 4)"));
        let text = format!("{MINIMAL}\n[run]\n");
        assert!(parse_config(&text, "mem").unwrap_err().to_string().contains("section [run] repeated"));
    }

    #[test]
    fn general_form_derives_q_partials() {
        let text = MINIMAL
            .replace("b = \"0.1\"", "form = \"general\"\nq = \"0.1*sin(t)*x\"\nb_q = \"0.1\"")
            .replace("r1 = \"1\"", "r1 = \"0.5\"");
        let cfg = parse_config(&text, "mem").unwrap();
        match &cfg.problem.neutral {
            NeutralPart::General { q_x, d, k2, .. } => {
                assert!((q_x.at(1.0).unwrap() - 0.1 * 1f64.sin()).abs() < 1e-15);
                assert!(d.is_zero());
                assert_eq!(*k2, 1.0);
            }
            _ => panic!("expected general form"),
        }
    }

    #[test]
    fn bracket_target_replaces_a() {
        let text = MINIMAL.replace("a = \"1\"", "a_bracket = \"0\"");
        let e = parse_config(&text, "mem").unwrap_err();
        assert!(e.to_string().contains("t - r1(t) >= t0"), "{e}");
        let text = text.replace("r1 = \"1\"", "r1 = \"0.5*t\"").replace("b = \"0.1\"", "b = \"0.1*sin(t)\"");
        let cfg = parse_config(&text, "mem").unwrap();
        assert!(matches!(cfg.drift, DriftSource::Bracket(_)));
        assert!(!cfg.problem.a.is_zero());
    }

    #[test]
    fn history_spans_the_horizon() {
        let cfg = parse_config(MINIMAL, "mem").unwrap();
        let h = cfg.history(10.0).unwrap();
        assert_eq!((h.m, h.t0), (-1.0, 0.0));
    }
}
