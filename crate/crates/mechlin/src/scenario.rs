//! The text scenario format: one complete experiment — system, rollout,
//! task — described in a line-oriented `key = value` file.
//!
//! A scenario has up to three sections; `[system]` and `[run]` are
//! required, `[task]` defaults to a plain simulation:
//!
//! ```text
//! # comments run to the end of the line, blank lines are skipped
//! [system]
//! template = pendulum          # a built-in system by name
//! l = 2.0                      # template parameters, any order
//!
//! [run]
//! dt = 0.1                     # step size, required
//! steps = 100                  # transition count, required, >= 1
//! q = [0.2]                    # initial configuration, default zeros
//! p = [0.5]                    # initial momentum, default zeros
//! input = [0.8]                # input source, default zeros
//! newton_tol = 1e-12
//! newton_max_iters = 50
//!
//! [task]
//! kind = simulate              # simulate | linearize | check-singularity
//!                              # | lqr | optimize
//! ```
//!
//! An inline system replaces `template` with an explicit description
//! whose expressions use the same grammar as [`crate::graph::parse_expr`]:
//!
//! ```text
//! [system]
//! nq = 1
//! nu = 1
//! lagrangian = 0.5*qdot0^2 + g*cos(q0)
//! forcing = [u0]               # one expression per coordinate
//! constraints = []             # optional, fewer than nq entries
//! param.g = 9.8                # named constants visible to expressions
//! ```
//!
//! Input sources: a bracketed vector applies the same input at every
//! step; `expr [...]` gives one expression per input channel with the
//! step index `k` and step time `t` in scope; `table <path>` defers to a
//! CSV file (one row per step, one column per channel) that the caller
//! loads.
//!
//! Values are decimal numbers or bracketed comma lists. Section names,
//! template names, and template parameters are checked unconditionally;
//! other unknown keys are errors under `strict` and reported as warnings
//! otherwise. Every diagnostic carries its 1-based line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};

use crate::control::Weights;
use crate::control::OptMethod;
use crate::graph::{parse_expr, ExprGraph, GraphBuilder, VarPolicy};
use crate::integrator::{DiscreteState, NewtonOpts};
use crate::model::{MechSystem, ModelError};
use crate::systems::SystemTemplate;

/// A fully validated scenario: the system is built, every vector has
/// been checked against its dimensions, and task options carry their
/// defaults. Only `table` input files remain unresolved.
pub struct Scenario {
    pub system: MechSystem,
    /// How the system was described, for reporting.
    pub summary: SystemSummary,
    pub dt: f64,
    pub steps: usize,
    pub initial: DiscreteState,
    pub input: InputSpec,
    pub newton: NewtonOpts,
    pub task: Task,
}

/// Provenance of the system: the template name with the resolved
/// parameter values, or `template: None` for an inline description.
#[derive(Clone, Debug)]
pub struct SystemSummary {
    pub template: Option<String>,
    pub params: BTreeMap<String, f64>,
    pub nq: usize,
    pub nu: usize,
    pub nc: usize,
}

/// Where the per-step input vector comes from.
pub enum InputSpec {
    /// The same vector at every step.
    Constant(DVector<f64>),
    /// One expression per channel over the variables `k` and `t`; both
    /// are always declared, so binding `[("k", _), ("t", _)]` works for
    /// every graph. `text` keeps the source of each channel.
    Expr { graph: ExprGraph, text: Vec<String> },
    /// A CSV file, one row per step; resolved by the caller relative to
    /// the scenario file.
    Table(PathBuf),
}

/// What to do with the rolled-out system.
pub enum Task {
    Simulate,
    Linearize { order: u8 },
    CheckSingularity,
    Lqr(LqrTask),
    Optimize(OptimizeTask),
}

impl Task {
    /// The task keyword as written in scenario files.
    pub fn kind(&self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Linearize { .. } => "linearize",
            Task::CheckSingularity => "check-singularity",
            Task::Lqr(_) => "lqr",
            Task::Optimize(_) => "optimize",
        }
    }
}

/// Regulator task: weights for the gain synthesis along the rolled-out
/// reference, and the initial-state perturbation for the closed- and
/// open-loop comparison rollouts.
pub struct LqrTask {
    pub weights: Weights,
    pub perturb_q: DVector<f64>,
    pub perturb_p: DVector<f64>,
}

/// Trajectory-optimization task: the reference holds the initial state
/// at index 0 and `(target_q, target_p)` from index 1 on, and the
/// `[run]` input source seeds the input iterate.
pub struct OptimizeTask {
    pub weights: Weights,
    pub target_q: DVector<f64>,
    pub target_p: DVector<f64>,
    pub method: OptMethod,
    pub tol: f64,
    pub max_iters: usize,
}

/// Parse result: the scenario plus any non-fatal diagnostics (unknown
/// keys outside strict mode).
pub struct ParsedScenario {
    pub scenario: Scenario,
    pub warnings: Vec<String>,
}

/// Scenario rejection, with the 1-based source line where available.
#[derive(Clone, Debug)]
pub enum ScenarioError {
    /// Malformed line, section header, or expression.
    Syntax { line: usize, msg: String },
    /// The same key appears twice in one section.
    DuplicateKey { line: usize, section: &'static str, key: String, first: usize },
    /// A key the schema does not know (raised under strict mode, and
    /// always for template parameters).
    UnknownKey { line: usize, section: &'static str, key: String },
    MissingSection { section: &'static str },
    MissingKey { section: &'static str, key: &'static str },
    /// A vector whose length does not fit the system.
    Dimension { line: usize, key: String, expected: usize, got: usize },
    /// A value that parses but is out of range or inconsistent.
    Value { line: usize, msg: String },
    /// The system description was rejected when the model was built.
    Model { line: usize, source: ModelError },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Syntax { line, msg } => write!(f, "line {line}: {msg}"),
            ScenarioError::DuplicateKey { line, section, key, first } => write!(
                f,
                "line {line}: duplicate key `{key}` in [{section}] (first given at line {first})"
            ),
            ScenarioError::UnknownKey { line, section, key } => {
                write!(f, "line {line}: unknown key `{key}` in [{section}]")
            }
            ScenarioError::MissingSection { section } => {
                write!(f, "scenario has no [{section}] section")
            }
            ScenarioError::MissingKey { section, key } => {
                write!(f, "scenario is missing required key `{key}` in [{section}]")
            }
            ScenarioError::Dimension { line, key, expected, got } => write!(
                f,
                "line {line}: `{key}` has {got} entries, expected {expected}"
            ),
            ScenarioError::Value { line, msg } => write!(f, "line {line}: {msg}"),
            ScenarioError::Model { line, source } => write!(f, "line {line}: {source}"),
        }
    }
}

impl std::error::Error for ScenarioError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ScenarioError::Model { source, .. } => Some(source),
            _ => None,
        }
    }
}

// --------------------------------------------------------------------------
// Raw key-value layer.

struct RawEntry {
    line: usize,
    key: String,
    value: String,
    used: bool,
}

struct Section {
    name: &'static str,
    /// Line of the section header, or of the first entry when the
    /// section was defaulted.
    entries: Vec<RawEntry>,
}

impl Section {
    /// Consumes `key`, returning its line and value.
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let e = self.entries.iter_mut().find(|e| e.key == key)?;
        e.used = true;
        Some((e.line, e.value.clone()))
    }

    /// Consumes every key for which `pred` holds, in file order.
    fn take_matching(&mut self, mut pred: impl FnMut(&str) -> bool) -> Vec<(usize, String, String)> {
        let mut out = Vec::new();
        for e in &mut self.entries {
            if !e.used && pred(&e.key) {
                e.used = true;
                out.push((e.line, e.key.clone(), e.value.clone()));
            }
        }
        out
    }

    fn leftovers(&self) -> impl Iterator<Item = &RawEntry> {
        self.entries.iter().filter(|e| !e.used)
    }
}

const SECTIONS: [&str; 3] = ["system", "run", "task"];

/// Splits the text into the three known sections, enforcing the line
/// grammar and per-section key uniqueness.
fn split_sections(text: &str) -> Result<[Section; 3], ScenarioError> {
    let mut sections = [
        Section { name: "system", entries: Vec::new() },
        Section { name: "run", entries: Vec::new() },
        Section { name: "task", entries: Vec::new() },
    ];
    let mut seen: [Option<usize>; 3] = [None; 3];
    let mut current: Option<usize> = None;

    for (ix, raw) in text.lines().enumerate() {
        let line = ix + 1;
        let body = match raw.find('#') {
            Some(cut) => &raw[..cut],
            None => raw,
        };
        let body = body.trim();
        if body.is_empty() {
            continue;
        }

        if let Some(inner) = body.strip_prefix('[') {
            let Some(name) = inner.strip_suffix(']') else {
                return Err(ScenarioError::Syntax {
                    line,
                    msg: format!("unterminated section header `{body}`"),
                });
            };
            let name = name.trim();
            let Some(s) = SECTIONS.iter().position(|&k| k == name) else {
                return Err(ScenarioError::Syntax {
                    line,
                    msg: format!(
                        "unknown section `[{name}]` (sections are [system], [run], [task])"
                    ),
                });
            };
            if let Some(first) = seen[s] {
                return Err(ScenarioError::Syntax {
                    line,
                    msg: format!("section `[{name}]` appears again (first opened at line {first})"),
                });
            }
            seen[s] = Some(line);
            current = Some(s);
            continue;
        }

        let Some(eq) = body.find('=') else {
            return Err(ScenarioError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            });
        };
        let key = body[..eq].trim();
        let value = body[eq + 1..].trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ScenarioError::Syntax {
                line,
                msg: format!("`{}` is not a valid key", &body[..eq].trim()),
            });
        }
        if value.is_empty() {
            return Err(ScenarioError::Syntax { line, msg: format!("empty value for `{key}`") });
        }
        let Some(s) = current else {
            return Err(ScenarioError::Syntax {
                line,
                msg: format!("key `{key}` appears before any section header"),
            });
        };
        if let Some(prev) = sections[s].entries.iter().find(|e| e.key == key) {
            return Err(ScenarioError::DuplicateKey {
                line,
                section: sections[s].name,
                key: key.to_string(),
                first: prev.line,
            });
        }
        sections[s].entries.push(RawEntry {
            line,
            key: key.to_string(),
            value: value.to_string(),
            used: false,
        });
    }

    if seen[0].is_none() {
        return Err(ScenarioError::MissingSection { section: "system" });
    }
    if seen[1].is_none() {
        return Err(ScenarioError::MissingSection { section: "run" });
    }
    Ok(sections)
}

// --------------------------------------------------------------------------
// Value parsers.

fn number(line: usize, key: &str, v: &str) -> Result<f64, ScenarioError> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(ScenarioError::Value { line, msg: format!("`{key}` is not a finite number: `{v}`") }),
    }
}

fn count(line: usize, key: &str, v: &str) -> Result<usize, ScenarioError> {
    v.parse::<usize>().map_err(|_| ScenarioError::Value {
        line,
        msg: format!("`{key}` is not a whole number: `{v}`"),
    })
}

/// Splits a `[a, b, c]` literal into trimmed items; `[]` is empty.
fn bracket_items<'v>(line: usize, key: &str, v: &'v str) -> Result<Vec<&'v str>, ScenarioError> {
    let inner = v
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| ScenarioError::Value {
            line,
            msg: format!("`{key}` must be a bracketed list like `[1, 2]`, got `{v}`"),
        })?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(',').map(str::trim).collect())
}

fn vector(line: usize, key: &str, v: &str) -> Result<DVector<f64>, ScenarioError> {
    let items = bracket_items(line, key, v)?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        match item.parse::<f64>() {
            Ok(x) if x.is_finite() => out.push(x),
            _ => {
                return Err(ScenarioError::Value {
                    line,
                    msg: format!("entry {i} of `{key}` is not a finite number: `{item}`"),
                })
            }
        }
    }
    Ok(DVector::from_vec(out))
}

fn expect_len(
    line: usize,
    key: &str,
    v: &DVector<f64>,
    expected: usize,
) -> Result<(), ScenarioError> {
    if v.len() != expected {
        return Err(ScenarioError::Dimension {
            line,
            key: key.to_string(),
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Parses a bracketed expression list into one graph; variables follow
/// `policy` and `declare` is registered up front so every listed name
/// exists in the graph regardless of use.
fn expr_list(
    line: usize,
    key: &str,
    v: &str,
    declare: &[String],
    policy: &VarPolicy<'_>,
) -> Result<(ExprGraph, Vec<String>), ScenarioError> {
    let items = bracket_items(line, key, v)?;
    let b = GraphBuilder::new();
    for name in declare {
        b.var(name);
    }
    let mut outs = Vec::with_capacity(items.len());
    let mut text = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let e = parse_expr(item, &b, policy).map_err(|e| ScenarioError::Syntax {
            line,
            msg: format!("in entry {i} of `{key}`: {e}"),
        })?;
        outs.push(e);
        text.push(item.to_string());
    }
    Ok((b.finish(&outs), text))
}

// --------------------------------------------------------------------------
// Section resolution.

const INLINE_KEYS: [&str; 5] = ["nq", "nu", "lagrangian", "forcing", "constraints"];

fn build_system(sec: &mut Section) -> Result<(MechSystem, SystemSummary), ScenarioError> {
    if let Some((line_t, name)) = sec.take("template") {
        for e in sec.leftovers() {
            if INLINE_KEYS.contains(&e.key.as_str()) || e.key.starts_with("param.") {
                return Err(ScenarioError::Value {
                    line: e.line,
                    msg: format!("`{}` cannot be combined with `template`", e.key),
                });
            }
        }
        let Some(tmpl) = SystemTemplate::find(&name) else {
            let names: Vec<&str> = SystemTemplate::all().iter().map(|t| t.name).collect();
            return Err(ScenarioError::Value {
                line: line_t,
                msg: format!("unknown template `{name}` (available: {})", names.join(", ")),
            });
        };
        let mut overrides = BTreeMap::new();
        for (line, key, value) in sec.take_matching(|_| true) {
            if !tmpl.params.iter().any(|p| p.name == key) {
                return Err(ScenarioError::Value {
                    line,
                    msg: format!("template `{}` has no parameter `{key}`", tmpl.name),
                });
            }
            overrides.insert(key.clone(), number(line, &key, &value)?);
        }
        let system = tmpl
            .build(&overrides)
            .map_err(|source| ScenarioError::Model { line: line_t, source })?;
        let mut params = tmpl.defaults();
        params.extend(overrides);
        let summary = SystemSummary {
            template: Some(tmpl.name.to_string()),
            params,
            nq: system.nq(),
            nu: system.nu(),
            nc: system.nc(),
        };
        return Ok((system, summary));
    }

    // Inline description.
    let (line_nq, v_nq) = sec
        .take("nq")
        .ok_or(ScenarioError::MissingKey { section: "system", key: "template (or nq)" })?;
    let nq = count(line_nq, "nq", &v_nq)?;
    if nq == 0 {
        return Err(ScenarioError::Value { line: line_nq, msg: "`nq` must be at least 1".into() });
    }
    let nu = match sec.take("nu") {
        Some((line, v)) => count(line, "nu", &v)?,
        None => 0,
    };
    let mut params = BTreeMap::new();
    for (line, key, value) in sec.take_matching(|k| k.starts_with("param.")) {
        let name = key["param.".len()..].to_string();
        if name.is_empty() {
            return Err(ScenarioError::Syntax { line, msg: "`param.` needs a name".into() });
        }
        params.insert(name.clone(), number(line, &key, &value)?);
    }

    let (line_l, v_l) = sec
        .take("lagrangian")
        .ok_or(ScenarioError::MissingKey { section: "system", key: "lagrangian" })?;
    let b = GraphBuilder::new();
    let lagr_expr = parse_expr(&v_l, &b, &VarPolicy::Auto).map_err(|e| ScenarioError::Syntax {
        line: line_l,
        msg: format!("in `lagrangian`: {e}"),
    })?;
    let lagrangian = b.finish(&[lagr_expr]);

    let (forcing, line_f) = match sec.take("forcing") {
        Some((line, v)) => {
            let (g, _) = expr_list(line, "forcing", &v, &[], &VarPolicy::Auto)?;
            (g, line)
        }
        None => {
            let b = GraphBuilder::new();
            let zero: Vec<_> = (0..nq).map(|_| b.constant(0.0)).collect();
            (b.finish(&zero), line_l)
        }
    };
    let constraints = match sec.take("constraints") {
        Some((line, v)) => {
            let (g, text) = expr_list(line, "constraints", &v, &[], &VarPolicy::Auto)?;
            if text.is_empty() {
                None
            } else {
                Some((g, line))
            }
        }
        None => None,
    };
    let line_h = constraints.as_ref().map(|(_, l)| *l);

    let system = MechSystem::new(nq, nu, lagrangian, forcing, constraints.map(|(g, _)| g), params)
        .map_err(|source| {
            // Point at the graph the model named, falling back to `nq`.
            let line = match &source {
                ModelError::BadVariable { graph, .. } => match *graph {
                    "Lagrangian" => line_l,
                    "forcing" => line_f,
                    "constraints" => line_h.unwrap_or(line_nq),
                    _ => line_nq,
                },
                _ => line_nq,
            };
            ScenarioError::Model { line, source }
        })?;
    let summary = SystemSummary {
        template: None,
        params: system.params().clone(),
        nq: system.nq(),
        nu: system.nu(),
        nc: system.nc(),
    };
    Ok((system, summary))
}

fn build_input(line: usize, v: &str, nu: usize) -> Result<InputSpec, ScenarioError> {
    if v.starts_with('[') {
        let u = vector(line, "input", v)?;
        expect_len(line, "input", &u, nu)?;
        return Ok(InputSpec::Constant(u));
    }
    if let Some(rest) = v.strip_prefix("expr") {
        let declare = ["k".to_string(), "t".to_string()];
        let (graph, text) =
            expr_list(line, "input", rest.trim(), &declare, &VarPolicy::Declared(&declare))?;
        if text.len() != nu {
            return Err(ScenarioError::Dimension {
                line,
                key: "input".into(),
                expected: nu,
                got: text.len(),
            });
        }
        return Ok(InputSpec::Expr { graph, text });
    }
    if let Some(rest) = v.strip_prefix("table") {
        let path = rest.trim();
        if path.is_empty() {
            return Err(ScenarioError::Value { line, msg: "`table` needs a file path".into() });
        }
        return Ok(InputSpec::Table(PathBuf::from(path)));
    }
    Err(ScenarioError::Value {
        line,
        msg: format!("`input` must be `[...]`, `expr [...]`, or `table <path>`, got `{v}`"),
    })
}

/// Diagonal weights from the task section, defaulting to the bundled
/// recipe: weight 100 on every configuration entry, identity elsewhere.
fn build_weights(sec: &mut Section, n: usize, m: usize) -> Result<Weights, ScenarioError> {
    let mut w = Weights::configuration_weighted(n, m, 100.0);
    let mut running_diag: Option<DVector<f64>> = None;
    if let Some((line, v)) = sec.take("state_weight") {
        let d = vector(line, "state_weight", &v)?;
        expect_len(line, "state_weight", &d, 2 * n)?;
        w.q = DMatrix::from_diagonal(&d);
        w.q_terminal = w.q.clone();
        running_diag = Some(d);
    }
    if let Some((line, v)) = sec.take("input_weight") {
        let d = vector(line, "input_weight", &v)?;
        expect_len(line, "input_weight", &d, m)?;
        w.r = DMatrix::from_diagonal(&d);
    }
    if let Some((line, v)) = sec.take("terminal_weight") {
        let d = vector(line, "terminal_weight", &v)?;
        expect_len(line, "terminal_weight", &d, 2 * n)?;
        w.q_terminal = DMatrix::from_diagonal(&d);
    } else if let Some(d) = running_diag {
        w.q_terminal = DMatrix::from_diagonal(&d);
    }
    Ok(w)
}

fn build_task(sec: &mut Section, nq: usize, nu: usize) -> Result<Task, ScenarioError> {
    let (line_k, kind) = match sec.take("kind") {
        Some((line, v)) => (line, v),
        None => (0, "simulate".to_string()),
    };
    match kind.as_str() {
        "simulate" => Ok(Task::Simulate),
        "linearize" => {
            let order = match sec.take("order") {
                Some((line, v)) => {
                    let o = count(line, "order", &v)?;
                    if o != 1 && o != 2 {
                        return Err(ScenarioError::Value {
                            line,
                            msg: format!("`order` must be 1 or 2, got {o}"),
                        });
                    }
                    o as u8
                }
                None => 1,
            };
            Ok(Task::Linearize { order })
        }
        "check-singularity" => Ok(Task::CheckSingularity),
        "lqr" => {
            if nu == 0 {
                return Err(ScenarioError::Value {
                    line: line_k,
                    msg: "task `lqr` requires an actuated system (nu >= 1)".into(),
                });
            }
            let weights = build_weights(sec, nq, nu)?;
            let perturb_q = match sec.take("perturb_q") {
                Some((line, v)) => {
                    let d = vector(line, "perturb_q", &v)?;
                    expect_len(line, "perturb_q", &d, nq)?;
                    d
                }
                None => DVector::zeros(nq),
            };
            let perturb_p = match sec.take("perturb_p") {
                Some((line, v)) => {
                    let d = vector(line, "perturb_p", &v)?;
                    expect_len(line, "perturb_p", &d, nq)?;
                    d
                }
                None => DVector::zeros(nq),
            };
            Ok(Task::Lqr(LqrTask { weights, perturb_q, perturb_p }))
        }
        "optimize" => {
            if nu == 0 {
                return Err(ScenarioError::Value {
                    line: line_k,
                    msg: "task `optimize` requires an actuated system (nu >= 1)".into(),
                });
            }
            let weights = build_weights(sec, nq, nu)?;
            let (line_t, v_t) = sec
                .take("target_q")
                .ok_or(ScenarioError::MissingKey { section: "task", key: "target_q" })?;
            let target_q = vector(line_t, "target_q", &v_t)?;
            expect_len(line_t, "target_q", &target_q, nq)?;
            let target_p = match sec.take("target_p") {
                Some((line, v)) => {
                    let d = vector(line, "target_p", &v)?;
                    expect_len(line, "target_p", &d, nq)?;
                    d
                }
                None => DVector::zeros(nq),
            };
            let method = match sec.take("method") {
                Some((line, v)) => match v.as_str() {
                    "first-order" => OptMethod::FirstOrder,
                    "second-order" => OptMethod::SecondOrder,
                    other => {
                        return Err(ScenarioError::Value {
                            line,
                            msg: format!(
                                "`method` must be `first-order` or `second-order`, got `{other}`"
                            ),
                        })
                    }
                },
                None => OptMethod::SecondOrder,
            };
            let tol = match sec.take("opt_tol") {
                Some((line, v)) => {
                    let t = number(line, "opt_tol", &v)?;
                    if t <= 0.0 {
                        return Err(ScenarioError::Value {
                            line,
                            msg: "`opt_tol` must be positive".into(),
                        });
                    }
                    t
                }
                None => 1e-6,
            };
            let max_iters = match sec.take("opt_max_iters") {
                Some((line, v)) => count(line, "opt_max_iters", &v)?,
                None => 500,
            };
            Ok(Task::Optimize(OptimizeTask {
                weights,
                target_q,
                target_p,
                method,
                tol,
                max_iters,
            }))
        }
        other => Err(ScenarioError::Value {
            line: line_k,
            msg: format!(
                "unknown task kind `{other}` (one of simulate, linearize, \
                 check-singularity, lqr, optimize)"
            ),
        }),
    }
}

/// Parses and validates one scenario text. Under `strict`, keys the
/// schema does not consume are errors; otherwise they are returned as
/// warnings.
pub fn parse_scenario(text: &str, strict: bool) -> Result<ParsedScenario, ScenarioError> {
    let [mut sys_sec, mut run_sec, mut task_sec] = split_sections(text)?;

    let (system, summary) = build_system(&mut sys_sec)?;
    let n = system.nq();
    let m = system.nu();

    let (line_dt, v_dt) =
        run_sec.take("dt").ok_or(ScenarioError::MissingKey { section: "run", key: "dt" })?;
    let dt = number(line_dt, "dt", &v_dt)?;
    if dt <= 0.0 {
        return Err(ScenarioError::Value { line: line_dt, msg: "`dt` must be positive".into() });
    }
    let (line_s, v_s) =
        run_sec.take("steps").ok_or(ScenarioError::MissingKey { section: "run", key: "steps" })?;
    let steps = count(line_s, "steps", &v_s)?;
    if steps == 0 {
        return Err(ScenarioError::Value {
            line: line_s,
            msg: "`steps` must be at least 1".into(),
        });
    }

    let q = match run_sec.take("q") {
        Some((line, v)) => {
            let q = vector(line, "q", &v)?;
            expect_len(line, "q", &q, n)?;
            q
        }
        None => DVector::zeros(n),
    };
    let p = match run_sec.take("p") {
        Some((line, v)) => {
            let p = vector(line, "p", &v)?;
            expect_len(line, "p", &p, n)?;
            p
        }
        None => DVector::zeros(n),
    };
    let input = match run_sec.take("input") {
        Some((line, v)) => build_input(line, &v, m)?,
        None => InputSpec::Constant(DVector::zeros(m)),
    };

    let mut newton = NewtonOpts::default();
    if let Some((line, v)) = run_sec.take("newton_tol") {
        let t = number(line, "newton_tol", &v)?;
        if t <= 0.0 {
            return Err(ScenarioError::Value {
                line,
                msg: "`newton_tol` must be positive".into(),
            });
        }
        newton.tol = t;
    }
    if let Some((line, v)) = run_sec.take("newton_max_iters") {
        let it = count(line, "newton_max_iters", &v)?;
        if it == 0 {
            return Err(ScenarioError::Value {
                line,
                msg: "`newton_max_iters` must be at least 1".into(),
            });
        }
        newton.max_iters = it;
    }

    let task = build_task(&mut task_sec, n, m)?;

    let mut warnings = Vec::new();
    for sec in [&sys_sec, &run_sec, &task_sec] {
        for e in sec.leftovers() {
            if strict {
                return Err(ScenarioError::UnknownKey {
                    line: e.line,
                    section: sec.name,
                    key: e.key.clone(),
                });
            }
            warnings.push(format!(
                "line {}: unknown key `{}` in [{}] is ignored",
                e.line, e.key, sec.name
            ));
        }
    }

    let scenario = Scenario {
        system,
        summary,
        dt,
        steps,
        initial: DiscreteState::new(q, p),
        input,
        newton,
        task,
    };
    Ok(ParsedScenario { scenario, warnings })
}
