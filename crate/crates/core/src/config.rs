//! Model-file parsing: an INI-like document with `[section]` headers,
//! `key = value` lines and `#` comments. Coefficient values are expression
//! strings compiled against the declared dimension; the mark space is an
//! explicit `marks = [(e, weight), ...]` list.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{parse_expr, Expr, ExprError};
use crate::model::{
    CoeffError, CoefficientSet, LocalDriverFn, MarkSpace, ModelError, ProblemSpec, StateFn,
    TimeStateFn, TimeStateMarkFn,
};
use crate::operators::{Grid, GridError};
use crate::solver::SolveConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{key}` in section [{section}] (line {line})")]
    UnknownKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("duplicate key `{key}` in section [{section}] (line {line})")]
    DuplicateKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("missing required key `{key}` in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("missing required section [{0}]")]
    MissingSection(String),
    #[error("key `{key}`: expected {expected}")]
    WrongType { key: String, expected: String },
    #[error("in `{key}`: {source}")]
    BadExpression {
        key: String,
        #[source]
        source: ExprError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Text(String),
    List(Vec<Value>),
    Tuple(Vec<Value>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Number(_) => "number",
            Value::Text(_) => "string",
            Value::List(_) => "list",
            Value::Tuple(_) => "tuple",
        }
    }
}

/// Raw parsed document: sections of key/value pairs with line provenance.
#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    sections: BTreeMap<String, BTreeMap<String, (Value, usize)>>,
}

const SECTIONS: &[&str] = &["model", "grid", "solver", "picard", "mc"];

const MODEL_KEYS: &[&str] = &[
    "dimension",
    "horizon",
    "k_gamma",
    "growth_rho",
    "lipschitz_f",
    "lipschitz_gamma",
    "lipschitz_a_sigma",
    "loop_delta1",
    "loop_delta2",
    "drift",
    "drift1",
    "drift2",
    "sigma",
    "sigma11",
    "sigma12",
    "sigma21",
    "sigma22",
    "jump",
    "jump1",
    "jump2",
    "cost",
    "obstacle",
    "terminal",
    "driver",
    "marks",
    "validate_samples",
    "validate_radius",
    "loop_depth",
    "loop_t",
    "loop_starts",
];
const GRID_KEYS: &[&str] = &["box_radius", "nodes_per_axis", "time_steps"];
const SOLVER_KEYS: &[&str] = &["theta", "inner_tol", "inner_max", "damping", "penalty_n"];
const PICARD_KEYS: &[&str] = &["tol", "kmax", "k_nl"];
const MC_KEYS: &[&str] = &[
    "n_paths",
    "dt_sim",
    "seed",
    "probe_t",
    "probe_x",
    "dual_ns",
    "hit_eps",
    "stop_rule",
    "allowance",
    "moment_p",
    "moment_starts",
    "c_a_sigma",
    "oracle_rate",
    "oracle_vol",
    "oracle_strike",
    "oracle_steps",
    "oracle_tol",
];

fn allowed_keys(section: &str) -> &'static [&'static str] {
    match section {
        "model" => MODEL_KEYS,
        "grid" => GRID_KEYS,
        "solver" => SOLVER_KEYS,
        "picard" => PICARD_KEYS,
        "mc" => MC_KEYS,
        _ => &[],
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses one value: a number, a quoted string, or a bracketed list of
/// numbers and tuples.
fn parse_value(text: &str, line: usize) -> Result<Value, ConfigError> {
    let text = text.trim();
    let err = |message: String| ConfigError::Parse { line, message };
    if text.is_empty() {
        return Err(err("missing value".into()));
    }
    if let Some(stripped) = text.strip_prefix('"') {
        let inner = stripped
            .strip_suffix('"')
            .ok_or_else(|| err("unterminated string".into()))?;
        if inner.contains('"') {
            return Err(err("stray quote inside string".into()));
        }
        return Ok(Value::Text(inner.to_string()));
    }
    if text.starts_with('[') {
        let inner = text
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| err("unterminated list".into()))?;
        let mut items = Vec::new();
        for part in split_top_level(inner) {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            items.push(parse_scalar_or_tuple(part, line)?);
        }
        return Ok(Value::List(items));
    }
    parse_scalar_or_tuple(text, line)
}

fn parse_scalar_or_tuple(text: &str, line: usize) -> Result<Value, ConfigError> {
    let err = |message: String| ConfigError::Parse { line, message };
    if text.starts_with('(') {
        let inner = text
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| err("unterminated tuple".into()))?;
        let mut items = Vec::new();
        for part in inner.split(',') {
            let part = part.trim();
            let v: f64 = part
                .parse()
                .map_err(|_| err(format!("`{part}` is not a number")))?;
            items.push(Value::Number(v));
        }
        return Ok(Value::Tuple(items));
    }
    let v: f64 = text
        .parse()
        .map_err(|_| err(format!("`{text}` is not a number")))?;
    Ok(Value::Number(v))
}

/// Splits on commas that are not nested inside parentheses.
fn split_top_level(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&text[start..]);
    parts
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<ConfigDoc, ConfigError> {
        let mut doc = ConfigDoc::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                let name = line
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| ConfigError::Parse {
                        line: line_no,
                        message: "malformed section header".into(),
                    })?
                    .trim()
                    .to_string();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: format!("unknown section [{name}]"),
                    });
                }
                doc.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let (key, value_text) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            let section_name = section.clone().ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: "key outside of any [section]".into(),
            })?;
            if !allowed_keys(&section_name).contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    section: section_name,
                    key,
                    line: line_no,
                });
            }
            let value = parse_value(value_text, line_no)?;
            let entry = doc.sections.get_mut(&section_name).unwrap();
            if entry.contains_key(&key) {
                return Err(ConfigError::DuplicateKey {
                    section: section_name,
                    key,
                    line: line_no,
                });
            }
            entry.insert(key, (value, line_no));
        }
        Ok(doc)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    fn get(&self, section: &str, key: &str) -> Option<&Value> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|(v, _)| v)
    }

    fn require(&self, section: &str, key: &str) -> Result<&Value, ConfigError> {
        if !self.has_section(section) {
            return Err(ConfigError::MissingSection(section.to_string()));
        }
        self.get(section, key).ok_or_else(|| ConfigError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    pub fn number(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        match self.require(section, key)? {
            Value::Number(v) => Ok(*v),
            other => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("number, got {}", other.type_name()),
            }),
        }
    }

    pub fn number_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(Value::Number(v)) => Ok(*v),
            Some(other) => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("number, got {}", other.type_name()),
            }),
        }
    }

    pub fn text(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        match self.require(section, key)? {
            Value::Text(s) => Ok(s),
            other => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("quoted string, got {}", other.type_name()),
            }),
        }
    }

    pub fn text_or<'a>(
        &'a self,
        section: &str,
        key: &str,
        default: &'a str,
    ) -> Result<&'a str, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(Value::Text(s)) => Ok(s),
            Some(other) => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("quoted string, got {}", other.type_name()),
            }),
        }
    }

    pub fn list(&self, section: &str, key: &str) -> Result<&[Value], ConfigError> {
        match self.require(section, key)? {
            Value::List(items) => Ok(items),
            other => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("list, got {}", other.type_name()),
            }),
        }
    }

    pub fn number_list_or(
        &self,
        section: &str,
        key: &str,
        default: &[f64],
    ) -> Result<Vec<f64>, ConfigError> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(Value::List(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Number(n) => Ok(*n),
                    other => Err(ConfigError::WrongType {
                        key: key.into(),
                        expected: format!("list of numbers, got {}", other.type_name()),
                    }),
                })
                .collect(),
            Some(other) => Err(ConfigError::WrongType {
                key: key.into(),
                expected: format!("list, got {}", other.type_name()),
            }),
        }
    }

    /// Points of dimension d: numbers (d = 1) or d-tuples.
    pub fn point_list_or(
        &self,
        section: &str,
        key: &str,
        d: usize,
        default: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, ConfigError> {
        let items = match self.get(section, key) {
            None => return Ok(default.to_vec()),
            Some(Value::List(items)) => items,
            Some(other) => {
                return Err(ConfigError::WrongType {
                    key: key.into(),
                    expected: format!("list, got {}", other.type_name()),
                })
            }
        };
        items
            .iter()
            .map(|v| match v {
                Value::Number(n) if d == 1 => Ok(vec![*n]),
                Value::Tuple(parts) if parts.len() == d => Ok(parts
                    .iter()
                    .map(|p| match p {
                        Value::Number(n) => *n,
                        _ => unreachable!("tuples hold numbers"),
                    })
                    .collect()),
                _ => Err(ConfigError::Dimension(format!(
                    "`{key}` entries must be points of dimension {d}"
                ))),
            })
            .collect()
    }
}

// --------------------------------------------------------------------------
// domain object construction
// --------------------------------------------------------------------------

fn expr_error(key: &str, e: ExprError) -> ConfigError {
    ConfigError::BadExpression {
        key: key.to_string(),
        source: e,
    }
}

fn eval_err(e: crate::expr::EvalError) -> CoeffError {
    CoeffError::new(e.to_string())
}

fn ts_fn(expr: Expr, d: usize) -> TimeStateFn {
    Arc::new(move |t: f64, x: &[f64]| {
        let mut env = [0.0f64; 3];
        env[0] = t;
        env[1..1 + d].copy_from_slice(&x[..d]);
        expr.eval(&env[..1 + d]).map_err(eval_err)
    })
}

fn tse_fn(expr: Expr, d: usize) -> TimeStateMarkFn {
    Arc::new(move |t: f64, x: &[f64], e: &[f64]| {
        let mut env = [0.0f64; 5];
        env[0] = t;
        env[1..1 + d].copy_from_slice(&x[..d]);
        env[1 + d..1 + 2 * d].copy_from_slice(&e[..d]);
        expr.eval(&env[..1 + 2 * d]).map_err(eval_err)
    })
}

fn state_fn(expr: Expr, d: usize) -> StateFn {
    Arc::new(move |x: &[f64]| expr.eval(&x[..d]).map_err(eval_err))
}

fn driver_fn(expr: Expr, d: usize) -> LocalDriverFn {
    Arc::new(move |t: f64, x: &[f64], y: f64, z: &[f64]| {
        let mut env = [0.0f64; 6];
        env[0] = t;
        env[1..1 + d].copy_from_slice(&x[..d]);
        env[1 + d] = y;
        env[2 + d..2 + 2 * d].copy_from_slice(&z[..d]);
        expr.eval(&env[..2 + 2 * d]).map_err(eval_err)
    })
}

fn ts_vars(d: usize) -> Vec<&'static str> {
    if d == 1 {
        vec!["t", "x1"]
    } else {
        vec!["t", "x1", "x2"]
    }
}

fn tse_vars(d: usize) -> Vec<&'static str> {
    if d == 1 {
        vec!["t", "x1", "e1"]
    } else {
        vec!["t", "x1", "x2", "e1", "e2"]
    }
}

fn state_vars(d: usize) -> Vec<&'static str> {
    if d == 1 {
        vec!["x1"]
    } else {
        vec!["x1", "x2"]
    }
}

fn driver_vars(d: usize) -> Vec<&'static str> {
    if d == 1 {
        vec!["t", "x1", "y", "z1"]
    } else {
        vec!["t", "x1", "x2", "y", "z1", "z2"]
    }
}

/// Per-dimension coefficient keys: the bare name in 1D, numbered components
/// in 2D. Using the wrong family for the declared dimension is an error.
fn component_keys(
    doc: &ConfigDoc,
    d: usize,
    bare: &'static str,
    numbered: &'static [&'static str],
) -> Result<Vec<String>, ConfigError> {
    if d == 1 {
        if doc.get("model", bare).is_none() {
            if numbered.iter().any(|k| doc.get("model", k).is_some()) {
                return Err(ConfigError::Dimension(format!(
                    "model declares dimension 1 but uses component keys for `{bare}`"
                )));
            }
            return Err(ConfigError::MissingKey {
                section: "model".into(),
                key: bare.into(),
            });
        }
        Ok(vec![bare.to_string()])
    } else {
        if doc.get("model", bare).is_some() {
            return Err(ConfigError::Dimension(format!(
                "model declares dimension 2: use {} instead of `{bare}`",
                numbered.join(", ")
            )));
        }
        for k in numbered {
            if doc.get("model", k).is_none() {
                return Err(ConfigError::MissingKey {
                    section: "model".into(),
                    key: (*k).into(),
                });
            }
        }
        Ok(numbered.iter().map(|k| k.to_string()).collect())
    }
}

/// Validation-command options drawn from [model].
#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub samples: usize,
    pub radius: f64,
    pub loop_depth: usize,
    pub loop_t: f64,
    pub loop_starts: Vec<Vec<f64>>,
}

/// Picard options drawn from [picard].
#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub kmax: usize,
    pub k_nl: f64,
}

/// Monte Carlo options drawn from [mc].
#[derive(Debug, Clone)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub seed: u64,
    pub probe_t: f64,
    pub probe_x: Vec<f64>,
    pub dual_ns: Vec<f64>,
    pub hit_eps: f64,
    pub stop_rule: String,
    pub allowance: f64,
    pub moment_p: f64,
    pub moment_starts: Vec<Vec<f64>>,
    pub c_a_sigma: Option<f64>,
    pub oracle_rate: f64,
    pub oracle_vol: f64,
    pub oracle_strike: f64,
    pub oracle_steps: usize,
    pub oracle_tol: f64,
}

/// Solver options drawn from [solver]; `damping = 0` requests the automatic
/// stiffness-scaled value.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub theta: f64,
    pub inner_tol: f64,
    pub inner_max: usize,
    pub damping: f64,
    pub penalty_n: f64,
}

impl SolverOptions {
    pub fn to_config(&self, n: f64, grid: &Grid, spec: &ProblemSpec) -> SolveConfig {
        let auto = SolveConfig::auto(n, grid, spec);
        SolveConfig {
            theta: self.theta,
            inner_tol: self.inner_tol,
            inner_max: self.inner_max,
            damping: if self.damping > 0.0 {
                self.damping
            } else {
                auto.damping
            },
            penalty_n: n,
        }
    }
}

/// Everything a command needs, built from one document.
pub struct ParsedConfig {
    // fields below hold closures, so Debug is implemented by hand

    pub spec: ProblemSpec,
    pub f_tilde: LocalDriverFn,
    pub grid: Option<Grid>,
    pub solver: SolverOptions,
    pub picard: Option<PicardOptions>,
    pub mc: Option<McOptions>,
    pub validate: ValidateOptions,
}

impl std::fmt::Debug for ParsedConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParsedConfig")
            .field("spec", &self.spec)
            .field("grid", &self.grid)
            .finish()
    }
}

/// Parses the document and constructs all domain objects present in it.
pub fn parse_config(text: &str) -> Result<ParsedConfig, ConfigError> {
    let doc = ConfigDoc::parse(text)?;
    if !doc.has_section("model") {
        return Err(ConfigError::MissingSection("model".into()));
    }

    let dim = doc.number("model", "dimension")? as usize;
    if dim != 1 && dim != 2 {
        return Err(ConfigError::Dimension(
            "dimension must be 1 or 2".to_string(),
        ));
    }
    let horizon = doc.number("model", "horizon")?;

    // coefficients
    let drift_keys = component_keys(&doc, dim, "drift", &["drift1", "drift2"])?;
    let sigma_keys: Vec<String> = if dim == 1 {
        component_keys(&doc, 1, "sigma", &["sigma11"])?
    } else {
        component_keys(&doc, 2, "sigma", &["sigma11", "sigma12", "sigma21", "sigma22"])?
    };
    let jump_keys = component_keys(&doc, dim, "jump", &["jump1", "jump2"])?;

    let tsv = ts_vars(dim);
    let tsev = tse_vars(dim);
    let sv = state_vars(dim);
    let dv = driver_vars(dim);

    let mut drift: Vec<TimeStateFn> = Vec::new();
    for k in &drift_keys {
        let e = parse_expr(doc.text("model", k)?, &tsv).map_err(|e| expr_error(k, e))?;
        drift.push(ts_fn(e, dim));
    }
    let mut sigma: Vec<TimeStateFn> = Vec::new();
    for k in &sigma_keys {
        let e = parse_expr(doc.text("model", k)?, &tsv).map_err(|e| expr_error(k, e))?;
        sigma.push(ts_fn(e, dim));
    }
    let mut jump: Vec<TimeStateMarkFn> = Vec::new();
    for k in &jump_keys {
        let e = parse_expr(doc.text("model", k)?, &tsev).map_err(|e| expr_error(k, e))?;
        jump.push(tse_fn(e, dim));
    }
    let cost = tse_fn(
        parse_expr(doc.text("model", "cost")?, &tsev).map_err(|e| expr_error("cost", e))?,
        dim,
    );
    let obstacle = ts_fn(
        parse_expr(doc.text("model", "obstacle")?, &tsv)
            .map_err(|e| expr_error("obstacle", e))?,
        dim,
    );
    let terminal = state_fn(
        parse_expr(doc.text("model", "terminal")?, &sv)
            .map_err(|e| expr_error("terminal", e))?,
        dim,
    );
    let f_tilde = driver_fn(
        parse_expr(doc.text("model", "driver")?, &dv).map_err(|e| expr_error("driver", e))?,
        dim,
    );

    // marks = [(e..., weight), ...]
    let mark_items = doc.list("model", "marks")?;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for item in mark_items {
        match item {
            Value::Tuple(parts) if parts.len() == dim + 1 => {
                let nums: Vec<f64> = parts
                    .iter()
                    .map(|p| match p {
                        Value::Number(n) => *n,
                        _ => unreachable!(),
                    })
                    .collect();
                nodes.push(nums[..dim].to_vec());
                weights.push(nums[dim]);
            }
            _ => {
                return Err(ConfigError::Dimension(format!(
                    "each mark must be a tuple of {} numbers (components then weight)",
                    dim + 1
                )))
            }
        }
    }
    let marks = MarkSpace::new(nodes, weights)?;

    let spec = ProblemSpec {
        horizon,
        dim,
        coefficients: CoefficientSet {
            drift,
            sigma,
            jump,
            cost,
            obstacle,
            terminal,
        },
        marks,
        k_gamma: doc.number("model", "k_gamma")?,
        growth_rho: doc.number_or("model", "growth_rho", 2.0)?,
        lip_f: doc.number_or("model", "lipschitz_f", 1.0)?,
        lip_gamma: doc.number_or("model", "lipschitz_gamma", 1.0)?,
        lip_a_sigma: doc.number_or("model", "lipschitz_a_sigma", 1.0)?,
        loop_delta1: doc.number("model", "loop_delta1")?,
        loop_delta2: doc.number("model", "loop_delta2")?,
    };
    spec.validate_construction()?;

    let grid = if doc.has_section("grid") {
        Some(Grid::new(
            doc.number("grid", "box_radius")?,
            doc.number("grid", "nodes_per_axis")? as usize,
            doc.number("grid", "time_steps")? as usize,
            dim,
            horizon,
        )?)
    } else {
        None
    };

    let solver = SolverOptions {
        theta: doc.number_or("solver", "theta", 1.0)?,
        inner_tol: doc.number_or("solver", "inner_tol", 1e-10)?,
        inner_max: doc.number_or("solver", "inner_max", 2000.0)? as usize,
        damping: doc.number_or("solver", "damping", 0.0)?,
        penalty_n: doc.number_or("solver", "penalty_n", 0.0)?,
    };

    let picard = if doc.has_section("picard") {
        Some(PicardOptions {
            tol: doc.number_or("picard", "tol", 1e-6)?,
            kmax: doc.number_or("picard", "kmax", 30.0)? as usize,
            k_nl: doc.number_or("picard", "k_nl", 0.0)?,
        })
    } else {
        None
    };

    let default_radius = grid
        .as_ref()
        .map(|g| g.box_radius)
        .unwrap_or(2.0 * spec.k_gamma);
    let validate = ValidateOptions {
        samples: doc.number_or("model", "validate_samples", 400.0)? as usize,
        radius: doc.number_or("model", "validate_radius", default_radius)?,
        loop_depth: doc.number_or("model", "loop_depth", 4.0)? as usize,
        loop_t: doc.number_or("model", "loop_t", 0.0)?,
        loop_starts: doc.point_list_or(
            "model",
            "loop_starts",
            dim,
            &default_loop_starts(dim, default_radius),
        )?,
    };

    let mc = if doc.has_section("mc") {
        Some(McOptions {
            n_paths: doc.number_or("mc", "n_paths", 1000.0)? as usize,
            dt_sim: doc.number_or("mc", "dt_sim", horizon / 200.0)?,
            seed: doc.number_or("mc", "seed", 42.0)? as u64,
            probe_t: doc.number_or("mc", "probe_t", 0.0)?,
            probe_x: {
                let v = doc.point_list_or("mc", "probe_x", dim, &[vec![0.0; dim]])?;
                v.into_iter().next().unwrap()
            },
            dual_ns: doc.number_list_or("mc", "dual_ns", &[1.0, 4.0, 16.0, 64.0, 256.0])?,
            hit_eps: doc.number_or("mc", "hit_eps", 0.02)?,
            stop_rule: doc.text_or("mc", "stop_rule", "hit_h")?.to_string(),
            allowance: doc.number_or("mc", "allowance", 0.02)?,
            moment_p: doc.number_or("mc", "moment_p", 4.0)?,
            moment_starts: doc.point_list_or(
                "mc",
                "moment_starts",
                dim,
                &[vec![0.5; dim], vec![1.0; dim], vec![2.0; dim]],
            )?,
            c_a_sigma: match doc.get("mc", "c_a_sigma") {
                Some(Value::Number(v)) => Some(*v),
                Some(other) => {
                    return Err(ConfigError::WrongType {
                        key: "c_a_sigma".into(),
                        expected: format!("number, got {}", other.type_name()),
                    })
                }
                None => None,
            },
            oracle_rate: doc.number_or("mc", "oracle_rate", 0.05)?,
            oracle_vol: doc.number_or("mc", "oracle_vol", 0.2)?,
            oracle_strike: doc.number_or("mc", "oracle_strike", 1.0)?,
            oracle_steps: doc.number_or("mc", "oracle_steps", 2000.0)? as usize,
            oracle_tol: doc.number_or("mc", "oracle_tol", 5e-3)?,
        })
    } else {
        None
    };

    Ok(ParsedConfig {
        spec,
        f_tilde,
        grid,
        solver,
        picard,
        mc,
        validate,
    })
}

fn default_loop_starts(dim: usize, radius: f64) -> Vec<Vec<f64>> {
    let r = radius * 0.5;
    if dim == 1 {
        vec![vec![-r], vec![-r / 3.0], vec![0.0], vec![r / 3.0], vec![r]]
    } else {
        vec![
            vec![-r, -r],
            vec![0.0, 0.0],
            vec![r, r],
            vec![r, -r],
            vec![-r, r],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
# minimal 1D zero model
[model]
dimension = 1
horizon = 1.0
k_gamma = 1.0
loop_delta1 = 0.1
loop_delta2 = 0.1
drift = "0"
sigma = "0"
jump = "0"
cost = "1"
obstacle = "0 - 1000000"
terminal = "0"
driver = "0"
marks = [(0, 1.0)]
"#;

    #[test]
    fn minimal_model_parses_and_validates() {
        let parsed = parse_config(MINIMAL).unwrap();
        assert_eq!(parsed.spec.dim, 1);
        assert!(parsed.grid.is_none());
        let cloud = crate::model::sample_cloud(&parsed.spec, 2.0, 64, 1);
        let report = crate::model::validate_static(&parsed.spec, &cloud);
        assert!(report.passed(), "{}", report.to_key_values());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace("sigma = \"0\"", "sigma2 = \"0\"");
        match parse_config(&text) {
            Err(ConfigError::UnknownKey { key, .. }) => assert_eq!(key, "sigma2"),
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_reported() {
        let text = MINIMAL.replace("cost = \"1\"", "");
        match parse_config(&text) {
            Err(ConfigError::MissingKey { key, .. }) => assert_eq!(key, "cost"),
            other => panic!("expected MissingKey, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = format!("{MINIMAL}\n[grid]\nbox_radius = 2\nbox_radius = 3\nnodes_per_axis = 11\ntime_steps = 4\n");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_in_expression() {
        // x2 in a 1D model is an unknown identifier at parse time
        let text = MINIMAL.replace("drift = \"0\"", "drift = \"x2\"");
        match parse_config(&text) {
            Err(ConfigError::BadExpression { key, .. }) => assert_eq!(key, "drift"),
            other => panic!("expected BadExpression, got {other:?}"),
        }
    }

    #[test]
    fn two_dimensional_requires_component_keys() {
        let text = MINIMAL
            .replace("dimension = 1", "dimension = 2")
            .replace("marks = [(0, 1.0)]", "marks = [(0, 0, 1.0)]");
        assert!(matches!(
            parse_config(&text),
            Err(ConfigError::Dimension(_))
        ));
    }

    #[test]
    fn order_insensitive_within_section() {
        let a = parse_config(MINIMAL).unwrap();
        // reorder: move horizon after marks
        let reordered = MINIMAL
            .replace("horizon = 1.0\n", "")
            .replace("marks = [(0, 1.0)]", "marks = [(0, 1.0)]\nhorizon = 1.0");
        let b = parse_config(&reordered).unwrap();
        assert_eq!(a.spec.horizon, b.spec.horizon);
        assert_eq!(a.spec.marks.total(), b.spec.marks.total());
    }

    #[test]
    fn comments_and_quotes() {
        let text = MINIMAL.replace(
            "terminal = \"0\"",
            "terminal = \"max(1 - x1, 0)\"  # put payoff",
        );
        let parsed = parse_config(&text).unwrap();
        let v = parsed.spec.coefficients.terminal_at(&[0.4]).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
    }

    #[test]
    fn grid_and_mc_sections() {
        let text = format!(
            "{MINIMAL}\n[grid]\nbox_radius = 2.0\nnodes_per_axis = 11\ntime_steps = 4\n\n[mc]\nn_paths = 10\ndt_sim = 0.1\nseed = 7\nprobe_x = [0.5]\n"
        );
        let parsed = parse_config(&text).unwrap();
        let grid = parsed.grid.unwrap();
        assert_eq!(grid.nodes_per_axis, 11);
        let mc = parsed.mc.unwrap();
        assert_eq!(mc.seed, 7);
        assert_eq!(mc.probe_x, vec![0.5]);
    }

    #[test]
    fn marks_with_two_components() {
        let text = MINIMAL
            .replace("dimension = 1", "dimension = 2")
            .replace("drift = \"0\"", "drift1 = \"0\"\ndrift2 = \"0\"")
            .replace(
                "sigma = \"0\"",
                "sigma11 = \"0\"\nsigma12 = \"0\"\nsigma21 = \"0\"\nsigma22 = \"0\"",
            )
            .replace("jump = \"0\"", "jump1 = \"0\"\njump2 = \"0\"")
            .replace("marks = [(0, 1.0)]", "marks = [(0.5, -0.5, 1.0), (0, 0, 2.0)]");
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed.spec.marks.len(), 2);
        assert_eq!(parsed.spec.marks.node(0), &[0.5, -0.5]);
        assert_eq!(parsed.spec.marks.total(), 3.0);
    }
}
