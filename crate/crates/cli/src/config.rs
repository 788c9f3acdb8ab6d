//! Run configuration: problem, settings, command, seed and output location.

use std::path::PathBuf;
use std::sync::Arc;

use heatlab_core::geometry::{ChartBox, LaplaceProblem, MatrixField, MetricField, Settings};
use heatlab_core::presets::{self, PresetParams};
use heatlab_core::verification::Suite;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::expr::{self, Expr, ExprError};

/// One matrix entry: a real expression or a `[re, im]` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EntrySpec {
    Real(String),
    Complex([String; 2]),
}

/// A scalar entry (times the identity) or a full `m x m` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Scalar(EntrySpec),
    Matrix(Vec<Vec<EntrySpec>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Fields given as expressions in `x1 .. xd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionProblem {
    pub dim: usize,
    #[serde(default = "one")]
    pub fiber_dim: usize,
    /// `d x d` inverse metric; identity when absent.
    #[serde(default)]
    pub metric_inv: Option<Vec<Vec<String>>>,
    /// One field per coordinate; zero when absent.
    #[serde(default)]
    pub connection: Option<Vec<FieldSpec>>,
    #[serde(default)]
    pub potential: Option<FieldSpec>,
    pub domain: DomainSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    pub name: String,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "PresetSpec::default_c")]
    pub c: f64,
    #[serde(default = "PresetSpec::default_c2")]
    pub c2: f64,
    #[serde(default = "PresetSpec::default_omega")]
    pub omega: f64,
    #[serde(default = "PresetSpec::default_xi")]
    pub xi: Vec<f64>,
    #[serde(default = "PresetSpec::default_width")]
    pub width: f64,
    #[serde(default = "PresetSpec::default_center")]
    pub center: f64,
}

impl PresetSpec {
    fn default_c() -> f64 {
        PresetParams::default().c
    }
    fn default_c2() -> f64 {
        PresetParams::default().c2
    }
    fn default_omega() -> f64 {
        PresetParams::default().omega
    }
    fn default_xi() -> Vec<f64> {
        PresetParams::default().xi
    }
    fn default_width() -> f64 {
        PresetParams::default().width
    }
    fn default_center() -> f64 {
        PresetParams::default().center
    }

    pub fn named(name: &str) -> Self {
        let d = PresetParams::default();
        PresetSpec {
            name: name.into(),
            dim: d.dim,
            c: d.c,
            c2: d.c2,
            omega: d.omega,
            xi: d.xi,
            width: d.width,
            center: d.center,
        }
    }

    fn params(&self) -> PresetParams {
        PresetParams {
            dim: self.dim,
            c: self.c,
            c2: self.c2,
            omega: self.omega,
            xi: self.xi.clone(),
            width: self.width,
            center: self.center,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSpec {
    Preset(PresetSpec),
    Expression(ExpressionProblem),
}

impl ProblemSpec {
    pub fn build(&self, settings: &Settings) -> Result<LaplaceProblem, CliError> {
        let problem = match self {
            ProblemSpec::Preset(p) => presets::by_name(&p.name, &p.params()).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown preset '{}' or invalid parameters; known presets: {}",
                    p.name,
                    presets::NAMES.join(", ")
                ))
            })?,
            ProblemSpec::Expression(e) => e.build()?,
        };
        Ok(problem.with_settings(settings.clone()))
    }
}

type Entry = (Expr, Option<Expr>);

fn parse_entry(spec: &EntrySpec, dim: usize) -> Result<Entry, ExprError> {
    match spec {
        EntrySpec::Real(s) => Ok((expr::parse(s, dim)?, None)),
        EntrySpec::Complex([re, im]) => Ok((expr::parse(re, dim)?, Some(expr::parse(im, dim)?))),
    }
}

fn eval_entry(e: &Entry, x: &[f64]) -> Complex64 {
    Complex64::new(e.0.eval(x), e.1.as_ref().map_or(0.0, |im| im.eval(x)))
}

/// Expression matrix as a core field; constant matrices are folded once.
pub fn matrix_field(name: &str, spec: &FieldSpec, dim: usize, m: usize) -> Result<MatrixField, ExprError> {
    let entries: Vec<Vec<Entry>> = match spec {
        FieldSpec::Scalar(s) => {
            let e = parse_entry(s, dim)?;
            let zero = (Expr::Num(0.0), None);
            (0..m).map(|i| (0..m).map(|j| if i == j { e.clone() } else { zero.clone() }).collect()).collect()
        }
        FieldSpec::Matrix(rows) => {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(ExprError::Arity { field: name.into(), rows: m, cols: m, found_rows: rows.len(), found_cols: cols });
            }
            rows.iter().map(|r| r.iter().map(|s| parse_entry(s, dim)).collect()).collect::<Result<_, _>>()?
        }
    };
    let constant = entries.iter().flatten().all(|(re, im)| re.is_constant() && im.as_ref().is_none_or(Expr::is_constant));
    let eval = move |x: &[f64]| DMatrix::from_fn(m, m, |i, j| eval_entry(&entries[i][j], x));
    if constant {
        let value = eval(&vec![0.0; dim]);
        if value.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
            return Ok(MatrixField::Zero { m });
        }
        return Ok(MatrixField::Constant(value));
    }
    Ok(MatrixField::varying(m, eval))
}

impl ExpressionProblem {
    pub fn build(&self) -> Result<LaplaceProblem, CliError> {
        let (d, m) = (self.dim, self.fiber_dim);
        if d == 0 || m == 0 {
            return Err(CliError::Config("dim and fiber_dim must be positive".into()));
        }
        let metric = match &self.metric_inv {
            None => MetricField::euclidean(d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    let cols = rows.first().map_or(0, Vec::len);
                    return Err(ExprError::Arity { field: "metric_inv".into(), rows: d, cols: d, found_rows: rows.len(), found_cols: cols }.into());
                }
                let parsed: Vec<Vec<Expr>> =
                    rows.iter().map(|r| r.iter().map(|s| expr::parse(s, d)).collect()).collect::<Result<_, _>>()?;
                if parsed.iter().flatten().all(Expr::is_constant) {
                    MetricField::Constant(DMatrix::from_fn(d, d, |i, j| parsed[i][j].eval(&[])))
                } else {
                    let parsed = Arc::new(parsed);
                    MetricField::varying(d, move |x| DMatrix::from_fn(d, d, |i, j| parsed[i][j].eval(x)))
                }
            }
        };
        let connection = match &self.connection {
            None => (0..d).map(|_| MatrixField::Zero { m }).collect(),
            Some(fields) => {
                if fields.len() != d {
                    return Err(ExprError::Arity { field: "connection".into(), rows: d, cols: 1, found_rows: fields.len(), found_cols: 1 }.into());
                }
                fields
                    .iter()
                    .enumerate()
                    .map(|(mu, f)| matrix_field(&format!("connection[{mu}]"), f, d, m))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        let potential = match &self.potential {
            None => MatrixField::Zero { m },
            Some(f) => matrix_field("potential", f, d, m)?,
        };
        let domain = ChartBox::new(self.domain.lower.clone(), self.domain.upper.clone())?;
        Ok(LaplaceProblem::new("expression", metric, connection, potential, domain)?)
    }
}

/// Subcommand and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    Geodesic {
        x: Vec<f64>,
        y: Vec<f64>,
    },
    Synge {
        x: Vec<f64>,
        y: Vec<f64>,
    },
    Sdw {
        x: Vec<f64>,
        y: Vec<f64>,
        k: usize,
    },
    Psi {
        x: Vec<f64>,
        y: Vec<f64>,
        k_min: i32,
        k_max: i32,
        n: usize,
    },
    KernelMc {
        x: Vec<f64>,
        y: Vec<f64>,
        tau: f64,
        paths: usize,
        steps: usize,
        #[serde(default = "yes")]
        extrapolate: bool,
    },
    Scaling {
        x: Vec<f64>,
        taus: Vec<f64>,
        paths: usize,
        steps: usize,
        order: usize,
    },
    Verify {
        suite: Suite,
    },
}

fn yes() -> bool {
    true
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Geodesic { .. } => "geodesic",
            Command::Synge { .. } => "synge",
            Command::Sdw { .. } => "sdw",
            Command::Psi { .. } => "psi",
            Command::KernelMc { .. } => "kernel-mc",
            Command::Scaling { .. } => "scaling",
            Command::Verify { .. } => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Absent only for `verify`, which uses its own presets.
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub settings: Settings,
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid run configuration: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            problem: Some(ProblemSpec::Expression(ExpressionProblem {
                dim: 2,
                fiber_dim: 2,
                metric_inv: Some(vec![vec!["1".into(), "0".into()], vec!["0".into(), "1 / x1^2".into()]]),
                connection: Some(vec![
                    FieldSpec::Matrix(vec![
                        vec![EntrySpec::Real("0".into()), EntrySpec::Complex(["0".into(), "x2".into()])],
                        vec![EntrySpec::Complex(["0".into(), "x2".into()]), EntrySpec::Real("0".into())],
                    ]),
                    FieldSpec::Scalar(EntrySpec::Complex(["0".into(), "0.5".into()])),
                ]),
                potential: Some(FieldSpec::Scalar(EntrySpec::Real("-x1^2".into()))),
                domain: DomainSpec { lower: vec![0.5, -1.0], upper: vec![3.0, 1.0] },
            })),
            settings: Settings { k_max: 2, ..Settings::default() },
            command: Command::KernelMc { x: vec![1.0, 0.0], y: vec![1.5, 0.2], tau: 0.3, paths: 100, steps: 8, extrapolate: false },
            seed: 11,
            output: PathBuf::from("out"),
        }
    }

    #[test]
    fn run_config_round_trips() {
        let c = sample();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let verify = RunConfig {
            problem: None,
            settings: Settings::default(),
            command: Command::Verify { suite: Suite::Fast },
            seed: 0,
            output: "o".into(),
        };
        assert_eq!(RunConfig::from_json(&verify.to_json()).unwrap(), verify);
    }

    #[test]
    fn expression_problem_builds_fields() {
        let c = sample();
        let p = c.problem.unwrap().build(&c.settings).unwrap();
        assert_eq!(p.fiber_dim, 2);
        assert!(!p.metric_inv.is_constant());
        let b = p.connection[0].eval(&[1.0, 0.3]);
        assert_eq!(b[(0, 1)], Complex64::new(0.0, 0.3));
        assert!(p.connection[1].is_constant());
        assert_eq!(p.potential.eval(&[0.7, 0.0])[(1, 1)].re, -0.7 * 0.7);
        assert_eq!(p.settings.k_max, 2);
    }

    #[test]
    fn wrong_shapes_are_arity_errors() {
        let mut c = sample();
        if let Some(ProblemSpec::Expression(e)) = &mut c.problem {
            e.potential = Some(FieldSpec::Matrix(vec![vec![EntrySpec::Real("1".into())]]));
        }
        match c.problem.unwrap().build(&c.settings) {
            Err(CliError::Expr(ExprError::Arity { found_rows: 1, rows: 2, .. })) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_expression_is_a_parse_error() {
        let text = r#"{"problem": {"expression": {"dim": 1, "potential": "x1 +* 2",
            "domain": {"lower": [-1], "upper": [1]}}},
            "command": {"name": "synge", "x": [0.1], "y": [0.2]}, "output": "o"}"#;
        let c = RunConfig::from_json(text).unwrap();
        match c.problem.unwrap().build(&c.settings) {
            Err(CliError::Expr(ExprError::Parse { position: 4, .. })) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_fields_fold() {
        let f = matrix_field("v", &FieldSpec::Scalar(EntrySpec::Real("2 * 0".into())), 1, 3).unwrap();
        assert!(f.is_zero());
        let f = matrix_field("v", &FieldSpec::Scalar(EntrySpec::Real("exp(0)".into())), 1, 2).unwrap();
        assert_eq!(f.eval(&[9.0]), heatlab_core::linalg::identity(2));
    }
}
