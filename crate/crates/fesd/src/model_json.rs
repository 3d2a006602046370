//! JSON representation of models and OCP specifications.
//!
//! Expressions are stored as infix strings. States are `x0, x1, ...`,
//! controls `u0, ...` and, for step-composite models, step values `a0, ...`
//! (one per switching function).

use fesd_core::expr::Expr;
use fesd_core::model::{NonsmoothModel, SignMatrix, VectorField};
use fesd_core::ocp::{OcpSpec, Tracking};
use fesd_core::parser::{indexed, parse};
use fesd_core::simulate::Variant;
use fesd_core::tableau::{tableau, Family};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldJson {
    Regions { sign_matrix: Vec<Vec<i8>>, regions: Vec<Vec<usize>>, fields: Vec<Vec<String>> },
    StepComposite { rhs: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub name: String,
    pub n_x: usize,
    #[serde(default)]
    pub n_u: usize,
    #[serde(default)]
    pub state_names: Vec<String>,
    pub switching: Vec<String>,
    pub field: FieldJson,
    /// Default initial state and horizon for `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

fn names(n_x: usize, n_u: usize) -> impl Fn(usize) -> String {
    move |i| {
        if i < n_x {
            format!("x{}", i)
        } else if i < n_x + n_u {
            format!("u{}", i - n_x)
        } else {
            format!("a{}", i - n_x - n_u)
        }
    }
}

fn show(e: &Expr, n_x: usize, n_u: usize) -> String {
    let f = names(n_x, n_u);
    e.display_with(&f).to_string()
}

fn read(src: &str, n_x: usize, n_u: usize, n_a: usize) -> Result<Expr, CliError> {
    let resolve = move |name: &str| {
        indexed(name, 'x', n_x)
            .or_else(|| indexed(name, 'u', n_u).map(|i| i + n_x))
            .or_else(|| indexed(name, 'a', n_a).map(|i| i + n_x + n_u))
            .map(Expr::var)
    };
    parse(src, &resolve).map_err(|e| CliError::Config(format!("expression '{}': {}", src, e)))
}

impl ModelJson {
    pub fn from_model(m: &NonsmoothModel) -> Self {
        let s = |e: &Expr| show(e, m.n_x, m.n_u);
        let field = match &m.field {
            VectorField::Regions { sign_matrix, regions, fields } => FieldJson::Regions {
                sign_matrix: sign_matrix.rows().to_vec(),
                regions: regions.clone(),
                fields: fields.iter().map(|f| f.iter().map(s).collect()).collect(),
            },
            VectorField::StepComposite { rhs } => FieldJson::StepComposite { rhs: rhs.iter().map(s).collect() },
        };
        ModelJson {
            name: m.name.clone(),
            n_x: m.n_x,
            n_u: m.n_u,
            state_names: m.state_names.clone(),
            switching: m.switching.iter().map(s).collect(),
            field,
            x0: None,
            horizon: None,
        }
    }

    pub fn to_model(&self) -> Result<NonsmoothModel, CliError> {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let switching =
            self.switching.iter().map(|s| read(s, n_x, n_u, 0)).collect::<Result<Vec<_>, _>>()?;
        let field = match &self.field {
            FieldJson::Regions { sign_matrix, regions, fields } => VectorField::Regions {
                sign_matrix: SignMatrix::new(sign_matrix.clone(), switching.len()),
                regions: regions.clone(),
                fields: fields
                    .iter()
                    .map(|f| f.iter().map(|s| read(s, n_x, n_u, 0)).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()?,
            },
            FieldJson::StepComposite { rhs } => VectorField::StepComposite {
                rhs: rhs.iter().map(|s| read(s, n_x, n_u, switching.len())).collect::<Result<Vec<_>, _>>()?,
            },
        };
        let state_names =
            if self.state_names.is_empty() { (0..n_x).map(|i| format!("x{}", i)).collect() } else { self.state_names.clone() };
        Ok(NonsmoothModel { name: self.name.clone(), n_x, n_u, switching, field, state_names })
    }
}

pub fn model_to_json(m: &NonsmoothModel) -> String {
    serde_json::to_string_pretty(&ModelJson::from_model(m)).expect("model JSON is always serialisable")
}

pub fn model_from_json(text: &str) -> Result<(NonsmoothModel, ModelJson), CliError> {
    let j: ModelJson = serde_json::from_str(text).map_err(|e| CliError::Config(format!("model JSON: {}", e)))?;
    Ok((j.to_model()?, j))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingJson {
    pub reference: Vec<f64>,
    pub weights: Vec<f64>,
}

/// OCP file. `model` is either a catalog id string or an inline model object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpJson {
    pub model: serde_json::Value,
    #[serde(default)]
    pub variant: Option<String>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub n_ctrl: usize,
    #[serde(default = "default_nfe")]
    pub n_fe: usize,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default)]
    pub running_cost: Option<String>,
    #[serde(default)]
    pub terminal_cost: Option<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub terminal_eq: Vec<String>,
    #[serde(default)]
    pub terminal_ineq: Vec<String>,
    #[serde(default)]
    pub tracking: Option<TrackingJson>,
}

fn default_nfe() -> usize {
    2
}
fn default_scheme() -> String {
    "radau-iia".into()
}
fn default_stages() -> usize {
    1
}

pub fn ocp_from_json(text: &str) -> Result<OcpSpec, CliError> {
    let j: OcpJson = serde_json::from_str(text).map_err(|e| CliError::Config(format!("OCP JSON: {}", e)))?;
    let model = match &j.model {
        serde_json::Value::String(id) => {
            fesd_core::catalog::load_catalog(id).map_err(|e| CliError::Config(e.to_string()))?.model
        }
        v => {
            let m: ModelJson =
                serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("OCP model: {}", e)))?;
            m.to_model()?
        }
    };
    let (n_x, n_u) = (model.n_x, model.n_u);
    let opt = |s: &Option<String>, n_u: usize| -> Result<Expr, CliError> {
        s.as_deref().map_or(Ok(Expr::zero()), |s| read(s, n_x, n_u, 0))
    };
    let family = Family::parse(&j.scheme).ok_or_else(|| CliError::Config(format!("unknown scheme '{}'", j.scheme)))?;
    let spec = OcpSpec {
        variant: parse_variant(j.variant.as_deref().unwrap_or("step"))?,
        x0: j.x0,
        horizon: j.horizon,
        n_ctrl: j.n_ctrl,
        n_fe: j.n_fe,
        tableau: tableau(family, j.stages).map_err(|e| CliError::Config(e.to_string()))?,
        running_cost: opt(&j.running_cost, n_u)?,
        terminal_cost: opt(&j.terminal_cost, 0)?,
        lower: j.lower,
        upper: j.upper,
        terminal_eq: j.terminal_eq.iter().map(|s| read(s, n_x, 0, 0)).collect::<Result<_, _>>()?,
        terminal_ineq: j.terminal_ineq.iter().map(|s| read(s, n_x, 0, 0)).collect::<Result<_, _>>()?,
        tracking: j.tracking.map(|t| Tracking { reference: t.reference, weights: t.weights }),
        model,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

pub fn parse_variant(s: &str) -> Result<Variant, CliError> {
    match s {
        "step" => Ok(Variant::Step(None)),
        "stewart" => Ok(Variant::Stewart),
        _ => match s.strip_prefix("step-lifted-").and_then(|d| d.parse().ok()) {
            Some(d) => Ok(Variant::Step(Some(d))),
            None => Err(CliError::Config(format!("unknown variant '{}' (step, stewart, step-lifted-<depth>)", s))),
        },
    }
}
