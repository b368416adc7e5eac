//! Fit configuration files (TOML).
//!
//! ```toml
//! response = "conc"
//! group = "subject"
//! argument = "time"
//! model = "biexp"
//! variance = "diagonal"
//! taus = [0.1, 0.5, 0.9]
//!
//! [[phi]]
//! fixed = ["1"]
//! random = true
//! start = [3.0]
//! ```
//!
//! One `[[phi]]` table per curve parameter, in the model's order. Each entry
//! of `fixed` is a term with its own coefficient: `"1"` for an intercept, a
//! numeric column name, `"column=level"` for an indicator, or a product of
//! those joined by `*`.

use std::path::Path;

use nlqmm::fitter::FitControl;
use nlqmm::model::{builtin_by_name, DesignMap, Factor, ModelSpec, PhiSpec};
use nlqmm::{OptimizerKind, VarianceSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Diagonal,
    General,
}

impl VarianceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VarianceKind::Diagonal => "diagonal",
            VarianceKind::General => "general",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiConfig {
    #[serde(default = "intercept_only")]
    pub fixed: Vec<String>,
    #[serde(default)]
    pub random: bool,
    /// Starting values for this component's fixed coefficients.
    pub start: Vec<f64>,
}

fn intercept_only() -> Vec<String> {
    vec!["1".into()]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub gamma: Option<f64>,
    pub omega0: Option<f64>,
    pub tol: Option<f64>,
    pub max_outer: Option<usize>,
    /// Optimizer order, e.g. `["bfgs", "nelder-mead"]`.
    pub optimizers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_replicates() -> usize {
    DEFAULT_BOOTSTRAP_REPLICATES
}

fn default_taus() -> Vec<f64> {
    vec![0.5]
}

fn default_variance() -> VarianceKind {
    VarianceKind::Diagonal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub response: String,
    pub group: String,
    /// Column holding the curve's argument (time, dose, ...).
    pub argument: String,
    pub model: String,
    #[serde(default = "default_variance")]
    pub variance: VarianceKind,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    pub phi: Vec<PhiConfig>,
    #[serde(default)]
    pub control: ControlConfig,
    pub bootstrap: Option<BootstrapConfig>,
}

/// One factor of a design term.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub column: String,
    /// Indicator of `column == level` when present, else the numeric value.
    pub level: Option<String>,
}

impl Atom {
    pub fn label(&self) -> String {
        match &self.level {
            Some(l) => format!("{}={l}", self.column),
            None => self.column.clone(),
        }
    }

    /// Value of the atom for a raw field.
    pub fn eval(&self, raw: &str) -> Result<f64, String> {
        let raw = raw.trim();
        match &self.level {
            Some(level) => Ok(if raw == level { 1.0 } else { 0.0 }),
            None => raw
                .parse::<f64>()
                .map_err(|_| format!("column \"{}\": \"{raw}\" is not a number", self.column)),
        }
    }
}

/// `"1"` is the empty product.
pub fn parse_term(term: &str) -> CliResult<Vec<Atom>> {
    let term = term.trim();
    if term == "1" {
        return Ok(Vec::new());
    }
    term.split('*')
        .map(|raw| {
            let raw = raw.trim();
            let (column, level) = match raw.split_once('=') {
                Some((c, l)) => (c.trim(), Some(l.trim().to_string())),
                None => (raw, None),
            };
            if column.is_empty() || level.as_deref() == Some("") {
                return Err(CliError::Config(format!("malformed term \"{term}\"")));
            }
            Ok(Atom {
                column: column.to_string(),
                level,
            })
        })
        .collect()
}

/// Design information derived from a config: the covariate layout of each
/// observation row is `[argument, atom_1, ..., atom_k]`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub atoms: Vec<Atom>,
    pub design: DesignMap,
    pub model: ModelSpec,
    pub variance: VarianceSpec,
    pub beta_names: Vec<String>,
    pub beta_start: Vec<f64>,
}

impl FitConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: FitConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.taus.is_empty() {
            return Err(CliError::Config("taus must not be empty".into()));
        }
        for &t in &self.taus {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Config(format!("τ = {t} is outside (0, 1)")));
            }
        }
        if let Some(b) = &self.bootstrap {
            if b.replicates == 1 {
                return Err(CliError::Config("bootstrap needs at least 2 replicates".into()));
            }
        }
        Ok(())
    }

    /// Every column the config reads from the data file.
    pub fn referenced_columns(&self) -> CliResult<Vec<String>> {
        let mut cols = vec![self.response.clone(), self.group.clone(), self.argument.clone()];
        for atom in self.layout()?.atoms {
            if !cols.contains(&atom.column) {
                cols.push(atom.column);
            }
        }
        Ok(cols)
    }

    pub fn layout(&self) -> CliResult<Layout> {
        let model = builtin_by_name(&self.model, 0).ok_or_else(|| {
            CliError::Config(format!(
                "unknown model \"{}\" (expected logistic3, logistic4 or biexp)",
                self.model
            ))
        })?;
        if self.phi.len() != model.n_phi() {
            return Err(CliError::Config(format!(
                "model {} has {} parameters but {} [[phi]] tables were given",
                self.model,
                model.n_phi(),
                self.phi.len()
            )));
        }
        let mut atoms: Vec<Atom> = Vec::new();
        let mut specs = Vec::with_capacity(self.phi.len());
        let mut beta_names = Vec::new();
        let mut beta_start = Vec::new();
        for (k, phi) in self.phi.iter().enumerate() {
            if phi.fixed.is_empty() {
                return Err(CliError::Config(format!("phi {}: at least one fixed term is required", k + 1)));
            }
            if phi.start.len() != phi.fixed.len() {
                return Err(CliError::Config(format!(
                    "phi {}: {} fixed terms but {} starting values",
                    k + 1,
                    phi.fixed.len(),
                    phi.start.len()
                )));
            }
            let mut factors = Vec::with_capacity(phi.fixed.len());
            for term in &phi.fixed {
                let parsed = parse_term(term)?;
                if parsed.is_empty() {
                    factors.push(Factor::One);
                    beta_names.push(format!("phi{}:(Intercept)", k + 1));
                    continue;
                }
                let mut cols = Vec::with_capacity(parsed.len());
                for atom in parsed.iter() {
                    let idx = match atoms.iter().position(|a| a == atom) {
                        Some(i) => i,
                        None => {
                            atoms.push(atom.clone());
                            atoms.len() - 1
                        }
                    };
                    cols.push(idx + 1);
                }
                factors.push(Factor::Product(cols));
                let label: Vec<String> = parsed.iter().map(Atom::label).collect();
                beta_names.push(format!("phi{}:{}", k + 1, label.join("*")));
            }
            beta_start.extend_from_slice(&phi.start);
            specs.push(PhiSpec {
                fixed: factors,
                random: phi.random,
            });
        }
        let design = DesignMap::from_phi_specs(&specs)?;
        if design.q() == 0 {
            return Err(CliError::Config("at least one [[phi]] must have random = true".into()));
        }
        let variance = match self.variance {
            VarianceKind::Diagonal => VarianceSpec::diagonal(design.q())?,
            VarianceKind::General => VarianceSpec::general(design.q())?,
        };
        Ok(Layout {
            atoms,
            design,
            model,
            variance,
            beta_names,
            beta_start,
        })
    }

    pub fn fit_control(&self, beta_start: Vec<f64>) -> CliResult<FitControl> {
        let mut control = FitControl {
            beta_start: Some(beta_start),
            ..Default::default()
        };
        let c = &self.control;
        if let Some(g) = c.gamma {
            control.gamma = g;
        }
        control.omega0 = c.omega0;
        if let Some(t) = c.tol {
            control.loglik_rel_tol = t;
        }
        if let Some(m) = c.max_outer {
            control.max_outer = m;
        }
        if let Some(order) = &c.optimizers {
            control.optimizer_order = order
                .iter()
                .map(|name| parse_optimizer(name))
                .collect::<CliResult<_>>()?;
        }
        control.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(control)
    }
}

pub fn parse_optimizer(name: &str) -> CliResult<OptimizerKind> {
    match name.to_ascii_lowercase().as_str() {
        "bfgs" | "quasi-newton" | "quasinewton" => Ok(OptimizerKind::QuasiNewton),
        "nelder-mead" | "simplex" => Ok(OptimizerKind::Simplex),
        other => Err(CliError::Config(format!("unknown optimizer \"{other}\""))),
    }
}
