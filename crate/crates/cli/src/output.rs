//! Result files and atomic writes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use nlqmm::FitResult;
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, Layout};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    /// Cluster-bootstrap standard error, when requested.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffects {
    pub id: String,
    /// Raw values of the referenced columns on the cluster's first row.
    pub values: BTreeMap<String, String>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub requested: usize,
    pub used: usize,
    pub failures: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutput {
    pub iteration: usize,
    pub omega: f64,
    pub loglik_start: f64,
    pub loglik: f64,
    pub optimizer: String,
    pub evaluations: usize,
    pub fallback: bool,
}

/// Everything written for one quantile level. The embedded config makes the
/// file self-contained for `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub tau: f64,
    pub config: FitConfig,
    pub coefficients: Vec<Coefficient>,
    pub beta: Vec<f64>,
    pub xi: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub sigma: f64,
    pub sigma_cov: Vec<Vec<f64>>,
    pub random_effects: Vec<ClusterEffects>,
    pub loglik: f64,
    pub final_omega: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub bootstrap: Option<BootstrapSummary>,
    pub trace: Vec<TraceOutput>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl FitOutput {
    pub fn new(
        config: &FitConfig,
        layout: &Layout,
        fit: &FitResult,
        cluster_values: &[Vec<(String, String)>],
        se: Option<&[f64]>,
        bootstrap: Option<BootstrapSummary>,
    ) -> Self {
        let coefficients = layout
            .beta_names
            .iter()
            .enumerate()
            .map(|(k, name)| Coefficient {
                name: name.clone(),
                estimate: fit.beta_hat[k],
                se: se.map(|s| s[k]),
            })
            .collect();
        let random_effects = fit
            .cluster_ids
            .iter()
            .zip(cluster_values)
            .enumerate()
            .map(|(i, (id, values))| ClusterEffects {
                id: id.clone(),
                values: values.iter().cloned().collect(),
                u: fit.u_modes.row(i).iter().copied().collect(),
            })
            .collect();
        let trace = fit
            .trace
            .iter()
            .map(|t| TraceOutput {
                iteration: t.iteration,
                omega: t.omega,
                loglik_start: t.loglik_start,
                loglik: t.loglik,
                optimizer: t.optimizer.as_str().to_string(),
                evaluations: t.evaluations,
                fallback: t.fallback,
            })
            .collect();
        FitOutput {
            tau: fit.tau.value(),
            config: config.clone(),
            coefficients,
            beta: fit.beta_hat.iter().copied().collect(),
            xi: fit.theta.xi.iter().copied().collect(),
            psi: rows(&fit.psi_hat),
            sigma: fit.sigma_hat,
            sigma_cov: rows(&fit.sigma_cov_hat),
            random_effects,
            loglik: fit.loglik,
            final_omega: fit.final_omega,
            converged: fit.converged,
            outer_iterations: fit.outer_iterations,
            bootstrap,
            trace,
        }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fit output serializes");
        s.push('\n');
        s
    }
}

/// File name for the result at one τ, e.g. `fit_tau_0.5.json`.
pub fn fit_file_name(tau: f64) -> String {
    format!("fit_tau_{tau}.json")
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn file_names() {
        assert_eq!(fit_file_name(0.5), "fit_tau_0.5.json");
        assert_eq!(fit_file_name(0.05), "fit_tau_0.05.json");
    }
}
