//! Synthetic data for the four benchmark scenarios, the replication study
//! runner and its tabular summaries.
//!
//! Scenarios 1 and 2 are a four-parameter logistic growth curve with random
//! upper asymptote and midpoint; scenario 3 moves a skewed error inside the
//! exponential; scenario 4 is a biexponential decay with four random effects
//! and an error envelope that closes at `x = 8`.
//!
//! Each replication draws from its own ChaCha8 stream, selected by the
//! replication index, so results do not depend on scheduling.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitter::{fit, nlrq_fit, FitControl};
use crate::model::{builtin_biexp, builtin_logistic4, DesignMap, ModelSpec};
use crate::types::{Cluster, ClusteredDataset, QuantileLevel, VarianceSpec};

/// Error law of scenarios 2 and 3, `χ²₃/√k`, optionally centered first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareError {
    pub scale_denominator: f64,
    pub centered: bool,
}

impl ChiSquareError {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let chi = ChiSquared::new(3.0).expect("3 degrees of freedom");
        let v: f64 = chi.sample(rng);
        let v = if self.centered { v - 3.0 } else { v };
        v / self.scale_denominator.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: u8,
    /// Number of clusters.
    pub m: usize,
    /// Observations per cluster.
    pub n: usize,
    pub seed: u64,
    /// Center the χ²₃ errors of scenarios 2 and 3 before scaling.
    pub centered_chisq: bool,
}

impl ScenarioSpec {
    pub fn new(id: u8, seed: u64) -> Result<Self> {
        if !(1..=4).contains(&id) {
            return Err(Error::InvalidParameter(format!("scenario must be 1..4, got {id}")));
        }
        Ok(Self {
            id,
            m: 100,
            n: 10,
            seed,
            centered_chisq: false,
        })
    }

    /// Generating fixed effects.
    pub fn beta(&self) -> Vec<f64> {
        match self.id {
            1 | 2 => vec![70.0, 10.0, 3.0, 10.0],
            3 => vec![1.0, 4.0, 1.0, 0.0],
            _ => vec![2.0, 0.8, 0.4, -1.5],
        }
    }

    /// Covariance of the random effects.
    pub fn sigma(&self) -> DMatrix<f64> {
        match self.id {
            1 | 2 => DMatrix::from_row_slice(2, 2, &[4.0, -2.0, -2.0, 5.0]),
            3 => DMatrix::from_element(1, 1, 0.1),
            _ => DMatrix::identity(4, 4) * 0.1,
        }
    }

    pub fn x_range(&self) -> (f64, f64) {
        match self.id {
            1 | 2 => (0.0, 20.0),
            3 => (0.0, 5.0),
            _ => (0.0, 8.0),
        }
    }

    pub fn model(&self) -> ModelSpec {
        if self.id == 4 {
            builtin_biexp()
        } else {
            builtin_logistic4()
        }
    }

    /// φ = β + G u with G selecting the randomly perturbed components.
    pub fn design(&self) -> DesignMap {
        let g = match self.id {
            1 | 2 => {
                let mut g = DMatrix::zeros(4, 2);
                g[(0, 0)] = 1.0;
                g[(1, 1)] = 1.0;
                g
            }
            3 => DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 0.0]),
            _ => DMatrix::identity(4, 4),
        };
        DesignMap::from_matrices(&DMatrix::identity(4, 4), &g).expect("conformable scenario design")
    }

    pub fn variance(&self) -> VarianceSpec {
        match self.id {
            1 | 2 => VarianceSpec::general(2),
            3 => VarianceSpec::diagonal(1),
            _ => VarianceSpec::diagonal(4),
        }
        .expect("valid scenario variance")
    }

    fn draw_error<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.id {
            1 => rng.sample(StandardNormal),
            2 => ChiSquareError {
                scale_denominator: 6.0,
                centered: self.centered_chisq,
            }
            .draw(rng),
            3 => ChiSquareError {
                scale_denominator: 60.0,
                centered: self.centered_chisq,
            }
            .draw(rng),
            _ => 0.1f64.sqrt() * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

/// Response of scenario `id` for one observation, given the random effects
/// and the raw error draw.
pub fn scenario_response(id: u8, beta: &[f64], u: &[f64], x: f64, eps: f64) -> f64 {
    match id {
        1 | 2 => (beta[0] - beta[3] + u[0]) / (1.0 + ((beta[1] + u[1] - x) / beta[2]).exp()) + beta[3] + eps,
        3 => {
            (beta[0] - beta[3]) / (1.0 + ((beta[1] + u[0] - x - 0.5 * x * eps) / beta[2]).exp()) + beta[3]
        }
        _ => {
            (beta[0] + u[0]) * (-(beta[1] + u[1]).exp() * x).exp()
                + (beta[2] + u[2]) * (-(beta[3] + u[3]).exp() * x).exp()
                + (1.0 - x / 8.0) * eps
        }
    }
}

/// A generated replication and the random effects behind it.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub dataset: ClusteredDataset,
    /// One row per cluster.
    pub u_true: DMatrix<f64>,
}

fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

pub fn gen_scenario(spec: &ScenarioSpec, replication: usize) -> Result<ScenarioData> {
    if !(1..=4).contains(&spec.id) {
        return Err(Error::InvalidParameter(format!("scenario must be 1..4, got {}", spec.id)));
    }
    let mut rng = replication_rng(spec.seed, replication);
    let beta = spec.beta();
    let sigma = spec.sigma();
    let q = sigma.nrows();
    let chol = sigma.cholesky().expect("scenario covariance is SPD").unpack();
    let (lo, hi) = spec.x_range();
    let mut u_true = DMatrix::zeros(spec.m, q);
    let mut clusters = Vec::with_capacity(spec.m);
    for i in 0..spec.m {
        let z = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let u = &chol * z;
        u_true.set_row(i, &u.transpose());
        let xs: Vec<f64> = (0..spec.n).map(|_| rng.random_range(lo..hi)).collect();
        let y = xs
            .iter()
            .map(|&x| {
                let eps = spec.draw_error(&mut rng);
                scenario_response(spec.id, &beta, u.as_slice(), x, eps)
            })
            .collect();
        clusters.push(Cluster::new(
            format!("{}", i + 1),
            y,
            xs.iter().map(|&x| vec![x]).collect(),
        )?);
    }
    Ok(ScenarioData {
        dataset: ClusteredDataset::new(clusters, vec!["x".into()])?,
        u_true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Nlqmm,
    Nlrq,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Nlqmm => "nlqmm",
            Estimator::Nlrq => "nlrq",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "nlqmm" => Some(Estimator::Nlqmm),
            "nlrq" => Some(Estimator::Nlrq),
            _ => None,
        }
    }
}

/// One fitted (replication, τ, estimator) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub scenario: u8,
    pub replication: usize,
    pub tau: f64,
    pub estimator: Estimator,
    /// Present when the fit succeeded and converged.
    pub beta: Option<Vec<f64>>,
    pub outer_iterations: usize,
    pub final_omega: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: u8,
    pub tau: f64,
    pub estimator: Estimator,
    pub mean: Vec<f64>,
    /// Empty with fewer than two usable replications.
    pub sd: Vec<Option<f64>>,
    pub r_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<StudyRecord>,
    pub replications: usize,
    pub elapsed: Duration,
}

impl StudySummary {
    pub fn row(&self, scenario: u8, tau: f64, estimator: Estimator) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.tau == tau && r.estimator == estimator)
    }
}

fn fit_one(
    spec: &ScenarioSpec,
    data: &ScenarioData,
    tau: f64,
    estimator: Estimator,
    control: &FitControl,
) -> (Option<Vec<f64>>, usize, f64, Option<String>) {
    let level = match QuantileLevel::new(tau) {
        Ok(t) => t,
        Err(e) => return (None, 0, f64::NAN, Some(e.to_string())),
    };
    let model = spec.model();
    let design = spec.design();
    match estimator {
        Estimator::Nlqmm => match fit(&data.dataset, &*model, &design, &spec.variance(), level, control) {
            Ok(res) if res.converged => (
                Some(res.beta_hat.as_slice().to_vec()),
                res.outer_iterations,
                res.final_omega,
                None,
            ),
            Ok(res) => (
                None,
                res.outer_iterations,
                res.final_omega,
                Some("outer iteration limit reached".into()),
            ),
            Err(e) => (None, 0, f64::NAN, Some(e.to_string())),
        },
        Estimator::Nlrq => match nlrq_fit(&data.dataset, &*model, &design, level, control) {
            Ok(res) if res.converged => (
                Some(res.beta.as_slice().to_vec()),
                res.outer_iterations,
                res.final_omega,
                None,
            ),
            Ok(res) => (
                None,
                res.outer_iterations,
                res.final_omega,
                Some("outer iteration limit reached".into()),
            ),
            Err(e) => (None, 0, f64::NAN, Some(e.to_string())),
        },
    }
}

/// Fits every (scenario, replication, τ, estimator) combination. Failures
/// are recorded, never fatal. When `control.beta_start` is unset the
/// generating β of each scenario seeds the starting-value regressions.
pub fn run_study(
    scenarios: &[ScenarioSpec],
    taus: &[f64],
    replications: usize,
    control: &FitControl,
    estimators: &[Estimator],
) -> Result<StudySummary> {
    if replications == 0 {
        return Err(Error::InvalidParameter("at least one replication is required".into()));
    }
    if taus.is_empty() || estimators.is_empty() || scenarios.is_empty() {
        return Err(Error::InvalidParameter("scenarios, τ and estimators must be nonempty".into()));
    }
    for &t in taus {
        QuantileLevel::new(t)?;
    }
    control.validate()?;
    let started = Instant::now();
    let mut records = Vec::new();
    for spec in scenarios {
        let mut ctl = control.clone();
        if ctl.beta_start.is_none() {
            ctl.beta_start = Some(spec.beta());
        }
        let per_rep: Vec<Result<Vec<StudyRecord>>> = (0..replications)
            .into_par_iter()
            .map(|rep| {
                let data = gen_scenario(spec, rep)?;
                let mut out = Vec::with_capacity(taus.len() * estimators.len());
                for &tau in taus {
                    for &est in estimators {
                        let (beta, iters, omega, message) = fit_one(spec, &data, tau, est, &ctl);
                        if let Some(m) = &message {
                            log::warn!(
                                "scenario {} replication {rep} τ={tau} {}: {m}",
                                spec.id,
                                est.as_str()
                            );
                        }
                        out.push(StudyRecord {
                            scenario: spec.id,
                            replication: rep,
                            tau,
                            estimator: est,
                            beta,
                            outer_iterations: iters,
                            final_omega: omega,
                            message,
                        });
                    }
                }
                Ok(out)
            })
            .collect();
        for r in per_rep {
            records.extend(r?);
        }
    }

    let mut rows = Vec::new();
    for spec in scenarios {
        let p = spec.beta().len();
        for &tau in taus {
            for &est in estimators {
                let cell: Vec<&StudyRecord> = records
                    .iter()
                    .filter(|r| r.scenario == spec.id && r.tau == tau && r.estimator == est)
                    .collect();
                let ok: Vec<&Vec<f64>> = cell.iter().filter_map(|r| r.beta.as_ref()).collect();
                let n = ok.len();
                let mean: Vec<f64> = (0..p)
                    .map(|k| {
                        if n == 0 {
                            f64::NAN
                        } else {
                            ok.iter().map(|b| b[k]).sum::<f64>() / n as f64
                        }
                    })
                    .collect();
                let sd = (0..p)
                    .map(|k| {
                        (n >= 2).then(|| {
                            let ss: f64 = ok.iter().map(|b| (b[k] - mean[k]).powi(2)).sum();
                            (ss / (n - 1) as f64).sqrt()
                        })
                    })
                    .collect();
                rows.push(SummaryRow {
                    scenario: spec.id,
                    tau,
                    estimator: est,
                    mean,
                    sd,
                    r_used: n,
                    failures: cell.len() - n,
                });
            }
        }
    }

    Ok(StudySummary {
        rows,
        records,
        replications,
        elapsed: started.elapsed(),
    })
}

/// Plain-text table: one row per (τ, estimator), `mean (sd)` per coefficient.
pub fn summarize_to_table(summary: &StudySummary) -> String {
    let mut out = String::new();
    let mut scenario = None;
    for row in &summary.rows {
        if scenario != Some(row.scenario) {
            scenario = Some(row.scenario);
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "Scenario {} (R = {})", row.scenario, summary.replications);
            let _ = write!(out, "{:<6} {:<9}", "tau", "estimator");
            for k in 0..row.mean.len() {
                let _ = write!(out, " {:>18}", format!("beta{}", k + 1));
            }
            let _ = writeln!(out, " {:>6} {:>8}", "R_used", "failures");
        }
        let _ = write!(out, "{:<6} {:<9}", format!("{}", row.tau), row.estimator.as_str());
        for (m, s) in row.mean.iter().zip(&row.sd) {
            let cell = match s {
                _ if m.is_nan() => "NA (NA)".to_string(),
                Some(s) => format!("{m:.2} ({s:.2})"),
                None => format!("{m:.2} (NA)"),
            };
            let _ = write!(out, " {cell:>18}");
        }
        let _ = writeln!(out, " {:>6} {:>8}", row.r_used, row.failures);
    }
    out
}

/// Summary CSV with columns `scenario,tau,estimator,coef,mean,sd,R_used`.
pub fn summary_csv(summary: &StudySummary) -> String {
    let mut out = String::from("scenario,tau,estimator,coef,mean,sd,R_used\n");
    for row in &summary.rows {
        for (k, (m, s)) in row.mean.iter().zip(&row.sd).enumerate() {
            let sd = s.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let mean = if m.is_nan() { "NA".to_string() } else { m.to_string() };
            let _ = writeln!(
                out,
                "{},{},{},beta{},{},{},{}",
                row.scenario,
                row.tau,
                row.estimator.as_str(),
                k + 1,
                mean,
                sd,
                row.r_used
            );
        }
    }
    out
}

/// One line per fitted cell with the raw estimates.
pub fn raw_csv(summary: &StudySummary) -> String {
    let p = summary.rows.iter().map(|r| r.mean.len()).max().unwrap_or(0);
    let mut out = String::from("scenario,replication,tau,estimator,status,outer_iterations");
    for k in 0..p {
        let _ = write!(out, ",beta{}", k + 1);
    }
    out.push('\n');
    for r in &summary.records {
        let status = if r.beta.is_some() { "ok" } else { "failed" };
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.scenario,
            r.replication,
            r.tau,
            r.estimator.as_str(),
            status,
            r.outer_iterations
        );
        for k in 0..p {
            match &r.beta {
                Some(b) if k < b.len() => {
                    let _ = write!(out, ",{}", b[k]);
                }
                _ => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}
