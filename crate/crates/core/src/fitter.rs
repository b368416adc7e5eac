//! Starting values and the ω-shrinking outer loop.
//!
//! Each outer iteration maximizes the profiled Laplace log-likelihood over
//! θ = (β, ξ) at a fixed bandwidth ω. The fit stops once that maximization
//! changes the log-likelihood by less than the relative tolerance; otherwise
//! ω shrinks by γ and the next iteration starts from the updated θ.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{profiled_loglik, LikelihoodProblem, ProfiledLoglik, SIGMA_FLOOR};
use crate::loss::kappa;
use crate::model::{DesignMap, QuantileModel};
use crate::optimize::{
    minimize_quasi_newton, minimize_simplex, OptimStatus, OptimizerReport, QuasiNewtonOptions,
    SimplexOptions,
};
use crate::remode::ModeOptions;
use crate::types::{
    materialize_psi, ClusteredDataset, FitResult, OptimizerKind, QuantileLevel, ThetaVector, TraceRecord,
    VarianceSpec,
};

/// Smallest default starting bandwidth.
pub const OMEGA0_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FitControl {
    pub max_outer: usize,
    pub loglik_rel_tol: f64,
    pub gamma: f64,
    pub omega0: Option<f64>,
    pub optimizer_order: Vec<OptimizerKind>,
    /// Reserved for stochastic restarts; unused by the default algorithm.
    pub seed: u64,
    /// Initial β handed to the starting-value regressions.
    pub beta_start: Option<Vec<f64>>,
    /// Skip the starting-value regressions and start from this θ.
    pub theta_start: Option<ThetaVector>,
    pub mode: ModeOptions,
    pub quasi_newton: QuasiNewtonOptions,
    pub simplex: SimplexOptions,
}

impl Default for FitControl {
    fn default() -> Self {
        Self {
            max_outer: 500,
            loglik_rel_tol: 1e-4,
            gamma: 0.5,
            omega0: None,
            optimizer_order: vec![OptimizerKind::QuasiNewton, OptimizerKind::Simplex],
            seed: 0,
            beta_start: None,
            theta_start: None,
            mode: ModeOptions::default(),
            quasi_newton: QuasiNewtonOptions::default(),
            simplex: SimplexOptions::default(),
        }
    }
}

impl FitControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("γ must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.loglik_rel_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidParameter("max_outer must be at least 1".into()));
        }
        if let Some(w) = self.omega0 {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!("ω⁰ must be positive, got {w}")));
            }
        }
        if self.optimizer_order.is_empty() {
            return Err(Error::InvalidParameter("optimizer_order is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartSource {
    QuantileRegression,
    LeastSquares,
    Supplied,
}

#[derive(Debug, Clone)]
pub struct StartingValues {
    pub theta: ThetaVector,
    pub sigma: f64,
    pub omega: f64,
    pub modes: Vec<DVector<f64>>,
    pub source: StartSource,
}

/// Fixed-effects-only smoothed quantile regression.
#[derive(Debug, Clone)]
pub struct NlrqFit {
    pub beta: DVector<f64>,
    /// `Σκ` at the final bandwidth.
    pub objective: f64,
    pub loglik: f64,
    pub final_omega: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

fn pooled_residuals(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    beta: &[f64],
) -> Result<Vec<f64>> {
    let mut phi = vec![0.0; design.s()];
    let mut out = Vec::with_capacity(dataset.n_obs());
    for cluster in dataset.clusters() {
        for (j, x) in cluster.x_rows().enumerate() {
            design.phi_into(beta, &[], x, &mut phi);
            let f = model.value(&phi, x)?;
            let r = cluster.y()[j] - f;
            if !r.is_finite() {
                return Err(Error::Numerical(format!("non-finite residual in cluster {}", cluster.id())));
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// N × p Jacobian of the pooled fitted values with respect to β.
fn beta_jacobian(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    beta: &[f64],
) -> Result<DMatrix<f64>> {
    let p = design.p();
    let mut jac = DMatrix::zeros(dataset.n_obs(), p);
    let mut phi = vec![0.0; design.s()];
    let mut dphi = vec![0.0; design.s()];
    let mut row = vec![0.0; p];
    let mut i = 0;
    for cluster in dataset.clusters() {
        for x in cluster.x_rows() {
            design.phi_into(beta, &[], x, &mut phi);
            model.gradient(&phi, x, &mut dphi)?;
            design.fixed_chain(&dphi, x, &mut row);
            for k in 0..p {
                jac[(i, k)] = row[k];
            }
            i += 1;
        }
    }
    Ok(jac)
}

fn underdetermined(dataset: &ClusteredDataset, p: usize) -> Result<()> {
    if dataset.n_obs() < p {
        return Err(Error::InvalidData(format!(
            "{} observations cannot identify {p} fixed effects",
            dataset.n_obs()
        )));
    }
    Ok(())
}

fn required_beta_start(control: &FitControl, p: usize) -> Result<Vec<f64>> {
    let beta = control
        .beta_start
        .clone()
        .ok_or_else(|| Error::InvalidParameter("a starting β is required".into()))?;
    if beta.len() != p {
        return Err(Error::Dimension(format!("starting β has length {}, expected {p}", beta.len())));
    }
    Ok(beta)
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn rel_change(new: f64, old: f64) -> f64 {
    if new == old {
        return 0.0;
    }
    (new - old).abs() / old.abs().max(1e-12)
}

/// Runs the optimizers in order from `x0`; a failed status hands the best
/// point so far to the next one.
fn run_optimizers<F>(
    objective: F,
    x0: &[f64],
    control: &FitControl,
) -> (OptimizerReport, OptimizerKind, usize, bool)
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut evaluations = 0;
    let mut last = None;
    for (k, kind) in control.optimizer_order.iter().enumerate() {
        let report = match kind {
            OptimizerKind::QuasiNewton => minimize_quasi_newton(&objective, &x, &control.quasi_newton),
            OptimizerKind::Simplex => minimize_simplex(&objective, &x, &control.simplex),
        };
        evaluations += report.evaluations;
        let failed = report.status.is_failure();
        if report.f_best.is_finite() {
            x = report.x_best.clone();
        }
        last = Some((report, *kind, k > 0));
        if !failed {
            break;
        }
    }
    let (report, kind, fallback) = last.expect("optimizer_order is nonempty");
    (report, kind, evaluations, fallback)
}

/// Smoothed quantile regression on the pooled data with the random part of
/// the design removed, run through the same ω schedule as the mixed model.
pub fn nlrq_fit(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    tau: QuantileLevel,
    control: &FitControl,
) -> Result<NlrqFit> {
    control.validate()?;
    let fixed = design.fixed_only();
    fixed.check(model, dataset.n_covariates())?;
    let p = fixed.p();
    underdetermined(dataset, p)?;
    let mut beta = required_beta_start(control, p)?;

    let n = dataset.n_obs() as f64;
    let t = tau.value();
    let objective_at = |b: &[f64], omega: f64| -> f64 {
        match pooled_residuals(dataset, model, &fixed, b) {
            Ok(r) => r.iter().map(|&v| kappa(tau, omega, v)).sum(),
            Err(_) => f64::NAN,
        }
    };
    let loglik_of = |sum_kappa: f64| {
        let sigma = (sum_kappa / n).max(SIGMA_FLOOR);
        n * ((t * (1.0 - t) / sigma).ln() - 1.0)
    };

    let r0 = pooled_residuals(dataset, model, &fixed, &beta)?;
    let mut omega = control.omega0.unwrap_or_else(|| std_dev(&r0).max(OMEGA0_FLOOR));
    let mut ll_prev = loglik_of(objective_at(&beta, omega));
    let mut evaluations = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut value = f64::NAN;

    for it in 0..control.max_outer {
        iterations = it + 1;
        let (report, _, evals, _) = run_optimizers(|b: &[f64]| objective_at(b, omega), &beta, control);
        evaluations += evals;
        if report.status.is_failure() && it == 0 && report.x_best == beta {
            return Err(Error::Fit {
                message: format!("quantile regression optimizers failed ({:?})", report.status),
                trace: Vec::new(),
            });
        }
        beta = report.x_best;
        value = report.f_best;
        let ll = loglik_of(value);
        if rel_change(ll, ll_prev) < control.loglik_rel_tol {
            converged = true;
            break;
        }
        ll_prev = ll;
        omega *= control.gamma;
    }

    let jac = beta_jacobian(dataset, model, &fixed, &beta)?;
    let sv = jac.singular_values();
    let smax = sv.max();
    if !(smax > 0.0) || sv.min() / smax < 1e-6 {
        return Err(Error::Degenerate(
            "fixed effects are not identified at the quantile regression solution".into(),
        ));
    }

    Ok(NlrqFit {
        beta: DVector::from_vec(beta),
        objective: value,
        loglik: loglik_of(value),
        final_omega: omega,
        outer_iterations: iterations,
        converged,
        evaluations,
    })
}

/// β from [`nlrq_fit`].
pub fn nlrq_start(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    tau: QuantileLevel,
    control: &FitControl,
) -> Result<DVector<f64>> {
    nlrq_fit(dataset, model, design, tau, control).map(|f| f.beta)
}

/// Levenberg-Marquardt least squares on the pooled data (fixed part only).
pub fn nls_fit(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    beta_start: &[f64],
) -> Result<DVector<f64>> {
    let fixed = design.fixed_only();
    let p = fixed.p();
    underdetermined(dataset, p)?;
    if beta_start.len() != p {
        return Err(Error::Dimension(format!("starting β has length {}, expected {p}", beta_start.len())));
    }
    let sse = |b: &[f64]| -> Option<(Vec<f64>, f64)> {
        let r = pooled_residuals(dataset, model, &fixed, b).ok()?;
        let s = r.iter().map(|v| v * v).sum::<f64>();
        s.is_finite().then_some((r, s))
    };
    let mut beta = beta_start.to_vec();
    let (mut r, mut s) =
        sse(&beta).ok_or_else(|| Error::Numerical("least squares objective is not finite at the start".into()))?;
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let jac = beta_jacobian(dataset, model, &fixed, &beta)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        if jtr.amax() <= 1e-12 * s.max(1e-300).sqrt() {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for k in 0..p {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b + d).collect();
            match sse(&trial) {
                Some((rt, st)) if st < s => {
                    let small = s - st <= 1e-12 * s;
                    beta = trial;
                    r = rt;
                    s = st;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = !small;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(DVector::from_vec(beta))
}

/// β⁰ from quantile regression (falling back to least squares), ξ⁰ = 0,
/// σ⁰ = mean |residual|, ω⁰ = `control.omega0` or the residual standard
/// deviation, and modes from u = 0.
pub fn starting_values(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    variance: &VarianceSpec,
    tau: QuantileLevel,
    control: &FitControl,
) -> Result<StartingValues> {
    control.validate()?;
    if dataset.n_obs() == 0 {
        return Err(Error::InvalidData("dataset is empty".into()));
    }
    design.check(model, dataset.n_covariates())?;
    if variance.q() != design.q() {
        return Err(Error::Dimension(format!(
            "variance has q = {}, design has q = {}",
            variance.q(),
            design.q()
        )));
    }

    let (theta, source) = match &control.theta_start {
        Some(theta) => {
            if theta.beta.len() != design.p() || theta.xi.len() != variance.m() {
                return Err(Error::Dimension("supplied θ does not match the design".into()));
            }
            (theta.clone(), StartSource::Supplied)
        }
        None => {
            let (beta, source) = match nlrq_start(dataset, model, design, tau, control) {
                Ok(b) => (b, StartSource::QuantileRegression),
                Err(nlrq) => {
                    log::info!("quantile regression start failed ({nlrq}); using least squares");
                    let start = required_beta_start(control, design.p())?;
                    match nls_fit(dataset, model, design, &start) {
                        Ok(b) => (b, StartSource::LeastSquares),
                        Err(nls) => {
                            return Err(Error::Start {
                                nlrq: Box::new(nlrq),
                                nls: Box::new(nls),
                            })
                        }
                    }
                }
            };
            (ThetaVector::new(beta, DVector::zeros(variance.m())), source)
        }
    };

    let resid = pooled_residuals(dataset, model, design, theta.beta.as_slice())?;
    let sigma = resid.iter().map(|r| r.abs()).sum::<f64>() / resid.len() as f64;
    let omega = control.omega0.unwrap_or_else(|| std_dev(&resid).max(OMEGA0_FLOOR));

    let problem = LikelihoodProblem {
        dataset,
        model,
        design,
        variance: *variance,
        tau,
        omega,
        mode: control.mode,
    };
    let modes = crate::likelihood::cluster_terms(&problem, &theta, None)?
        .into_iter()
        .map(|t| t.mode)
        .collect();

    Ok(StartingValues {
        theta,
        sigma,
        omega,
        modes,
        source,
    })
}

fn finish(
    problem: &LikelihoodProblem<'_>,
    profiled: ProfiledLoglik,
    theta: ThetaVector,
    trace: Vec<TraceRecord>,
    converged: bool,
) -> Result<FitResult> {
    let dataset = problem.dataset;
    let q = problem.variance.q();
    let psi = materialize_psi(theta.xi.as_slice(), &problem.variance)?;
    let mut u_modes = DMatrix::zeros(dataset.n_clusters(), q);
    for (i, term) in profiled.terms.iter().enumerate() {
        u_modes.set_row(i, &term.mode.transpose());
    }
    Ok(FitResult {
        tau: problem.tau,
        beta_hat: theta.beta.clone(),
        sigma_cov_hat: &psi * profiled.sigma_hat,
        psi_hat: psi,
        sigma_hat: profiled.sigma_hat,
        u_modes,
        cluster_ids: dataset.clusters().iter().map(|c| c.id().to_string()).collect(),
        loglik: profiled.value,
        final_omega: problem.omega,
        outer_iterations: trace.len(),
        trace,
        converged,
        theta,
    })
}

/// Fits the quantile mixed model at level `tau`.
pub fn fit(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    variance: &VarianceSpec,
    tau: QuantileLevel,
    control: &FitControl,
) -> Result<FitResult> {
    if design.q() == 0 {
        return Err(Error::InvalidParameter("the design has no random effects".into()));
    }
    let start = starting_values(dataset, model, design, variance, tau, control)?;
    let p = design.p();
    let mut problem = LikelihoodProblem {
        dataset,
        model,
        design,
        variance: *variance,
        tau,
        omega: start.omega,
        mode: control.mode,
    };

    let mut theta = start.theta;
    let mut current = profiled_loglik(&problem, &theta, Some(&start.modes), true)?;
    let mut trace = Vec::new();
    let mut converged = false;

    for it in 0..control.max_outer {
        if it > 0 {
            problem.omega *= control.gamma;
            current = profiled_loglik(&problem, &theta, Some(&current.modes()), true)?;
        }
        // the change is measured across this iteration's update at fixed ω;
        // values at different ω differ by the bandwidth's effect on log|ΨḦ|
        let ll_start = current.value;
        let anchor = current.modes();
        let objective = |x: &[f64]| -> f64 {
            let th = ThetaVector::from_slice(x, p);
            match profiled_loglik(&problem, &th, Some(&anchor), true) {
                Ok(l) if l.value.is_finite() => -l.value,
                _ => f64::NAN,
            }
        };
        let x0 = theta.to_vec();
        let (report, kind, evaluations, fallback) = run_optimizers(objective, &x0, control);
        if report.status.is_failure() && !report.f_best.is_finite() {
            return Err(Error::Fit {
                message: format!("every optimizer failed at outer iteration {it} ({:?})", report.status),
                trace,
            });
        }
        if report.status.is_failure() && it == 0 && report.x_best == x0 {
            return Err(Error::Fit {
                message: format!("every optimizer failed at the first iteration ({:?})", report.status),
                trace,
            });
        }
        if report.status == OptimStatus::MaxEvaluations {
            log::debug!("outer iteration {it}: optimizer hit its evaluation limit");
        }
        theta = ThetaVector::from_slice(&report.x_best, p);
        current = profiled_loglik(&problem, &theta, Some(&anchor), true)?;
        trace.push(TraceRecord {
            iteration: it,
            omega: problem.omega,
            loglik_start: ll_start,
            loglik: current.value,
            optimizer: kind,
            evaluations,
            fallback,
        });
        log::debug!("outer iteration {it}: ω = {:.3e}, ℓ = {:.6}", problem.omega, current.value);
        if rel_change(current.value, ll_start) < control.loglik_rel_tol {
            converged = true;
            break;
        }
    }

    let refreshed = profiled_loglik(&problem, &theta, Some(&current.modes()), false)?;
    finish(&problem, refreshed, theta, trace, converged)
}
