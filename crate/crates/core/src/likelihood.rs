//! Laplacian approximation of the smoothed marginal log-likelihood and its
//! σ-profiled form.
//!
//! For every cluster the conditional mode û_i is recomputed (warm-started),
//! then
//!
//! ```text
//! ℓ_LA = N log{τ(1-τ)/σ} - ½ { Σ_i log|Ψ Ḧ_i| + σ⁻¹ Σ_i h_i }
//! ```
//!
//! with `log|ΨḦ_i| = log|I + ω⁻¹ Lᵀ JᵀAJ L|` for `Ψ = L Lᵀ`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DesignMap, QuantileModel};
use crate::remode::{ClusterObjective, ClusterState, ModeOptions, ModeStatus};
use crate::types::{ClusteredDataset, QuantileLevel, ScaledCovariance, ThetaVector, VarianceSpec};

/// Smallest σ̂ used while probing parameters that interpolate the data.
pub const SIGMA_FLOOR: f64 = 1e-10;

/// Everything the likelihood depends on besides θ and σ.
#[derive(Clone, Copy)]
pub struct LikelihoodProblem<'a> {
    pub dataset: &'a ClusteredDataset,
    pub model: &'a dyn QuantileModel,
    pub design: &'a DesignMap,
    pub variance: VarianceSpec,
    pub tau: QuantileLevel,
    pub omega: f64,
    pub mode: ModeOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoglikBreakdown {
    pub total: f64,
    /// `N log{τ(1-τ)/σ}`.
    pub kernel_term: f64,
    /// `-½ Σ log|ΨḦ_i|`.
    pub logdet_term: f64,
    /// `-(1/2σ) Σ h_i`.
    pub h_term: f64,
    pub per_cluster_h: Vec<f64>,
    pub sigma_used: f64,
}

/// Per-cluster quantities at the conditional mode.
#[derive(Debug, Clone)]
pub struct ClusterTerm {
    pub mode: DVector<f64>,
    pub h: f64,
    pub log_det: f64,
    pub status: ModeStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ProfiledLoglik {
    pub value: f64,
    pub sigma_hat: f64,
    /// True when Σh_i was degenerate and σ̂ was floored.
    pub degenerate: bool,
    pub logdet_term: f64,
    pub terms: Vec<ClusterTerm>,
}

impl ProfiledLoglik {
    pub fn modes(&self) -> Vec<DVector<f64>> {
        self.terms.iter().map(|t| t.mode.clone()).collect()
    }
}

/// `log|I + ω⁻¹ Lᵀ JᵀAJ L|`, non-negative for SPD Ψ.
pub fn log_det_psi_hess(state: &ClusterState, cov: &ScaledCovariance, omega: f64) -> Result<f64> {
    let q = cov.q();
    let mut jaj = DMatrix::<f64>::zeros(q, q);
    for (j, &a) in state.coeffs.a_diag.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for k in 0..q {
            let jk = state.jac[(j, k)] / omega;
            for l in 0..q {
                jaj[(k, l)] += jk * state.jac[(j, l)];
            }
        }
    }
    let l = cov.chol();
    let m = DMatrix::identity(q, q) + l.transpose() * jaj * l;
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Numerical("I + LᵀJᵀAJL/ω is not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Modes, `h_i` and `log|ΨḦ_i|` for every cluster, in dataset order.
pub fn cluster_terms(
    problem: &LikelihoodProblem<'_>,
    theta: &ThetaVector,
    warm_modes: Option<&[DVector<f64>]>,
) -> Result<Vec<ClusterTerm>> {
    let design = problem.design;
    if theta.beta.len() != design.p() {
        return Err(Error::Dimension(format!(
            "β has length {}, design expects {}",
            theta.beta.len(),
            design.p()
        )));
    }
    if problem.variance.q() != design.q() {
        return Err(Error::Dimension(format!(
            "variance has q = {}, design has q = {}",
            problem.variance.q(),
            design.q()
        )));
    }
    if !(problem.omega > 0.0) {
        return Err(Error::InvalidParameter(format!("ω must be positive, got {}", problem.omega)));
    }
    let cov = ScaledCovariance::from_xi(theta.xi.as_slice(), &problem.variance)?;
    let clusters = problem.dataset.clusters();
    if let Some(w) = warm_modes {
        if w.len() != clusters.len() {
            return Err(Error::Dimension(format!(
                "{} warm-start modes for {} clusters",
                w.len(),
                clusters.len()
            )));
        }
    }
    let zero = DVector::zeros(design.q());
    let beta = theta.beta.as_slice();
    clusters
        .par_iter()
        .enumerate()
        .map(|(i, cluster)| {
            let start = warm_modes.map_or(&zero, |w| &w[i]);
            let objective = ClusterObjective {
                model: problem.model,
                design,
                beta,
                cov: &cov,
                cluster,
                omega: problem.omega,
                tau: problem.tau,
            };
            let state = objective
                .solve_mode(start.as_slice(), &problem.mode)
                .map_err(|e| e.in_cluster(cluster.id()))?;
            let log_det =
                log_det_psi_hess(&state, &cov, problem.omega).map_err(|e| e.in_cluster(cluster.id()))?;
            Ok(ClusterTerm {
                h: state.h_value,
                log_det,
                status: state.status,
                iterations: state.iterations,
                mode: state.u,
            })
        })
        .collect()
}

fn kernel(problem: &LikelihoodProblem<'_>, sigma: f64) -> f64 {
    let t = problem.tau.value();
    problem.dataset.n_obs() as f64 * (t * (1.0 - t) / sigma).ln()
}

/// Laplace-approximated log-likelihood at a given σ.
pub fn laplace_loglik(
    problem: &LikelihoodProblem<'_>,
    theta: &ThetaVector,
    sigma: f64,
    warm_modes: Option<&[DVector<f64>]>,
) -> Result<(LoglikBreakdown, Vec<ClusterTerm>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("σ must be positive, got {sigma}")));
    }
    let terms = cluster_terms(problem, theta, warm_modes)?;
    let breakdown = assemble(problem, &terms, sigma);
    Ok((breakdown, terms))
}

/// Assembles the log-likelihood from precomputed cluster terms.
pub fn assemble(problem: &LikelihoodProblem<'_>, terms: &[ClusterTerm], sigma: f64) -> LoglikBreakdown {
    let sum_h: f64 = terms.iter().map(|t| t.h).sum();
    let sum_logdet: f64 = terms.iter().map(|t| t.log_det).sum();
    let kernel_term = kernel(problem, sigma);
    let logdet_term = -0.5 * sum_logdet;
    let h_term = -sum_h / (2.0 * sigma);
    LoglikBreakdown {
        total: kernel_term + logdet_term + h_term,
        kernel_term,
        logdet_term,
        h_term,
        per_cluster_h: terms.iter().map(|t| t.h).collect(),
        sigma_used: sigma,
    }
}

/// Profiled scale `σ̂ = (2N)⁻¹ Σ h_i`.
pub fn sigma_hat(per_cluster_h: &[f64], n_obs: usize) -> Result<f64> {
    let sum: f64 = per_cluster_h.iter().sum();
    if !(sum > 0.0) || n_obs == 0 {
        return Err(Error::Degenerate(format!(
            "Σh_i = {sum}: the curve interpolates the data"
        )));
    }
    Ok(sum / (2.0 * n_obs as f64))
}

/// `N[log{τ(1-τ)/σ̂} - 1] - ½ Σ log|ΨḦ_i|`.
///
/// With `floor_sigma`, a degenerate Σh_i floors σ̂ at [`SIGMA_FLOOR`] and logs
/// a warning instead of failing.
pub fn profiled_loglik(
    problem: &LikelihoodProblem<'_>,
    theta: &ThetaVector,
    warm_modes: Option<&[DVector<f64>]>,
    floor_sigma: bool,
) -> Result<ProfiledLoglik> {
    let terms = cluster_terms(problem, theta, warm_modes)?;
    let hs: Vec<f64> = terms.iter().map(|t| t.h).collect();
    let (sigma, degenerate) = match sigma_hat(&hs, problem.dataset.n_obs()) {
        Ok(s) if s >= SIGMA_FLOOR => (s, false),
        Ok(_) if floor_sigma => (SIGMA_FLOOR, true),
        Err(_) if floor_sigma => {
            log::warn!("degenerate Σh_i; flooring σ̂ at {SIGMA_FLOOR}");
            (SIGMA_FLOOR, true)
        }
        Ok(s) => (s, false),
        Err(e) => return Err(e),
    };
    let logdet_term = -0.5 * terms.iter().map(|t| t.log_det).sum::<f64>();
    let value = if degenerate {
        assemble(problem, &terms, sigma).total
    } else {
        kernel(problem, sigma) - problem.dataset.n_obs() as f64 + logdet_term
    };
    Ok(ProfiledLoglik {
        value,
        sigma_hat: sigma,
        degenerate,
        logdet_term,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_logistic4;
    use crate::types::Cluster;
    use approx::assert_relative_eq;

    fn logistic_design() -> DesignMap {
        let g = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        DesignMap::from_matrices(&DMatrix::identity(4, 4), &g).unwrap()
    }

    #[test]
    fn sigma_hat_examples() {
        assert_eq!(sigma_hat(&[2.0, 2.0], 2).unwrap(), 1.0);
        let (n, m, s) = (30usize, 5usize, 0.7);
        let h = vec![2.0 * n as f64 * s / m as f64; m];
        assert_relative_eq!(sigma_hat(&h, n).unwrap(), s, epsilon = 1e-14);
        assert!(matches!(sigma_hat(&[0.0, 0.0], 4), Err(Error::Degenerate(_))));
    }

    #[test]
    fn exact_fit_limit() {
        let model = builtin_logistic4();
        let design = logistic_design();
        let beta = [70.0, 10.0, 3.0, 10.0];
        let xs = [1.0, 5.0, 10.0, 15.0, 19.0];
        let y: Vec<f64> = xs.iter().map(|&x| model.value(&beta, &[x]).unwrap()).collect();
        let ds = ClusteredDataset::new(
            vec![Cluster::new("a", y, xs.iter().map(|&x| vec![x]).collect()).unwrap()],
            vec![],
        )
        .unwrap();
        let spec = VarianceSpec::diagonal(1).unwrap();
        let problem = LikelihoodProblem {
            dataset: &ds,
            model: &*model,
            design: &design,
            variance: spec,
            tau: QuantileLevel::new(0.5).unwrap(),
            omega: 1.0,
            mode: ModeOptions::default(),
        };
        let theta = ThetaVector::new(
            DVector::from_column_slice(&beta),
            DVector::from_element(1, 0.5 * 1e-12f64.ln()),
        );
        let sigma = 0.3;
        let (ll, _) = laplace_loglik(&problem, &theta, sigma, None).unwrap();
        let limit = 5.0 * (0.25f64 / sigma).ln();
        assert!((ll.total - limit).abs() < 1e-8);
        assert_relative_eq!(ll.total, ll.kernel_term + ll.logdet_term + ll.h_term, epsilon = 1e-12);
        assert!(ll.logdet_term <= 0.0);

        assert!(matches!(
            profiled_loglik(&problem, &theta, None, false),
            Err(Error::Degenerate(_))
        ));
        let floored = profiled_loglik(&problem, &theta, None, true).unwrap();
        assert!(floored.degenerate);
        assert!(floored.value.is_finite());
    }
}
