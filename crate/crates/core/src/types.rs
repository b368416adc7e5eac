//! Domain data model: clustered data, quantile levels, the unconstrained
//! parameterization of the scaled random-effects covariance, and fit results.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidParameter(format!(
                "quantile level must lie in (0, 1), got {tau}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// One cluster (group) of observations. Covariates are stored row-major,
/// one row of `d` raw covariates per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    id: String,
    y: Vec<f64>,
    x: Vec<f64>,
    d: usize,
}

impl Cluster {
    pub fn new(id: impl Into<String>, y: Vec<f64>, x_rows: Vec<Vec<f64>>) -> Result<Self> {
        let id = id.into();
        if y.is_empty() {
            return Err(Error::InvalidData(format!("cluster {id} has no observations")));
        }
        if x_rows.len() != y.len() {
            return Err(Error::InvalidData(format!(
                "cluster {id}: {} covariate rows for {} responses",
                x_rows.len(),
                y.len()
            )));
        }
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "cluster {id}: non-finite response at observation {j}"
            )));
        }
        let d = x_rows[0].len();
        let mut x = Vec::with_capacity(d * y.len());
        for (j, row) in x_rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidData(format!(
                    "cluster {id}: covariate row {j} has {} columns, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "cluster {id}: non-finite covariate at observation {j}"
                )));
            }
            x.extend(row);
        }
        Ok(Self { id, y, x, d })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.d
    }

    /// Covariate row of observation `j`.
    #[inline]
    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn x_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |j| self.x_row(j))
    }

    pub(crate) fn relabeled(&self, id: String) -> Self {
        Self { id, ..self.clone() }
    }
}

/// Two-level nested data: `M` clusters holding `N` observations in total.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    covariate_names: Vec<String>,
    n_obs: usize,
}

impl ClusteredDataset {
    pub fn new(clusters: Vec<Cluster>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidData("dataset has no clusters".into()));
        }
        let d = clusters[0].n_covariates();
        if !covariate_names.is_empty() && covariate_names.len() != d {
            return Err(Error::InvalidData(format!(
                "{} covariate names for {d} covariate columns",
                covariate_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &clusters {
            if c.n_covariates() != d {
                return Err(Error::InvalidData(format!(
                    "cluster {} has {} covariates, expected {d}",
                    c.id(),
                    c.n_covariates()
                )));
            }
            if !seen.insert(c.id().to_string()) {
                return Err(Error::InvalidData(format!("duplicate cluster id {}", c.id())));
            }
        }
        let n_obs = clusters.iter().map(Cluster::len).sum();
        Ok(Self {
            clusters,
            covariate_names,
            n_obs,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Total number of observations `N`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Number of clusters `M`.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.clusters[0].n_covariates()
    }
}

/// Structure imposed on the scaled covariance Ψ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceStructure {
    Diagonal,
    General,
}

/// Covariance structure together with the random-effect dimension `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarianceSpec {
    structure: CovarianceStructure,
    q: usize,
}

impl VarianceSpec {
    pub fn new(structure: CovarianceStructure, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter(
                "random-effect dimension must be at least 1".into(),
            ));
        }
        Ok(Self { structure, q })
    }

    pub fn diagonal(q: usize) -> Result<Self> {
        Self::new(CovarianceStructure::Diagonal, q)
    }

    pub fn general(q: usize) -> Result<Self> {
        Self::new(CovarianceStructure::General, q)
    }

    pub fn structure(&self) -> CovarianceStructure {
        self.structure
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of free parameters `m` in ξ.
    pub fn m(&self) -> usize {
        match self.structure {
            CovarianceStructure::Diagonal => self.q,
            CovarianceStructure::General => self.q * (self.q + 1) / 2,
        }
    }

    /// ξ that reproduces a given SPD Ψ; the inverse of [`materialize_psi`].
    pub fn xi_from_psi(&self, psi: &DMatrix<f64>) -> Result<DVector<f64>> {
        let q = self.q;
        if psi.nrows() != q || psi.ncols() != q {
            return Err(Error::Dimension(format!("Ψ must be {q}×{q}")));
        }
        match self.structure {
            CovarianceStructure::Diagonal => {
                let mut xi = DVector::zeros(q);
                for k in 0..q {
                    let v = psi[(k, k)];
                    if v <= 0.0 || !v.is_finite() {
                        return Err(Error::Numerical("Ψ has a non-positive diagonal".into()));
                    }
                    xi[k] = 0.5 * v.ln();
                }
                Ok(xi)
            }
            CovarianceStructure::General => {
                let l = psi
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("Ψ is not positive definite".into()))?
                    .unpack();
                let mut xi = DVector::zeros(self.m());
                for k in 0..q {
                    xi[k] = l[(k, k)].ln();
                }
                let mut idx = q;
                for col in 0..q {
                    for row in (col + 1)..q {
                        xi[idx] = l[(row, col)];
                        idx += 1;
                    }
                }
                Ok(xi)
            }
        }
    }
}

/// Map the unconstrained vector ξ to the scaled covariance Ψ.
///
/// Diagonal: `Ψ = diag(exp(2ξ))`. General (log-Cholesky): `Ψ = L Lᵀ` with
/// `L_kk = exp(ξ_k)` for the first `q` entries and the strict lower triangle
/// filled column-major from the remaining entries.
pub fn materialize_psi(xi: &[f64], spec: &VarianceSpec) -> Result<DMatrix<f64>> {
    if xi.len() != spec.m() {
        return Err(Error::Dimension(format!(
            "ξ has length {}, expected {}",
            xi.len(),
            spec.m()
        )));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite entry in ξ".into()));
    }
    let q = spec.q();
    match spec.structure() {
        CovarianceStructure::Diagonal => Ok(DMatrix::from_diagonal(&DVector::from_iterator(
            q,
            xi.iter().map(|v| (2.0 * v).exp()),
        ))),
        CovarianceStructure::General => {
            let l = log_cholesky_factor(xi, q);
            Ok(&l * l.transpose())
        }
    }
}

fn log_cholesky_factor(xi: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    for k in 0..q {
        l[(k, k)] = xi[k].exp();
    }
    let mut idx = q;
    for col in 0..q {
        for row in (col + 1)..q {
            l[(row, col)] = xi[idx];
            idx += 1;
        }
    }
    l
}

/// Relative precision factor Δ with `ΔᵀΔ = Ψ⁻¹`, computed as `L⁻¹` for the
/// lower Cholesky factor `Ψ = L Lᵀ`.
pub fn precision_factor(psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = psi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Ψ is not symmetric positive definite".into()))?
        .unpack();
    let q = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))
}

/// Ψ together with the factorizations the per-cluster computations need.
#[derive(Debug, Clone)]
pub struct ScaledCovariance {
    psi: DMatrix<f64>,
    chol: DMatrix<f64>,
    delta: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl ScaledCovariance {
    pub fn new(psi: DMatrix<f64>) -> Result<Self> {
        if psi.nrows() != psi.ncols() || psi.nrows() == 0 {
            return Err(Error::Dimension("Ψ must be a non-empty square matrix".into()));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite entry in Ψ".into()));
        }
        let chol = psi
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Ψ is not symmetric positive definite".into()))?
            .unpack();
        Self::from_factor(chol)
    }

    /// Builds from a lower-triangular factor with positive diagonal.
    fn from_factor(chol: DMatrix<f64>) -> Result<Self> {
        let q = chol.nrows();
        if chol.iter().any(|v| !v.is_finite()) || (0..q).any(|k| !(chol[(k, k)] > 0.0)) {
            return Err(Error::Numerical("Ψ is numerically singular".into()));
        }
        let delta = chol
            .solve_lower_triangular(&DMatrix::identity(q, q))
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        // ΔᵀΔ keeps Ψ⁻¹ symmetric positive semidefinite in floating point
        let inverse = delta.transpose() * &delta;
        if inverse.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("Ψ is numerically singular".into()));
        }
        Ok(Self {
            psi: &chol * chol.transpose(),
            chol,
            delta,
            inverse,
        })
    }

    pub fn from_xi(xi: &[f64], spec: &VarianceSpec) -> Result<Self> {
        // validates length and finiteness
        materialize_psi(xi, spec)?;
        let q = spec.q();
        let factor = match spec.structure() {
            CovarianceStructure::Diagonal => {
                DMatrix::from_diagonal(&DVector::from_iterator(q, xi.iter().map(|v| v.exp())))
            }
            CovarianceStructure::General => log_cholesky_factor(xi, q),
        };
        Self::from_factor(factor)
    }

    pub fn q(&self) -> usize {
        self.psi.nrows()
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Lower Cholesky factor of Ψ.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Precision factor Δ = L⁻¹.
    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `uᵀΨ⁻¹u = ‖Δu‖²`.
    pub fn quad(&self, u: &[f64]) -> f64 {
        let q = u.len();
        let mut acc = 0.0;
        for a in 0..q {
            let mut row = 0.0;
            for b in 0..=a {
                row += self.delta[(a, b)] * u[b];
            }
            acc += row * row;
        }
        acc
    }
}

/// Optimization parameter θ = (β, ξ).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub beta: DVector<f64>,
    pub xi: DVector<f64>,
}

impl ThetaVector {
    pub fn new(beta: DVector<f64>, xi: DVector<f64>) -> Self {
        Self { beta, xi }
    }

    pub fn from_slice(values: &[f64], p: usize) -> Self {
        Self {
            beta: DVector::from_column_slice(&values[..p]),
            xi: DVector::from_column_slice(&values[p..]),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.beta.iter().chain(self.xi.iter()).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which minimizer produced an outer iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    QuasiNewton,
    Simplex,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::QuasiNewton => "bfgs",
            OptimizerKind::Simplex => "nelder-mead",
        }
    }
}

/// Diagnostics for one outer (ω) iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub omega: f64,
    /// ℓ at the iteration's starting θ, evaluated at this iteration's ω.
    pub loglik_start: f64,
    /// ℓ after the θ update.
    pub loglik: f64,
    pub optimizer: OptimizerKind,
    /// Objective evaluations spent by every optimizer attempted this iteration.
    pub evaluations: usize,
    /// True when the first optimizer in the order failed and a fallback ran.
    pub fallback: bool,
}

/// Estimates returned by the fitter.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub tau: QuantileLevel,
    pub theta: ThetaVector,
    pub beta_hat: DVector<f64>,
    /// Scaled covariance Ψ̂.
    pub psi_hat: DMatrix<f64>,
    pub sigma_hat: f64,
    /// Σ̂ = σ̂ Ψ̂.
    pub sigma_cov_hat: DMatrix<f64>,
    /// Conditional modes, one row per cluster in dataset order.
    pub u_modes: DMatrix<f64>,
    pub cluster_ids: Vec<String>,
    pub loglik: f64,
    pub final_omega: f64,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    pub outer_iterations: usize,
}
