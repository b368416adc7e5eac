//! Nonlinear quantile curves `f(φ, x)` and the linear map
//! `φ_ij = F_ij β + G_ij u_i` from fixed and random effects to the curve's
//! parameters.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::types::Cluster;

/// Exponent arguments are clamped to this magnitude so that extreme probes
/// from the outer optimizer keep the objective finite.
pub const EXP_CLAMP: f64 = 700.0;

#[inline]
fn guarded_exp(a: f64) -> f64 {
    a.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// A smooth nonlinear function of an `s`-dimensional parameter φ and a row of
/// covariates.
pub trait QuantileModel: Send + Sync {
    fn name(&self) -> &str;

    /// Dimension `s` of φ.
    fn n_phi(&self) -> usize;

    fn value(&self, phi: &[f64], x: &[f64]) -> Result<f64>;

    /// ∂f/∂φ written into `grad`. The default uses central differences.
    fn gradient(&self, phi: &[f64], x: &[f64], grad: &mut [f64]) -> Result<()> {
        central_difference_gradient(self, phi, x, grad, 1e-6)
    }
}

pub type ModelSpec = Arc<dyn QuantileModel>;

impl fmt::Debug for dyn QuantileModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "QuantileModel({})", self.name())
    }
}

/// Central finite-difference gradient with step `rel_step·max(1, |φ_k|)`.
pub fn central_difference_gradient<M: QuantileModel + ?Sized>(
    model: &M,
    phi: &[f64],
    x: &[f64],
    grad: &mut [f64],
    rel_step: f64,
) -> Result<()> {
    let mut probe = phi.to_vec();
    for k in 0..phi.len() {
        let h = rel_step * phi[k].abs().max(1.0);
        probe[k] = phi[k] + h;
        let up = model.value(&probe, x)?;
        probe[k] = phi[k] - h;
        let down = model.value(&probe, x)?;
        probe[k] = phi[k];
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(())
}

fn check_phi(name: &str, phi: &[f64], s: usize) -> Result<()> {
    if phi.len() != s {
        return Err(Error::Dimension(format!(
            "{name} expects {s} parameters, got {}",
            phi.len()
        )));
    }
    Ok(())
}

/// Four-parameter logistic `(φ₁ - φ₄)/(1 + exp((φ₂ - x)/φ₃)) + φ₄`.
#[derive(Debug, Clone, Copy)]
pub struct Logistic4 {
    /// Covariate column holding the curve's argument.
    pub argument: usize,
}

/// Three-parameter logistic `φ₁/(1 + exp((φ₂ - x)/φ₃))`.
#[derive(Debug, Clone, Copy)]
pub struct Logistic3 {
    pub argument: usize,
}

/// Biexponential `φ₁ exp(-exp(φ₂) x) + φ₃ exp(-exp(φ₄) x)`.
#[derive(Debug, Clone, Copy)]
pub struct Biexp {
    pub argument: usize,
}

/// Logistic weight `g = 1/(1 + exp((mid - x)/scale))`.
#[inline]
fn logistic_weight(mid: f64, scale: f64, x: f64) -> Result<f64> {
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Domain(format!("logistic scale must be non-zero, got {scale}")));
    }
    Ok(1.0 / (1.0 + guarded_exp((mid - x) / scale)))
}

impl QuantileModel for Logistic4 {
    fn name(&self) -> &str {
        "logistic4"
    }

    fn n_phi(&self) -> usize {
        4
    }

    fn value(&self, phi: &[f64], x: &[f64]) -> Result<f64> {
        check_phi(self.name(), phi, 4)?;
        let g = logistic_weight(phi[1], phi[2], x[self.argument])?;
        Ok((phi[0] - phi[3]) * g + phi[3])
    }

    fn gradient(&self, phi: &[f64], x: &[f64], grad: &mut [f64]) -> Result<()> {
        check_phi(self.name(), phi, 4)?;
        let t = x[self.argument];
        let g = logistic_weight(phi[1], phi[2], t)?;
        let amp = phi[0] - phi[3];
        // e/(1+e)² = g(1-g)
        let w = g * (1.0 - g);
        grad[0] = g;
        grad[1] = -amp * w / phi[2];
        grad[2] = amp * w * (phi[1] - t) / (phi[2] * phi[2]);
        grad[3] = 1.0 - g;
        Ok(())
    }
}

impl QuantileModel for Logistic3 {
    fn name(&self) -> &str {
        "logistic3"
    }

    fn n_phi(&self) -> usize {
        3
    }

    fn value(&self, phi: &[f64], x: &[f64]) -> Result<f64> {
        check_phi(self.name(), phi, 3)?;
        Ok(phi[0] * logistic_weight(phi[1], phi[2], x[self.argument])?)
    }

    fn gradient(&self, phi: &[f64], x: &[f64], grad: &mut [f64]) -> Result<()> {
        check_phi(self.name(), phi, 3)?;
        let t = x[self.argument];
        let g = logistic_weight(phi[1], phi[2], t)?;
        let w = g * (1.0 - g);
        grad[0] = g;
        grad[1] = -phi[0] * w / phi[2];
        grad[2] = phi[0] * w * (phi[1] - t) / (phi[2] * phi[2]);
        Ok(())
    }
}

/// `exp(-rate·t)` with the argument floored: below -700 the term is zero.
#[inline]
fn decay(rate: f64, t: f64) -> f64 {
    let a = -rate * t;
    if a < -EXP_CLAMP {
        0.0
    } else {
        a.min(EXP_CLAMP).exp()
    }
}

impl QuantileModel for Biexp {
    fn name(&self) -> &str {
        "biexp"
    }

    fn n_phi(&self) -> usize {
        4
    }

    fn value(&self, phi: &[f64], x: &[f64]) -> Result<f64> {
        check_phi(self.name(), phi, 4)?;
        let t = x[self.argument];
        Ok(phi[0] * decay(guarded_exp(phi[1]), t) + phi[2] * decay(guarded_exp(phi[3]), t))
    }

    fn gradient(&self, phi: &[f64], x: &[f64], grad: &mut [f64]) -> Result<()> {
        check_phi(self.name(), phi, 4)?;
        let t = x[self.argument];
        let k1 = guarded_exp(phi[1]);
        let k2 = guarded_exp(phi[3]);
        let e1 = decay(k1, t);
        let e2 = decay(k2, t);
        grad[0] = e1;
        grad[1] = -phi[0] * e1 * k1 * t;
        grad[2] = e2;
        grad[3] = -phi[2] * e2 * k2 * t;
        Ok(())
    }
}

pub fn builtin_logistic4() -> ModelSpec {
    Arc::new(Logistic4 { argument: 0 })
}

pub fn builtin_logistic3() -> ModelSpec {
    Arc::new(Logistic3 { argument: 0 })
}

pub fn builtin_biexp() -> ModelSpec {
    Arc::new(Biexp { argument: 0 })
}

/// Look up a builtin curve by name, reading its argument from `argument`.
pub fn builtin_by_name(name: &str, argument: usize) -> Option<ModelSpec> {
    match name {
        "logistic4" => Some(Arc::new(Logistic4 { argument })),
        "logistic3" => Some(Arc::new(Logistic3 { argument })),
        "biexp" => Some(Arc::new(Biexp { argument })),
        _ => None,
    }
}

/// A user-supplied curve. Without an analytic gradient, derivatives come from
/// central differences.
pub struct CustomModel<F> {
    name: String,
    s: usize,
    f: F,
}

impl<F> CustomModel<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, s: usize, f: F) -> Self {
        Self {
            name: name.into(),
            s,
            f,
        }
    }
}

impl<F> QuantileModel for CustomModel<F>
where
    F: Fn(&[f64], &[f64]) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn n_phi(&self) -> usize {
        self.s
    }

    fn value(&self, phi: &[f64], x: &[f64]) -> Result<f64> {
        check_phi(&self.name, phi, self.s)?;
        let v = (self.f)(phi, x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain(format!("{} is not finite at φ = {phi:?}", self.name)))
        }
    }
}

/// Covariate-dependent factor multiplying a design-matrix entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    One,
    /// Product of the listed covariate columns.
    Product(Vec<usize>),
}

impl Factor {
    #[inline]
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Factor::One => 1.0,
            Factor::Product(cols) => cols.iter().map(|&c| x[c]).product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    row: usize,
    col: usize,
    coef: f64,
    factor: Factor,
}

/// Declarative description of one component φ_k: the factors of its fixed
/// part (each with its own coefficient in β) and whether it carries its own
/// random effect.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSpec {
    pub fixed: Vec<Factor>,
    pub random: bool,
}

impl PhiSpec {
    pub fn intercept(random: bool) -> Self {
        Self {
            fixed: vec![Factor::One],
            random,
        }
    }
}

/// Sparse builder for the per-observation matrices `F_ij` (s×p) and
/// `G_ij` (s×q).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMap {
    s: usize,
    p: usize,
    q: usize,
    fixed: Vec<Entry>,
    random: Vec<Entry>,
}

impl DesignMap {
    /// Constant design matrices.
    pub fn from_matrices(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Self> {
        if f.nrows() != g.nrows() {
            return Err(Error::Dimension(format!(
                "F has {} rows but G has {}",
                f.nrows(),
                g.nrows()
            )));
        }
        let collect = |m: &DMatrix<f64>| {
            let mut out = Vec::new();
            for row in 0..m.nrows() {
                for col in 0..m.ncols() {
                    let v = m[(row, col)];
                    if v != 0.0 {
                        out.push(Entry {
                            row,
                            col,
                            coef: v,
                            factor: Factor::One,
                        });
                    }
                }
            }
            out
        };
        Ok(Self {
            s: f.nrows(),
            p: f.ncols(),
            q: g.ncols(),
            fixed: collect(f),
            random: collect(g),
        })
    }

    /// One specification per φ component; β indices are assigned in order
    /// of appearance, random-effect indices in order of flagged components.
    pub fn from_phi_specs(specs: &[PhiSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Dimension("design needs at least one φ component".into()));
        }
        let mut fixed = Vec::new();
        let mut random = Vec::new();
        let (mut p, mut q) = (0, 0);
        for (row, spec) in specs.iter().enumerate() {
            for factor in &spec.fixed {
                fixed.push(Entry {
                    row,
                    col: p,
                    coef: 1.0,
                    factor: factor.clone(),
                });
                p += 1;
            }
            if spec.random {
                random.push(Entry {
                    row,
                    col: q,
                    coef: 1.0,
                    factor: Factor::One,
                });
                q += 1;
            }
        }
        Ok(Self {
            s: specs.len(),
            p,
            q,
            fixed,
            random,
        })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// The same map with the random part removed (`φ = Fβ`).
    pub fn fixed_only(&self) -> Self {
        Self {
            q: 0,
            random: Vec::new(),
            ..self.clone()
        }
    }

    pub fn fixed_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.s, self.p);
        for e in &self.fixed {
            m[(e.row, e.col)] += e.coef * e.factor.eval(x);
        }
        m
    }

    pub fn random_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.s, self.q);
        for e in &self.random {
            m[(e.row, e.col)] += e.coef * e.factor.eval(x);
        }
        m
    }

    /// Writes `F β + G u` into `phi`; `u` may be empty to mean zero.
    #[inline]
    pub fn phi_into(&self, beta: &[f64], u: &[f64], x: &[f64], phi: &mut [f64]) {
        phi.iter_mut().for_each(|v| *v = 0.0);
        for e in &self.fixed {
            phi[e.row] += e.coef * e.factor.eval(x) * beta[e.col];
        }
        if !u.is_empty() {
            for e in &self.random {
                phi[e.row] += e.coef * e.factor.eval(x) * u[e.col];
            }
        }
    }

    /// Row of `∂f/∂uᵀ = (∂f/∂φ)ᵀ G`.
    #[inline]
    pub fn random_chain(&self, dphi: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &self.random {
            out[e.col] += dphi[e.row] * e.coef * e.factor.eval(x);
        }
    }

    /// Row of `∂f/∂βᵀ = (∂f/∂φ)ᵀ F`.
    #[inline]
    pub fn fixed_chain(&self, dphi: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for e in &self.fixed {
            out[e.col] += dphi[e.row] * e.coef * e.factor.eval(x);
        }
    }

    pub fn check(&self, model: &dyn QuantileModel, n_covariates: usize) -> Result<()> {
        if model.n_phi() != self.s {
            return Err(Error::Dimension(format!(
                "model {} has {} parameters but the design produces {}",
                model.name(),
                model.n_phi(),
                self.s
            )));
        }
        let max_col = self
            .fixed
            .iter()
            .chain(&self.random)
            .filter_map(|e| match &e.factor {
                Factor::One => None,
                Factor::Product(c) => c.iter().max().copied(),
            })
            .max();
        if let Some(c) = max_col {
            if c >= n_covariates {
                return Err(Error::Dimension(format!(
                    "design references covariate column {c} but data has {n_covariates}"
                )));
            }
        }
        Ok(())
    }
}

/// φ for one observation.
pub fn eval_phi(design: &DesignMap, beta: &[f64], u: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if beta.len() != design.p() {
        return Err(Error::Dimension(format!(
            "β has length {}, design expects {}",
            beta.len(),
            design.p()
        )));
    }
    if u.len() != design.q() {
        return Err(Error::Dimension(format!(
            "u has length {}, design expects {}",
            u.len(),
            design.q()
        )));
    }
    let mut phi = vec![0.0; design.s()];
    design.phi_into(beta, u, x, &mut phi);
    Ok(phi)
}

/// Jacobian of the cluster's fitted values with respect to `u` (n_i × q).
pub fn jac_u(
    model: &dyn QuantileModel,
    design: &DesignMap,
    beta: &[f64],
    u: &[f64],
    cluster: &Cluster,
) -> Result<DMatrix<f64>> {
    let n = cluster.len();
    let q = design.q();
    let mut jac = DMatrix::zeros(n, q);
    let mut phi = vec![0.0; design.s()];
    let mut dphi = vec![0.0; design.s()];
    let mut row = vec![0.0; q];
    if u.len() != q || beta.len() != design.p() {
        return Err(Error::Dimension("β or u does not match the design".into()));
    }
    for j in 0..n {
        let x = cluster.x_row(j);
        design.phi_into(beta, u, x, &mut phi);
        model.gradient(&phi, x, &mut dphi)?;
        if dphi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite derivative at observation {j}"
            )));
        }
        design.random_chain(&dphi, x, &mut row);
        for k in 0..q {
            jac[(j, k)] = row[k];
        }
    }
    Ok(jac)
}
