//! Per-cluster penalized objective
//!
//! `h(u) = rᵀAr/ω + bᵀr + cᵀ1 + uᵀΨ⁻¹u = 2 Σ_j κ(r_j) + uᵀΨ⁻¹u`
//!
//! and the damped Gauss-Newton iteration for its minimizer, the conditional
//! mode û_i. Each step linearizes the residuals and minimizes the resulting
//! convex model by ridge-type solves with the branch coefficients `A`, `b`
//! frozen, refreshed between solves; the step is then halved until `h`
//! decreases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::loss::{coeffs_for_sign, quad_coeffs, sign_of, QuadCoeffs};
use crate::model::{DesignMap, QuantileModel};
use crate::types::{Cluster, QuantileLevel, ScaledCovariance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOptions {
    /// Stop when `‖∇h‖_∞ ≤ tol·max(1, |h|)`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeStatus {
    Converged,
    IterationLimit,
    /// No step length in the halving sequence decreased `h`.
    Stalled,
}

/// The cluster quantities at the returned mode.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub u: DVector<f64>,
    pub r: Vec<f64>,
    pub coeffs: QuadCoeffs,
    pub h_value: f64,
    /// Ḧ = (1/ω) JᵀAJ + Ψ⁻¹, half the Gauss-Newton Hessian of `h`.
    pub hess: DMatrix<f64>,
    pub jac: DMatrix<f64>,
    pub iterations: usize,
    pub status: ModeStatus,
}

/// `h` for one cluster at fixed θ, ω and τ.
pub struct ClusterObjective<'a> {
    pub model: &'a dyn QuantileModel,
    pub design: &'a DesignMap,
    pub beta: &'a [f64],
    pub cov: &'a ScaledCovariance,
    pub cluster: &'a Cluster,
    pub omega: f64,
    pub tau: QuantileLevel,
}

impl ClusterObjective<'_> {
    fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.design.q() || self.cov.q() != self.design.q() {
            return Err(Error::Dimension(format!(
                "u has length {}, Ψ is {}×{}, design has q = {}",
                u.len(),
                self.cov.q(),
                self.cov.q(),
                self.design.q()
            )));
        }
        if !(self.omega > 0.0) {
            return Err(Error::InvalidParameter(format!("ω must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    fn residuals(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut phi = vec![0.0; self.design.s()];
        let y = self.cluster.y();
        let mut r = Vec::with_capacity(y.len());
        for (j, &yj) in y.iter().enumerate() {
            let x = self.cluster.x_row(j);
            self.design.phi_into(self.beta, u, x, &mut phi);
            let f = self.model.value(&phi, x)?;
            if !f.is_finite() {
                return Err(Error::Numerical(format!("non-finite fitted value at observation {j}")));
            }
            r.push(yj - f);
        }
        Ok(r)
    }

    fn residuals_and_jac(&self, u: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let s = self.design.s();
        let q = self.design.q();
        let n = self.cluster.len();
        let mut phi = vec![0.0; s];
        let mut dphi = vec![0.0; s];
        let mut row = vec![0.0; q];
        let mut r = Vec::with_capacity(n);
        let mut jac = DMatrix::zeros(n, q);
        for j in 0..n {
            let x = self.cluster.x_row(j);
            self.design.phi_into(self.beta, u, x, &mut phi);
            let f = self.model.value(&phi, x)?;
            self.model.gradient(&phi, x, &mut dphi)?;
            if !f.is_finite() || dphi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite value or derivative at observation {j}"
                )));
            }
            self.design.random_chain(&dphi, x, &mut row);
            for k in 0..q {
                jac[(j, k)] = row[k];
            }
            r.push(self.cluster.y()[j] - f);
        }
        Ok((r, jac))
    }

    fn penalty(&self, u: &[f64]) -> f64 {
        self.cov.quad(u)
    }

    fn h_from_residuals(&self, u: &[f64], r: &[f64]) -> f64 {
        let mut loss = 0.0;
        for &rj in r {
            let (a, b, c) = coeffs_for_sign(self.tau, self.omega, sign_of(self.tau, self.omega, rj));
            loss += a * rj * rj / self.omega + b * rj + c;
        }
        loss + self.penalty(u)
    }

    /// `h(u)` with the branch coefficients taken from the residuals at `u`.
    pub fn h_eval(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        let r = self.residuals(u)?;
        Ok(self.h_from_residuals(u, &r))
    }

    fn grad_from(&self, u: &[f64], r: &[f64], jac: &DMatrix<f64>, coeffs: &QuadCoeffs) -> DVector<f64> {
        let n = r.len();
        let weights = DVector::from_iterator(
            n,
            (0..n).map(|j| 2.0 / self.omega * coeffs.a_diag[j] * r[j] + coeffs.b[j]),
        );
        let uv = DVector::from_column_slice(u);
        -(jac.transpose() * weights) + 2.0 * (self.cov.inverse() * uv)
    }

    fn half_hessian(&self, jac: &DMatrix<f64>, coeffs: &QuadCoeffs) -> DMatrix<f64> {
        let q = jac.ncols();
        let mut m = self.cov.inverse().clone();
        for (j, &a) in coeffs.a_diag.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for k in 0..q {
                let jk = jac[(j, k)] / self.omega;
                for l in 0..q {
                    m[(k, l)] += jk * jac[(j, l)];
                }
            }
        }
        m
    }

    /// `-Jᵀ[(2/ω)A r + b] + 2Ψ⁻¹u`.
    pub fn h_grad(&self, u: &[f64]) -> Result<DVector<f64>> {
        self.check(u)?;
        let (r, jac) = self.residuals_and_jac(u)?;
        let coeffs = quad_coeffs(self.tau, self.omega, &r);
        Ok(self.grad_from(u, &r, &jac, &coeffs))
    }

    /// Gauss-Newton Hessian `(2/ω)JᵀAJ + 2Ψ⁻¹`; the term involving second
    /// derivatives of `f` is dropped.
    pub fn h_hess_gn(&self, u: &[f64]) -> Result<DMatrix<f64>> {
        self.check(u)?;
        let (r, jac) = self.residuals_and_jac(u)?;
        let coeffs = quad_coeffs(self.tau, self.omega, &r);
        Ok(2.0 * self.half_hessian(&jac, &coeffs))
    }

    /// `2κ'(r)`: the branch-wise weight `(2/ω)·a·r + b` of one residual.
    #[inline]
    fn psi_weight(&self, r: f64) -> f64 {
        let t = self.tau.value();
        let w = self.omega;
        if r <= (t - 1.0) * w {
            2.0 * (t - 1.0)
        } else if r >= t * w {
            2.0 * t
        } else {
            2.0 * r / w
        }
    }

    #[inline]
    fn in_band(&self, r: f64) -> bool {
        let t = self.tau.value();
        r > (t - 1.0) * self.omega && r < t * self.omega
    }

    /// Residuals at `u` into `r`; with `jac`, also the row-major n×q Jacobian.
    fn fill(&self, u: &[f64], ws: &mut Workspace, jac: Option<&mut [f64]>) -> Result<()> {
        let q = u.len();
        let y = self.cluster.y();
        let Workspace { phi, dphi, row, r, .. } = ws;
        match jac {
            None => {
                for (j, &yj) in y.iter().enumerate() {
                    let x = self.cluster.x_row(j);
                    self.design.phi_into(self.beta, u, x, phi);
                    let f = self.model.value(phi, x)?;
                    if !f.is_finite() {
                        return Err(Error::Numerical(format!("non-finite fitted value at observation {j}")));
                    }
                    r[j] = yj - f;
                }
            }
            Some(jac) => {
                for (j, &yj) in y.iter().enumerate() {
                    let x = self.cluster.x_row(j);
                    self.design.phi_into(self.beta, u, x, phi);
                    let f = self.model.value(phi, x)?;
                    self.model.gradient(phi, x, dphi)?;
                    if !f.is_finite() || dphi.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "non-finite value or derivative at observation {j}"
                        )));
                    }
                    self.design.random_chain(dphi, x, row);
                    jac[j * q..(j + 1) * q].copy_from_slice(row);
                    r[j] = yj - f;
                }
            }
        }
        Ok(())
    }

    /// Minimizer over δ of the model with linearized residuals,
    /// `Σ 2κ(r - Jδ) + (u+δ)ᵀΨ⁻¹(u+δ)`, written into `ws.delta`.
    ///
    /// Each inner iteration freezes `A`, `b` at the linearized residuals,
    /// takes the ridge-type Newton step and follows it with an exact line
    /// search; the model is convex and piecewise quadratic, so the search
    /// only has to locate the root of a monotone piecewise-linear slope.
    fn linearized_step(&self, u: &[f64], r: &[f64], jac: &[f64], ws: &mut Workspace) -> Result<()> {
        let n = r.len();
        let q = u.len();
        let t = self.tau.value();
        let w = self.omega;
        let inv = self.cov.inverse();
        let Workspace {
            rho,
            delta,
            shifted,
            grad,
            dir,
            hess,
            e,
            knots,
            ..
        } = ws;
        delta.iter_mut().for_each(|v| *v = 0.0);
        rho.copy_from_slice(r);

        for _ in 0..100 {
            for k in 0..q {
                shifted[k] = u[k] + delta[k];
            }
            for k in 0..q {
                let mut acc = 0.0;
                for l in 0..q {
                    acc += inv[(k, l)] * shifted[l];
                }
                grad[k] = 2.0 * acc;
                for l in 0..q {
                    hess[k * q + l] = 2.0 * inv[(k, l)];
                }
            }
            for j in 0..n {
                let jr = &jac[j * q..(j + 1) * q];
                let wj = self.psi_weight(rho[j]);
                for k in 0..q {
                    grad[k] -= jr[k] * wj;
                }
                if self.in_band(rho[j]) {
                    for k in 0..q {
                        let jk = 2.0 * jr[k] / w;
                        for l in 0..q {
                            hess[k * q + l] += jk * jr[l];
                        }
                    }
                }
            }
            for k in 0..q {
                dir[k] = -grad[k];
            }
            if !cholesky_solve(hess, q, dir) {
                return Err(Error::Numerical("Gauss-Newton matrix is not positive definite".into()));
            }
            let slope0: f64 = (0..q).map(|k| dir[k] * grad[k]).sum();
            if !(slope0 < 0.0) {
                break;
            }

            // φ'(s) = -Σ e_j ψ(ρ_j - s e_j) + 2dᵀΨ⁻¹(u+δ) + 2s dᵀΨ⁻¹d, nondecreasing in s
            let (mut pen_lin, mut pen_quad) = (0.0, 0.0);
            for k in 0..q {
                for l in 0..q {
                    pen_lin += 2.0 * dir[k] * inv[(k, l)] * shifted[l];
                    pen_quad += 2.0 * dir[k] * inv[(k, l)] * dir[l];
                }
            }
            knots.clear();
            for j in 0..n {
                e[j] = (0..q).map(|k| jac[j * q + k] * dir[k]).sum();
                if e[j] != 0.0 {
                    for edge in [(t - 1.0) * w, t * w] {
                        let sv = (rho[j] - edge) / e[j];
                        if sv > 0.0 && sv.is_finite() {
                            knots.push(sv);
                        }
                    }
                }
            }
            knots.sort_unstable_by(f64::total_cmp);
            let dphi = |sv: f64| -> f64 {
                let mut acc = pen_lin + sv * pen_quad;
                for j in 0..n {
                    acc -= e[j] * self.psi_weight(rho[j] - sv * e[j]);
                }
                acc
            };
            let (mut s_lo, mut d_lo) = (0.0, slope0);
            let mut s_star = None;
            for &k in knots.iter() {
                let dk = dphi(k);
                if dk >= 0.0 {
                    s_star = Some(if dk == d_lo { k } else { s_lo - d_lo * (k - s_lo) / (dk - d_lo) });
                    break;
                }
                s_lo = k;
                d_lo = dk;
            }
            let s_star = match s_star {
                Some(v) => v,
                // past the last knot no residual with e_j ≠ 0 is in the band,
                // so only the penalty curves the model
                None if pen_quad > 0.0 => s_lo - d_lo / pen_quad,
                None => break,
            };

            let mut step_max: f64 = 0.0;
            let mut size: f64 = 1.0;
            for k in 0..q {
                let d = s_star * dir[k];
                delta[k] += d;
                step_max = step_max.max(d.abs());
                size = size.max(delta[k].abs()).max(u[k].abs());
            }
            for j in 0..n {
                rho[j] -= s_star * e[j];
            }
            if step_max <= 1e-14 * size {
                break;
            }
        }
        Ok(())
    }

    /// Damped Gauss-Newton from `u_start`. The returned `h` never exceeds
    /// `h(u_start)`.
    pub fn solve_mode(&self, u_start: &[f64], opts: &ModeOptions) -> Result<ClusterState> {
        self.check(u_start)?;
        let n = self.cluster.len();
        let q = u_start.len();
        let mut ws = Workspace::new(n, q, self.design.s());
        let mut u = u_start.to_vec();
        let mut jac = vec![0.0; n * q];
        self.fill(&u, &mut ws, Some(&mut jac))?;
        let mut r = ws.r.clone();
        let mut h = self.h_from_residuals(&u, &r);
        let mut status = ModeStatus::IterationLimit;
        let mut iterations = 0;
        let mut trial = vec![0.0; q];
        let inv = self.cov.inverse();

        loop {
            let mut gmax: f64 = 0.0;
            for k in 0..q {
                let mut g = 0.0;
                for l in 0..q {
                    g += 2.0 * inv[(k, l)] * u[l];
                }
                for j in 0..n {
                    g -= jac[j * q + k] * self.psi_weight(r[j]);
                }
                gmax = gmax.max(g.abs());
            }
            if gmax <= opts.tol * h.abs().max(1.0) {
                status = ModeStatus::Converged;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;

            self.linearized_step(&u, &r, &jac, &mut ws)?;

            let mut accepted = None;
            let mut t = 1.0;
            for _ in 0..=opts.max_halvings {
                for k in 0..q {
                    trial[k] = u[k] + t * ws.delta[k];
                }
                // probes outside the model's domain count as non-decreasing
                if self.fill(&trial, &mut ws, None).is_ok() {
                    let ht = self.h_from_residuals(&trial, &ws.r);
                    if ht <= h {
                        accepted = Some(ht);
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some(ht) => {
                    let no_progress = ht == h;
                    u.copy_from_slice(&trial);
                    h = ht;
                    self.fill(&u, &mut ws, Some(&mut jac))?;
                    r.copy_from_slice(&ws.r);
                    if no_progress {
                        status = ModeStatus::Stalled;
                        break;
                    }
                }
                None => {
                    status = ModeStatus::Stalled;
                    break;
                }
            }
        }

        let jac = DMatrix::from_row_slice(n, q, &jac);
        let coeffs = quad_coeffs(self.tau, self.omega, &r);
        let hess = self.half_hessian(&jac, &coeffs);
        Ok(ClusterState {
            u: DVector::from_vec(u),
            r,
            coeffs,
            h_value: h,
            hess,
            jac,
            iterations,
            status,
        })
    }
}

/// Scratch buffers reused across the iterations of one mode solve.
struct Workspace {
    phi: Vec<f64>,
    dphi: Vec<f64>,
    row: Vec<f64>,
    r: Vec<f64>,
    rho: Vec<f64>,
    e: Vec<f64>,
    knots: Vec<f64>,
    delta: Vec<f64>,
    shifted: Vec<f64>,
    grad: Vec<f64>,
    dir: Vec<f64>,
    hess: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, q: usize, s: usize) -> Self {
        Self {
            phi: vec![0.0; s],
            dphi: vec![0.0; s],
            row: vec![0.0; q],
            r: vec![0.0; n],
            rho: vec![0.0; n],
            e: vec![0.0; n],
            knots: Vec::with_capacity(2 * n),
            delta: vec![0.0; q],
            shifted: vec![0.0; q],
            grad: vec![0.0; q],
            dir: vec![0.0; q],
            hess: vec![0.0; q * q],
        }
    }
}

/// Solves `A x = b` in place for symmetric positive definite row-major `A`
/// (overwritten by its Cholesky factor). Returns false if `A` is not SPD.
fn cholesky_solve(a: &mut [f64], q: usize, b: &mut [f64]) -> bool {
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in (j + 1)..q {
            let mut v = a[i * q + j];
            for k in 0..j {
                v -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = v / d;
        }
    }
    for i in 0..q {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * q + k] * b[k];
        }
        b[i] = v / a[i * q + i];
    }
    for i in (0..q).rev() {
        let mut v = b[i];
        for k in (i + 1)..q {
            v -= a[k * q + i] * b[k];
        }
        b[i] = v / a[i * q + i];
    }
    true
}
