//! The check loss and its Huber-type smooth approximation.
//!
//! The smoothed loss `κ_{ω,τ}` is quadratic on the band `((τ-1)ω, τω)` and
//! linear outside it. Classifying each residual by branch (the sign vector)
//! turns a sum of smoothed losses into the exact quadratic form
//! `½(rᵀAr/ω + bᵀr + cᵀ1)`.

use crate::error::{Error, Result};
use crate::types::QuantileLevel;

/// Smoothing bandwidth ω and the factor γ that shrinks it between outer
/// iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParam {
    omega: f64,
    gamma: f64,
}

impl SmoothingParam {
    pub fn new(omega: f64, gamma: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParameter(format!("ω must be positive, got {omega}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("γ must lie in (0, 1), got {gamma}")));
        }
        Ok(Self { omega, gamma })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The next bandwidth, `γ·ω`.
    pub fn shrink(self) -> Self {
        Self {
            omega: self.omega * self.gamma,
            gamma: self.gamma,
        }
    }
}

/// Check (pinball) loss `r(τ - 1{r<0})`.
#[inline]
pub fn rho(tau: QuantileLevel, r: f64) -> f64 {
    let t = tau.value();
    if r < 0.0 {
        r * (t - 1.0)
    } else {
        r * t
    }
}

/// Smooth approximation of [`rho`] with bandwidth `omega`.
#[inline]
pub fn kappa(tau: QuantileLevel, omega: f64, r: f64) -> f64 {
    let t = tau.value();
    if r <= (t - 1.0) * omega {
        r * (t - 1.0) - 0.5 * (t - 1.0) * (t - 1.0) * omega
    } else if r >= t * omega {
        r * t - 0.5 * t * t * omega
    } else {
        r * r / (2.0 * omega)
    }
}

/// Branch indicator of a single residual: -1 below the band, 0 inside, 1 above.
/// Band edges belong to the outer branches.
#[inline]
pub fn sign_of(tau: QuantileLevel, omega: f64, r: f64) -> i8 {
    let t = tau.value();
    if r <= (t - 1.0) * omega {
        -1
    } else if r >= t * omega {
        1
    } else {
        0
    }
}

pub fn sign_vector(tau: QuantileLevel, omega: f64, r: &[f64]) -> Vec<i8> {
    r.iter().map(|&v| sign_of(tau, omega, v)).collect()
}

/// Coefficients `(a, b, c)` of one residual's term in the quadratic form.
#[inline]
pub fn coeffs_for_sign(tau: QuantileLevel, omega: f64, s: i8) -> (f64, f64, f64) {
    let t = tau.value();
    let s = f64::from(s);
    let a = 1.0 - s * s;
    let b = s * ((2.0 * t - 1.0) * s + 1.0);
    let c = 0.5 * ((1.0 - 2.0 * t) * omega * s - (1.0 - 2.0 * t + 2.0 * t * t) * omega * s * s);
    (a, b, c)
}

/// Diagonal of `A`, and the vectors `b`, `c`, `s` for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCoeffs {
    pub a_diag: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<i8>,
}

impl QuadCoeffs {
    /// `½(rᵀAr/ω + bᵀr + cᵀ1)`, which equals `Σ κ(r_j)` when the
    /// coefficients were computed from the same residuals.
    pub fn half_form(&self, omega: f64, r: &[f64]) -> f64 {
        0.5 * self.full_form(omega, r)
    }

    /// `rᵀAr/ω + bᵀr + cᵀ1`.
    pub fn full_form(&self, omega: f64, r: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut cst = 0.0;
        for (j, &rj) in r.iter().enumerate() {
            quad += self.a_diag[j] * rj * rj;
            lin += self.b[j] * rj;
            cst += self.c[j];
        }
        quad / omega + lin + cst
    }
}

pub fn quad_coeffs(tau: QuantileLevel, omega: f64, r: &[f64]) -> QuadCoeffs {
    let n = r.len();
    let mut out = QuadCoeffs {
        a_diag: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
    };
    for &rj in r {
        let s = sign_of(tau, omega, rj);
        let (a, b, c) = coeffs_for_sign(tau, omega, s);
        out.a_diag.push(a);
        out.b.push(b);
        out.c.push(c);
        out.s.push(s);
    }
    out
}
