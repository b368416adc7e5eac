//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use nlqmm::model::{builtin_biexp, builtin_logistic4, DesignMap, ModelSpec};
use nlqmm::{Cluster, ClusteredDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smoothed check loss written straight from its three-branch definition.
pub fn kappa_ref(tau: f64, omega: f64, r: f64) -> f64 {
    let lo = (tau - 1.0) * omega;
    let hi = tau * omega;
    if r <= lo {
        r * (tau - 1.0) - 0.5 * (tau - 1.0).powi(2) * omega
    } else if r >= hi {
        r * tau - 0.5 * tau * tau * omega
    } else {
        r * r / (2.0 * omega)
    }
}

pub fn rho_ref(tau: f64, r: f64) -> f64 {
    if r < 0.0 {
        (tau - 1.0) * r
    } else {
        tau * r
    }
}

pub fn logistic_ref(phi: &[f64], x: f64) -> f64 {
    (phi[0] - phi[3]) / (1.0 + ((phi[1] - x) / phi[2]).exp()) + phi[3]
}

pub fn biexp_ref(phi: &[f64], x: f64) -> f64 {
    phi[0] * (-phi[1].exp() * x).exp() + phi[2] * (-phi[3].exp() * x).exp()
}

/// `F = I₄` and `G` with a one in row `k` of column `c` for each listed
/// `(k, c)` pair.
pub fn design(random_rows: &[usize]) -> DesignMap {
    let mut g = DMatrix::zeros(4, random_rows.len());
    for (c, &k) in random_rows.iter().enumerate() {
        g[(k, c)] = 1.0;
    }
    DesignMap::from_matrices(&DMatrix::identity(4, 4), &g).unwrap()
}

pub fn single_cluster(y: Vec<f64>, xs: &[f64]) -> ClusteredDataset {
    let c = Cluster::new("a", y, xs.iter().map(|&x| vec![x]).collect()).unwrap();
    ClusteredDataset::new(vec![c], vec!["x".into()]).unwrap()
}

/// A small random instance: either builtin, random effects on the listed
/// components, responses from the curve plus noise.
pub struct Instance {
    pub model: ModelSpec,
    pub reference: fn(&[f64], f64) -> f64,
    pub beta: Vec<f64>,
    pub random_rows: Vec<usize>,
    pub xs: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn random_instance<R: Rng>(rng: &mut R, logistic: bool, q: usize, n: usize) -> Instance {
    let (model, reference, beta, xmax, rows): (ModelSpec, fn(&[f64], f64) -> f64, Vec<f64>, f64, Vec<usize>) =
        if logistic {
            (
                builtin_logistic4(),
                logistic_ref,
                vec![
                    rng.random_range(4.0..6.0),
                    rng.random_range(1.5..3.0),
                    rng.random_range(0.6..1.2),
                    rng.random_range(-0.5..0.5),
                ],
                5.0,
                vec![0, 1],
            )
        } else {
            (
                builtin_biexp(),
                biexp_ref,
                vec![
                    rng.random_range(1.5..3.0),
                    rng.random_range(0.2..1.0),
                    rng.random_range(0.3..0.8),
                    rng.random_range(-1.8..-1.0),
                ],
                6.0,
                vec![0, 2],
            )
        };
    let random_rows = rows[..q].to_vec();
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..xmax)).collect();
    let mut phi = beta.clone();
    for &k in &random_rows {
        phi[k] += rng.random_range(-0.3..0.3);
    }
    let y = xs
        .iter()
        .map(|&x| reference(&phi, x) + rng.random_range(-0.4..0.4))
        .collect();
    Instance {
        model,
        reference,
        beta,
        random_rows,
        xs,
        y,
    }
}

/// `h(u) = 2Σκ(y − f(β + Gu)) + uᵀΨ⁻¹u` computed without the library.
pub fn h_ref(inst: &Instance, psi_inv: &DMatrix<f64>, tau: f64, omega: f64, u: &[f64]) -> f64 {
    let mut phi = inst.beta.clone();
    for (c, &k) in inst.random_rows.iter().enumerate() {
        phi[k] += u[c];
    }
    let loss: f64 = inst
        .xs
        .iter()
        .zip(&inst.y)
        .map(|(&x, &y)| kappa_ref(tau, omega, y - (inst.reference)(&phi, x)))
        .sum();
    let q = u.len();
    let mut pen = 0.0;
    for a in 0..q {
        for b in 0..q {
            pen += u[a] * psi_inv[(a, b)] * u[b];
        }
    }
    2.0 * loss + pen
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Minimizes `f` over a dense grid on `[-w, w]^q`, then polishes with a
/// shrinking compass search.
pub fn brute_force_min(f: &dyn Fn(&[f64]) -> f64, q: usize, w: f64, points: usize) -> (Vec<f64>, f64) {
    let mut best = (vec![0.0; q], f(&vec![0.0; q]));
    let step = 2.0 * w / (points - 1) as f64;
    let total = points.pow(q as u32);
    let mut u = vec![0.0; q];
    for idx in 0..total {
        let mut k = idx;
        for c in 0..q {
            u[c] = -w + step * (k % points) as f64;
            k /= points;
        }
        let v = f(&u);
        if v < best.1 {
            best = (u.clone(), v);
        }
    }
    let (mut x, mut fx) = best;
    let mut h = step;
    while h > 1e-13 {
        let mut improved = false;
        for c in 0..q {
            for sgn in [-1.0, 1.0] {
                let mut t = x.clone();
                t[c] += sgn * h;
                let v = f(&t);
                if v < fx {
                    x = t;
                    fx = v;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    (x, fx)
}

/// `N log{τ(1-τ)/σ} + log ∫ N(u; 0, σψ) exp{-Σκ/σ} du` by adaptive quadrature.
pub fn quadrature_loglik(inst: &Instance, psi: f64, tau: f64, omega: f64, sigma: f64, u_hat: f64) -> f64 {
    let psi_inv = DMatrix::from_element(1, 1, 1.0 / psi);
    let h_hat = h_ref(inst, &psi_inv, tau, omega, &[u_hat]);
    let integrand = |u: f64| {
        let h = h_ref(inst, &psi_inv, tau, omega, &[u]);
        (-(h - h_hat) / (2.0 * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * psi).sqrt()
    };
    let width = 12.0 * (sigma * psi).sqrt() + 12.0 * sigma;
    let integral = adaptive_simpson(&integrand, u_hat - width, u_hat + width, 1e-13);
    let n = inst.y.len() as f64;
    n * (tau * (1.0 - tau) / sigma).ln() - h_hat / (2.0 * sigma) + integral.ln()
}
