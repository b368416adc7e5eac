//! Derivative-free unconstrained minimizers used by the outer fit.
//!
//! Both report through [`OptimizerReport`] and never return a point worse
//! than the start. A status of [`OptimStatus::LineSearchFailure`] or
//! [`OptimStatus::NonFinite`] is what callers treat as failure; running out
//! of evaluations is not.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxEvaluations,
    LineSearchFailure,
    NonFinite,
}

impl OptimStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, OptimStatus::LineSearchFailure | OptimStatus::NonFinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub status: OptimStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiNewtonOptions {
    pub max_iter: usize,
    /// Converged when `‖∇f‖_∞ < grad_tol·max(1, |f|)`.
    pub grad_tol: f64,
    /// Converged when the relative change of `f` over an iteration is below this.
    pub f_rel_tol: f64,
    /// Forward-difference step is `fd_step·max(1, |x_k|)`.
    pub fd_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for QuasiNewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-6,
            f_rel_tol: 1e-10,
            fd_step: 1e-7,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_evals: usize,
    /// Converged when the simplex spread in `f` is below `f_tol·max(1, |f_best|)`.
    pub f_tol: f64,
    /// Initial edge along axis k is `edge·max(1, |x_k|)`.
    pub edge: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_evals: 500,
            f_tol: 1e-8,
            edge: 0.1,
        }
    }
}

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        (self.f)(x)
    }
}

fn forward_gradient<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x: &[f64],
    fx: f64,
    rel_step: f64,
) -> Option<DVector<f64>> {
    let mut probe = x.to_vec();
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let h = rel_step * x[k].abs().max(1.0);
        probe[k] = x[k] + h;
        let fk = obj.eval(&probe);
        probe[k] = x[k];
        if !fk.is_finite() {
            return None;
        }
        g[k] = (fk - fx) / h;
    }
    Some(g)
}

/// BFGS with Armijo backtracking and forward-difference gradients.
///
/// A failed line search first resets the inverse-Hessian approximation to the
/// identity; a second consecutive failure ends the run.
pub fn minimize_quasi_newton<F>(f: F, x_start: &[f64], opts: &QuasiNewtonOptions) -> OptimizerReport
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x_start.len();
    let mut obj = Counted { f, evaluations: 0 };
    let mut x = DVector::from_column_slice(x_start);
    let mut fx = obj.eval(x.as_slice());
    let report = |x: &DVector<f64>, fx: f64, evals: usize, iters: usize, status| OptimizerReport {
        x_best: x.as_slice().to_vec(),
        f_best: fx,
        evaluations: evals,
        iterations: iters,
        status,
    };
    if !fx.is_finite() {
        return report(&x, fx, obj.evaluations, 0, OptimStatus::NonFinite);
    }
    let Some(mut g) = forward_gradient(&mut obj, x.as_slice(), fx, opts.fd_step) else {
        return report(&x, fx, obj.evaluations, 0, OptimStatus::NonFinite);
    };
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;

    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol * fx.abs().max(1.0) {
            return report(&x, fx, obj.evaluations, iter, OptimStatus::Converged);
        }
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + step * &d;
            let ft = obj.eval(trial.as_slice());
            if ft.is_finite() && ft <= fx + opts.armijo * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }

        let Some((x_new, f_new)) = accepted else {
            if fresh {
                return report(&x, fx, obj.evaluations, iter, OptimStatus::LineSearchFailure);
            }
            hinv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let Some(g_new) = forward_gradient(&mut obj, x_new.as_slice(), f_new, opts.fd_step) else {
            // keep the improved point; gradients there are unusable
            return report(&x_new, f_new, obj.evaluations, iter + 1, OptimStatus::NonFinite);
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let small_change = (fx - f_new).abs() <= opts.f_rel_tol * (fx.abs() + opts.f_rel_tol);
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_change {
            return report(&x, fx, obj.evaluations, iter + 1, OptimStatus::Converged);
        }

        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H - ρ(s(Hy)ᵀ + (Hy)sᵀ) + (ρ² yᵀHy + ρ) ssᵀ
            hinv -= rho * (&s * hy.transpose() + &hy * s.transpose());
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose());
            fresh = false;
        }
    }
    report(&x, fx, obj.evaluations, opts.max_iter, OptimStatus::MaxEvaluations)
}

/// Nelder-Mead with reflection 1, expansion 2, contraction ½ and shrink ½.
/// Non-finite values are treated as +∞.
pub fn minimize_simplex<F>(f: F, x_start: &[f64], opts: &SimplexOptions) -> OptimizerReport
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x_start.len();
    let mut obj = Counted { f, evaluations: 0 };
    let f0 = obj.eval(x_start);
    if !f0.is_finite() {
        return OptimizerReport {
            x_best: x_start.to_vec(),
            f_best: f0,
            evaluations: obj.evaluations,
            iterations: 0,
            status: OptimStatus::NonFinite,
        };
    }
    let finite = |v: f64| if v.is_finite() { v } else { f64::INFINITY };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x_start.to_vec(), f0));
    for k in 0..n {
        let mut v = x_start.to_vec();
        v[k] += opts.edge * x_start[k].abs().max(1.0);
        let fv = finite(obj.eval(&v));
        simplex.push((v, fv));
    }

    let mut iterations = 0;
    let status = loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if worst - best < opts.f_tol * best.abs().max(1.0) {
            break OptimStatus::Converged;
        }
        if obj.evaluations >= opts.max_evals {
            break OptimStatus::MaxEvaluations;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for k in 0..n {
                centroid[k] += v[k] / n as f64;
            }
        }
        let along = |t: f64, to: &[f64]| -> Vec<f64> {
            centroid.iter().zip(to).map(|(c, w)| c + t * (w - c)).collect()
        };
        let worst_x = simplex[n].0.clone();
        let reflected = along(-1.0, &worst_x);
        let fr = finite(obj.eval(&reflected));

        if fr < best {
            let expanded = along(-2.0, &worst_x);
            let fe = finite(obj.eval(&expanded));
            simplex[n] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < worst {
            let c = along(-0.5, &worst_x);
            let fc = finite(obj.eval(&c));
            (c, fc)
        } else {
            let c = along(0.5, &worst_x);
            let fc = finite(obj.eval(&c));
            (c, fc)
        };
        if fc < worst.min(fr) {
            simplex[n] = (contracted, fc);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for (v, fv) in simplex.iter_mut().skip(1) {
            for k in 0..n {
                v[k] = anchor[k] + 0.5 * (v[k] - anchor[k]);
            }
            *fv = finite(obj.eval(v));
        }
    };
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x_best, f_best) = simplex.swap_remove(0);
    OptimizerReport {
        x_best,
        f_best,
        evaluations: obj.evaluations,
        iterations,
        status,
    }
}
