mod common;

use common::*;
use nalgebra::DMatrix;
use nlqmm::remode::{ClusterObjective, ModeOptions, ModeStatus};
use nlqmm::{QuantileLevel, ScaledCovariance};
use proptest::prelude::*;
use rand::Rng;

fn random_psi<R: Rng>(rng: &mut R, q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    for i in 0..q {
        l[(i, i)] = rng.random_range(0.3..1.5);
        for j in 0..i {
            l[(i, j)] = rng.random_range(-0.5..0.5);
        }
    }
    &l * l.transpose()
}

fn knot_distance(inst: &Instance, tau: f64, omega: f64, u: &[f64]) -> f64 {
    let mut phi = inst.beta.clone();
    for (c, &k) in inst.random_rows.iter().enumerate() {
        phi[k] += u[c];
    }
    inst.xs
        .iter()
        .zip(&inst.y)
        .map(|(&x, &y)| {
            let r = y - (inst.reference)(&phi, x);
            (r - (tau - 1.0) * omega).abs().min((r - tau * omega).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn h_eval_matches_reference() {
    let mut rng = rng(1);
    for k in 0..50 {
        let inst = random_instance(&mut rng, k % 2 == 0, 1 + k % 2, 6);
        let q = inst.random_rows.len();
        let psi = random_psi(&mut rng, q);
        let cov = ScaledCovariance::new(psi.clone()).unwrap();
        let (tau, omega) = (rng.random_range(0.05..0.95), rng.random_range(0.01..1.0));
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(tau).unwrap(),
        };
        let u: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect = h_ref(&inst, &psi.try_inverse().unwrap(), tau, omega, &u);
        let got = obj.h_eval(&u).unwrap();
        assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = rng(2);
    let mut checked = 0;
    while checked < 100 {
        let logistic = checked % 2 == 0;
        let inst = random_instance(&mut rng, logistic, 1 + checked % 2, 6);
        let q = inst.random_rows.len();
        let psi = random_psi(&mut rng, q);
        let cov = ScaledCovariance::new(psi).unwrap();
        let (tau, omega) = (rng.random_range(0.05..0.95), rng.random_range(0.05..1.0));
        let u: Vec<f64> = (0..q).map(|_| rng.random_range(-0.5..0.5)).collect();
        let step = 1e-6;
        // interior points only: the central stencil must not straddle a knot
        if knot_distance(&inst, tau, omega, &u) < 1e-3 * omega {
            continue;
        }
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(tau).unwrap(),
        };
        let g = obj.h_grad(&u).unwrap();
        for c in 0..q {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += step;
            dn[c] -= step;
            let fd = (obj.h_eval(&up).unwrap() - obj.h_eval(&dn).unwrap()) / (2.0 * step);
            let rel = (g[c] - fd).abs() / g[c].abs().max(1.0);
            assert!(rel < 1e-6, "component {c}: analytic {} vs fd {fd}", g[c]);
        }
        checked += 1;
    }
}

#[test]
fn mode_matches_brute_force_minimum() {
    let mut rng = rng(3);
    for k in 0..50 {
        let q = 1 + k % 2;
        let n = 3 + k % 4;
        let inst = random_instance(&mut rng, k % 3 != 0, q, n);
        let psi = random_psi(&mut rng, q);
        let psi_inv = psi.clone().try_inverse().unwrap();
        let cov = ScaledCovariance::new(psi).unwrap();
        let (tau, omega) = (rng.random_range(0.1..0.9), rng.random_range(0.02..0.5));
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(tau).unwrap(),
        };
        let state = obj.solve_mode(&vec![0.0; q], &ModeOptions::default()).unwrap();
        let h = |u: &[f64]| h_ref(&inst, &psi_inv, tau, omega, u);
        let (_, brute) = brute_force_min(&h, q, 3.0, if q == 1 { 4001 } else { 201 });
        let rel = (state.h_value - brute) / brute.abs().max(1e-12);
        assert!(rel.abs() < 1e-6, "instance {k}: solver {} vs brute force {brute}", state.h_value);
    }
}

#[test]
fn converged_modes_are_stationary() {
    let mut rng = rng(4);
    for k in 0..60 {
        let q = 1 + k % 2;
        let inst = random_instance(&mut rng, k % 2 == 1, q, 8);
        let cov = ScaledCovariance::new(random_psi(&mut rng, q)).unwrap();
        let omega = rng.random_range(0.01..1.0);
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(rng.random_range(0.1..0.9)).unwrap(),
        };
        let state = obj.solve_mode(&vec![0.0; q], &ModeOptions::default()).unwrap();
        assert_eq!(state.status, ModeStatus::Converged);
        let g = obj.h_grad(state.u.as_slice()).unwrap();
        assert!(g.amax() <= 1e-6 * state.h_value.abs().max(1.0), "‖∇h‖ = {}", g.amax());
    }
}

#[test]
fn descent_never_increases_h() {
    let mut rng = rng(5);
    for k in 0..100 {
        let q = 1 + k % 2;
        let inst = random_instance(&mut rng, k % 2 == 0, q, 6);
        let cov = ScaledCovariance::new(random_psi(&mut rng, q)).unwrap();
        let omega = rng.random_range(0.01..1.0);
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(0.3).unwrap(),
        };
        let start: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut prev = obj.h_eval(&start).unwrap();
        // truncating the iteration count exposes every accepted iterate
        for iters in 1..12 {
            let opts = ModeOptions {
                max_iter: iters,
                ..Default::default()
            };
            let h = obj.solve_mode(&start, &opts).unwrap().h_value;
            assert!(h <= prev, "instance {k}: h rose from {prev} to {h} at step {iters}");
            prev = h;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn warm_starts_agree_on_linear_models(
        seed in 0u64..10_000,
        du in prop::collection::vec(-2.0f64..2.0, 2),
        tau in 0.1f64..0.9,
        omega in 0.01f64..1.0,
    ) {
        let mut rng = rng(seed);
        let mut inst = random_instance(&mut rng, true, 1, 7);
        // both asymptotes enter f linearly, so h is convex in u
        inst.random_rows = vec![0, 3];
        let cov = ScaledCovariance::new(random_psi(&mut rng, 2)).unwrap();
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let obj = ClusterObjective {
            model: &*inst.model,
            design: &design,
            beta: &inst.beta,
            cov: &cov,
            cluster: &ds.clusters()[0],
            omega,
            tau: QuantileLevel::new(tau).unwrap(),
        };
        let a = obj.solve_mode(&[0.0, 0.0], &ModeOptions::default()).unwrap();
        let b = obj.solve_mode(&du, &ModeOptions::default()).unwrap();
        prop_assert!((a.h_value - b.h_value).abs() <= 1e-8 * a.h_value.abs().max(1.0));
    }
}
