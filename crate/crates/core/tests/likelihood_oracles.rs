mod common;

use common::*;
use nalgebra::DVector;
use nlqmm::likelihood::{cluster_terms, laplace_loglik, profiled_loglik, LikelihoodProblem};
use nlqmm::model::{builtin_logistic4, CustomModel, DesignMap, PhiSpec, QuantileModel};
use nlqmm::remode::ModeOptions;
use nlqmm::{Cluster, ClusteredDataset, QuantileLevel, ThetaVector, VarianceSpec};
use proptest::prelude::*;
use rand::Rng;

fn problem<'a>(
    ds: &'a ClusteredDataset,
    model: &'a dyn QuantileModel,
    design: &'a DesignMap,
    variance: VarianceSpec,
    tau: f64,
    omega: f64,
) -> LikelihoodProblem<'a> {
    LikelihoodProblem {
        dataset: ds,
        model,
        design,
        variance,
        tau: QuantileLevel::new(tau).unwrap(),
        omega,
        mode: ModeOptions::default(),
    }
}

fn multi_cluster<R: Rng>(rng: &mut R, m: usize, n: usize) -> ClusteredDataset {
    let beta = [5.0, 2.5, 0.8, 0.0];
    let clusters = (0..m)
        .map(|i| {
            let u = rng.random_range(-0.5..0.5);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let y = xs
                .iter()
                .map(|&x| logistic_ref(&[beta[0] + u, beta[1], beta[2], beta[3]], x) + rng.random_range(-0.3..0.3))
                .collect();
            Cluster::new(format!("{i}"), y, xs.iter().map(|&x| vec![x]).collect()).unwrap()
        })
        .collect();
    ClusteredDataset::new(clusters, vec!["x".into()]).unwrap()
}

#[test]
fn laplace_matches_quadrature_on_toy_instances() {
    let mut rng = rng(21);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let inst = random_instance(&mut rng, k % 2 == 0, 1, 3);
        let psi = rng.random_range(0.2..1.0);
        let tau = rng.random_range(0.2..0.8);
        let omega = rng.random_range(0.5..2.0);
        let sigma = rng.random_range(0.02..0.1);
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let variance = VarianceSpec::diagonal(1).unwrap();
        let p = problem(&ds, &*inst.model, &design, variance, tau, omega);
        let theta = ThetaVector::new(DVector::from_vec(inst.beta.clone()), DVector::from_element(1, 0.5 * f64::ln(psi)));
        let (la, terms) = laplace_loglik(&p, &theta, sigma, None).unwrap();
        let exact = quadrature_loglik(&inst, psi, tau, omega, sigma, terms[0].mode[0]);
        let err = (la.total - exact).abs();
        worst = worst.max(err);
        assert!(err < 0.05, "instance {k}: Laplace {} vs quadrature {exact}", la.total);
    }
    println!("largest Laplace error {worst:.2e}");
}

#[test]
fn laplace_is_exact_for_linear_in_band_problems() {
    // f linear in u and every residual in the quadratic band: h is an exact
    // quadratic and the approximation has no error
    let mut rng = rng(22);
    for _ in 0..10 {
        let mut inst = random_instance(&mut rng, true, 1, 3);
        inst.random_rows = vec![0];
        let ds = single_cluster(inst.y.clone(), &inst.xs);
        let design = design(&inst.random_rows);
        let (tau, omega, sigma, psi) = (0.5, 50.0, 0.5, 0.3);
        let p = problem(&ds, &*inst.model, &design, VarianceSpec::diagonal(1).unwrap(), tau, omega);
        let theta = ThetaVector::new(DVector::from_vec(inst.beta.clone()), DVector::from_element(1, 0.5 * f64::ln(psi)));
        let (la, terms) = laplace_loglik(&p, &theta, sigma, None).unwrap();
        assert!(terms[0].h > 0.0);
        let exact = quadrature_loglik(&inst, psi, tau, omega, sigma, terms[0].mode[0]);
        assert!((la.total - exact).abs() < 1e-8, "{} vs {exact}", la.total);
    }
}

#[test]
fn profiling_identity_and_dominance() {
    let mut rng = rng(23);
    for k in 0..20 {
        let ds = multi_cluster(&mut rng, 4, 5);
        let model = builtin_logistic4();
        let design = design(&[0]);
        let tau = rng.random_range(0.1..0.9);
        let omega = rng.random_range(0.01..1.0);
        let p = problem(&ds, &*model, &design, VarianceSpec::diagonal(1).unwrap(), tau, omega);
        let theta = ThetaVector::new(
            DVector::from_column_slice(&[5.0, 2.5, 0.8, 0.0]).add_scalar(rng.random_range(-0.2..0.2)),
            DVector::from_element(1, rng.random_range(-2.0..1.0)),
        );
        let prof = profiled_loglik(&p, &theta, None, false).unwrap();
        let (at_hat, _) = laplace_loglik(&p, &theta, prof.sigma_hat, None).unwrap();
        assert!(
            (prof.value - at_hat.total).abs() <= 1e-10 * prof.value.abs().max(1.0),
            "instance {k}: {} vs {}",
            prof.value,
            at_hat.total
        );
        for _ in 0..100 {
            let sigma = prof.sigma_hat * (rng.random_range(-4.0f64..4.0)).exp();
            let (other, _) = laplace_loglik(&p, &theta, sigma, None).unwrap();
            assert!(other.total <= prof.value + 1e-10 * prof.value.abs().max(1.0));
        }
    }
}

#[test]
fn log_determinants_are_nonnegative() {
    let mut rng = rng(24);
    for _ in 0..30 {
        let ds = multi_cluster(&mut rng, 5, 6);
        let model = builtin_logistic4();
        let design = design(&[0, 1]);
        let p = problem(
            &ds,
            &*model,
            &design,
            VarianceSpec::general(2).unwrap(),
            rng.random_range(0.1..0.9),
            10f64.powf(rng.random_range(-4.0..0.5)),
        );
        let xi = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let theta = ThetaVector::new(DVector::from_column_slice(&[5.0, 2.5, 0.8, 0.0]), xi);
        for t in cluster_terms(&p, &theta, None).unwrap() {
            assert!(t.log_det.is_finite() && t.log_det >= 0.0, "{}", t.log_det);
        }
    }
}

#[test]
fn vanishing_variance_recovers_independent_objective() {
    let mut rng = rng(25);
    for _ in 0..5 {
        let ds = multi_cluster(&mut rng, 6, 5);
        let model = builtin_logistic4();
        let design = design(&[0]);
        let (tau, omega) = (0.3, 0.2);
        let p = problem(&ds, &*model, &design, VarianceSpec::diagonal(1).unwrap(), tau, omega);
        let beta = [5.0, 2.5, 0.8, 0.0];
        let theta = ThetaVector::new(DVector::from_column_slice(&beta), DVector::from_element(1, -12.0));
        let prof = profiled_loglik(&p, &theta, None, false).unwrap();
        for t in &prof.terms {
            assert!(t.mode[0].abs() < 1e-6);
        }
        let n = ds.n_obs() as f64;
        let sum_kappa: f64 = ds
            .clusters()
            .iter()
            .flat_map(|c| c.x_rows().zip(c.y()).map(|(x, &y)| kappa_ref(tau, omega, y - logistic_ref(&beta, x[0]))))
            .sum();
        let independent = n * ((tau * (1.0 - tau) / (sum_kappa / n)).ln() - 1.0);
        assert!((prof.value - independent).abs() < 1e-6, "{} vs {independent}", prof.value);
    }
}

#[test]
fn median_is_reflection_symmetric() {
    // f(φ, x) = φ₁ + φ₂ tanh(x): reflecting y and β leaves ℓ unchanged at τ = 0.5
    let model = CustomModel::new("tanh", 2, |phi: &[f64], x: &[f64]| phi[0] + phi[1] * x[0].tanh());
    let design = DesignMap::from_phi_specs(&[PhiSpec::intercept(true), PhiSpec::intercept(false)]).unwrap();
    let mut rng = rng(26);
    let build = |sign: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let clusters = (0..4)
            .map(|i| {
                let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y: Vec<f64> = xs.iter().map(|&x| sign * (1.0 + 2.0 * x.tanh() + rng.random_range(-0.5..0.5))).collect();
                Cluster::new(format!("{i}"), y, xs.iter().map(|&x| vec![x]).collect()).unwrap()
            })
            .collect();
        ClusteredDataset::new(clusters, vec!["x".into()]).unwrap()
    };
    let state = rng.clone();
    let a = build(1.0, &mut rng);
    let mut rng2 = state;
    let b = build(-1.0, &mut rng2);
    let variance = VarianceSpec::diagonal(1).unwrap();
    let pa = problem(&a, &model, &design, variance, 0.5, 0.3);
    let pb = problem(&b, &model, &design, variance, 0.5, 0.3);
    let xi = DVector::from_element(1, -0.4);
    let la = profiled_loglik(&pa, &ThetaVector::new(DVector::from_column_slice(&[0.9, 2.1]), xi.clone()), None, false).unwrap();
    let lb = profiled_loglik(&pb, &ThetaVector::new(DVector::from_column_slice(&[-0.9, -2.1]), xi), None, false).unwrap();
    assert!((la.value - lb.value).abs() < 1e-9, "{} vs {}", la.value, lb.value);
}

#[test]
fn profiled_loglik_has_no_unexplained_jumps() {
    // along a segment, jumps must coincide with a change in the band
    // membership of some residual at the mode
    let mut rng = rng(27);
    let ds = multi_cluster(&mut rng, 4, 6);
    let model = builtin_logistic4();
    let design = design(&[0]);
    let (tau, omega) = (0.4, 0.3);
    let p = problem(&ds, &*model, &design, VarianceSpec::diagonal(1).unwrap(), tau, omega);
    let a = [5.0, 2.5, 0.8, 0.0, -0.5];
    let b = [5.3, 2.3, 0.9, 0.1, 0.2];
    let steps = 2000;
    let eval = |t: f64| {
        let x: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u + t * (v - u)).collect();
        let th = ThetaVector::from_slice(&x, 4);
        let prof = profiled_loglik(&p, &th, None, false).unwrap();
        let signs: Vec<i8> = ds
            .clusters()
            .iter()
            .zip(&prof.terms)
            .flat_map(|(c, term)| {
                let phi = [x[0] + term.mode[0], x[1], x[2], x[3]];
                c.x_rows()
                    .zip(c.y())
                    .map(|(xx, &y)| nlqmm::loss::sign_of(QuantileLevel::new(tau).unwrap(), omega, y - logistic_ref(&phi, xx[0])))
                    .collect::<Vec<_>>()
            })
            .collect();
        (prof.value, signs)
    };
    let mut prev = eval(0.0);
    for k in 1..=steps {
        let cur = eval(k as f64 / steps as f64);
        if (cur.0 - prev.0).abs() > 0.05 {
            assert_ne!(cur.1, prev.1, "jump of {} without a band change at step {k}", cur.0 - prev.0);
        }
        prev = cur;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn loglik_breakdown_sums(seed in 0u64..5000, sigma in 0.05f64..5.0) {
        let mut rng = rng(seed);
        let ds = multi_cluster(&mut rng, 3, 4);
        let model = builtin_logistic4();
        let design = design(&[0]);
        let p = problem(&ds, &*model, &design, VarianceSpec::diagonal(1).unwrap(), 0.7, 0.1);
        let theta = ThetaVector::new(DVector::from_column_slice(&[5.0, 2.5, 0.8, 0.0]), DVector::from_element(1, 0.0));
        let (ll, _) = laplace_loglik(&p, &theta, sigma, None).unwrap();
        prop_assert!((ll.total - (ll.kernel_term + ll.logdet_term + ll.h_term)).abs() <= 1e-12 * ll.total.abs().max(1.0));
        prop_assert!(ll.logdet_term <= 0.0);
    }
}
