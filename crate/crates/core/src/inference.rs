//! Cluster (block) bootstrap standard errors for the fixed effects.
//!
//! Whole clusters are resampled with replacement; rows inside a cluster are
//! never split. Replicate `k` draws its clusters from ChaCha8 stream `k`, and
//! results are aggregated in replicate order, so the output does not depend
//! on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitter::{fit, FitControl};
use crate::model::{DesignMap, QuantileModel};
use crate::types::{ClusteredDataset, QuantileLevel, VarianceSpec};

/// Default number of bootstrap replicates.
pub const DEFAULT_REPLICATES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// β̂* for each replicate in index order; `None` for failed replicates.
    pub replicates: Vec<Option<Vec<f64>>>,
    /// Sample standard deviation over the successful replicates.
    pub se: Vec<f64>,
    pub failures: usize,
    pub b_requested: usize,
    pub b_used: usize,
}

/// The resampled dataset for replicate `k`. Duplicated clusters are renamed
/// `"{id}#{slot}"` so identities stay unique.
pub fn resample_clusters(dataset: &ClusteredDataset, seed: u64, k: usize) -> Result<ClusteredDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let src = dataset.clusters();
    let m = src.len();
    let clusters = (0..m)
        .map(|slot| {
            let c = &src[rng.random_range(0..m)];
            c.relabeled(format!("{}#{slot}", c.id()))
        })
        .collect();
    ClusteredDataset::new(clusters, dataset.covariate_names().to_vec())
}

/// Refits the model on `b` cluster resamples.
///
/// Replicates warm-start from `control.theta_start`; when it is unset the
/// original data are fitted first and that θ̂ is used. Errors and
/// non-converged fits count as failures and are not retried.
#[allow(clippy::too_many_arguments)]
pub fn cluster_bootstrap(
    dataset: &ClusteredDataset,
    model: &dyn QuantileModel,
    design: &DesignMap,
    variance: &VarianceSpec,
    tau: QuantileLevel,
    control: &FitControl,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::InvalidParameter(format!("at least 2 bootstrap replicates are required, got {b}")));
    }
    let mut ctl = control.clone();
    if ctl.theta_start.is_none() {
        let full = fit(dataset, model, design, variance, tau, control)?;
        ctl.theta_start = Some(full.theta);
    }

    let outcomes: Vec<std::result::Result<Vec<f64>, String>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let data = resample_clusters(dataset, seed, k).map_err(|e| e.to_string())?;
            match fit(&data, model, design, variance, tau, &ctl) {
                Ok(res) if res.converged => Ok(res.beta_hat.as_slice().to_vec()),
                Ok(_) => Err("outer iteration limit reached".to_string()),
                Err(e) => Err(e.to_string()),
            }
        })
        .collect();

    let reasons: Vec<String> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(k, o)| o.as_ref().err().map(|e| format!("replicate {k}: {e}")))
        .collect();
    let failures = reasons.len();
    let b_used = b - failures;
    if 2 * failures > b || b_used < 2 {
        return Err(Error::Bootstrap {
            failures,
            requested: b,
            reasons,
        });
    }
    for r in &reasons {
        log::warn!("bootstrap {r}");
    }

    let replicates: Vec<Option<Vec<f64>>> = outcomes.into_iter().map(|o| o.ok()).collect();
    let ok: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    let p = design.p();
    let se = (0..p)
        .map(|j| {
            let mean = ok.iter().map(|v| v[j]).sum::<f64>() / b_used as f64;
            let ss: f64 = ok.iter().map(|v| (v[j] - mean).powi(2)).sum();
            (ss / (b_used - 1) as f64).sqrt()
        })
        .collect();

    Ok(BootstrapResult {
        replicates,
        se,
        failures,
        b_requested: b,
        b_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_logistic4;
    use crate::types::{Cluster, ThetaVector};
    use nalgebra::{DMatrix, DVector};
    use std::collections::HashSet;

    fn design() -> DesignMap {
        let g = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        DesignMap::from_matrices(&DMatrix::identity(4, 4), &g).unwrap()
    }

    fn clusters(m: usize, shift: impl Fn(usize) -> f64) -> ClusteredDataset {
        let xs: Vec<f64> = (0..8).map(|j| 1.0 + 2.4 * j as f64).collect();
        let noise = [0.3, -0.5, 0.1, 0.7, -0.2, -0.4, 0.6, -0.1];
        let cs = (0..m)
            .map(|i| {
                let y = xs
                    .iter()
                    .zip(noise)
                    .map(|(&x, e)| 10.0 + (60.0 + shift(i)) / (1.0 + ((10.0 - x) / 3.0).exp()) + e)
                    .collect();
                Cluster::new(format!("c{i}"), y, xs.iter().map(|&x| vec![x]).collect()).unwrap()
            })
            .collect();
        ClusteredDataset::new(cs, vec!["x".into()]).unwrap()
    }

    fn control() -> FitControl {
        FitControl {
            beta_start: Some(vec![70.0, 10.0, 3.0, 10.0]),
            gamma: 0.2,
            ..Default::default()
        }
    }

    #[test]
    fn resampling_keeps_blocks_and_unique_ids() {
        let ds = clusters(12, |i| i as f64);
        let r = resample_clusters(&ds, 3, 7).unwrap();
        assert_eq!(r.n_clusters(), 12);
        let ids: HashSet<&str> = r.clusters().iter().map(|c| c.id()).collect();
        assert_eq!(ids.len(), 12);
        for c in r.clusters() {
            let orig = c.id().split('#').next().unwrap();
            let src = ds.clusters().iter().find(|s| s.id() == orig).unwrap();
            assert_eq!(src.y(), c.y());
        }
        assert_eq!(r, resample_clusters(&ds, 3, 7).unwrap());
        assert_ne!(r, resample_clusters(&ds, 3, 8).unwrap());
    }

    #[test]
    fn rejects_too_few_replicates() {
        let ds = clusters(4, |_| 0.0);
        let err = cluster_bootstrap(
            &ds,
            &*builtin_logistic4(),
            &design(),
            &VarianceSpec::diagonal(1).unwrap(),
            QuantileLevel::new(0.5).unwrap(),
            &control(),
            1,
            0,
        );
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn identical_clusters_give_zero_se() {
        let ds = clusters(6, |_| 0.0);
        let mut ctl = control();
        ctl.theta_start = Some(ThetaVector::new(
            DVector::from_column_slice(&[70.0, 10.0, 3.0, 10.0]),
            DVector::from_element(1, -2.0),
        ));
        let res = cluster_bootstrap(
            &ds,
            &*builtin_logistic4(),
            &design(),
            &VarianceSpec::diagonal(1).unwrap(),
            QuantileLevel::new(0.5).unwrap(),
            &ctl,
            4,
            11,
        )
        .unwrap();
        assert_eq!(res.b_used + res.failures, 4);
        for s in &res.se {
            assert!(*s < 1e-8, "se {s}");
        }
    }

    #[test]
    fn same_seed_same_replicates() {
        let ds = clusters(8, |i| 3.0 * ((i * 7) % 5) as f64 - 6.0);
        let run = || {
            cluster_bootstrap(
                &ds,
                &*builtin_logistic4(),
                &design(),
                &VarianceSpec::diagonal(1).unwrap(),
                QuantileLevel::new(0.5).unwrap(),
                &control(),
                3,
                42,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.se.len(), 4);
        assert_eq!(a.b_used, a.b_requested - a.failures);
    }
}
