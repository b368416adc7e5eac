//! Bundled example data.
//!
//! * Indomethacin: plasma concentrations (mcg/ml) of indomethacin in six
//!   subjects at eleven times (hr) after intravenous injection; columns
//!   `subject,time,conc`.
//! * Soybean: average leaf weight per plant (g) in 48 plots of two varieties
//!   (F commercial, P experimental) over three planting years, measured at
//!   days after planting; columns `plot,variety,year,time,weight`.

use crate::error::{Error, Result};
use crate::types::{Cluster, ClusteredDataset};

pub const INDOMETH_CSV: &str = include_str!("../data/indometh.csv");
pub const SOYBEAN_CSV: &str = include_str!("../data/soybean.csv");

/// Indomethacin data grouped by subject, with `time` as the only covariate.
pub fn indometh() -> Result<ClusteredDataset> {
    let mut groups: Vec<(String, Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
    for (k, line) in INDOMETH_CSV.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidData(format!("indometh.csv line {}: {e}", k + 1)))
        };
        if fields.len() != 3 {
            return Err(Error::InvalidData(format!("indometh.csv line {}: expected 3 fields", k + 1)));
        }
        let (id, time, conc) = (fields[0].trim(), parse(fields[1])?, parse(fields[2])?);
        match groups.iter_mut().find(|g| g.0 == id) {
            Some(g) => {
                g.1.push(conc);
                g.2.push(vec![time]);
            }
            None => groups.push((id.to_string(), vec![conc], vec![vec![time]])),
        }
    }
    let clusters = groups
        .into_iter()
        .map(|(id, y, x)| Cluster::new(id, y, x))
        .collect::<Result<Vec<_>>>()?;
    ClusteredDataset::new(clusters, vec!["time".into()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indometh_shape() {
        let ds = indometh().unwrap();
        assert_eq!(ds.n_clusters(), 6);
        assert_eq!(ds.n_obs(), 66);
        assert!(ds.clusters().iter().all(|c| c.len() == 11));
        assert_eq!(ds.clusters()[0].x_row(0), &[0.25]);
        assert_eq!(ds.clusters()[0].y()[0], 1.5);
    }

    #[test]
    fn soybean_rows() {
        assert_eq!(SOYBEAN_CSV.lines().count(), 413);
        assert!(SOYBEAN_CSV.starts_with("plot,variety,year,time,weight"));
    }
}
