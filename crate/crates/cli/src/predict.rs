//! Quantile curves from stored fits.

use std::collections::HashMap;

use crate::config::{Atom, Layout};
use crate::error::{CliError, CliResult};
use crate::output::FitOutput;

/// Parse `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let number = |s: &str| -> CliResult<f64> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("grid value \"{s}\" is not a number")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Usage(format!("grid value \"{s}\" is not finite")))
        }
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
            if !(step > 0.0) || stop < start {
                return Err(CliError::Usage(format!("grid \"{spec}\" needs start ≤ stop and step > 0")));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            if n > 10_000_000 {
                return Err(CliError::Usage(format!("grid \"{spec}\" has too many points")));
            }
            Ok((0..n).map(|k| start + k as f64 * step).collect())
        }
        [list] => list.split(',').map(number).collect(),
        _ => Err(CliError::Usage(format!("cannot parse grid \"{spec}\""))),
    }
}

/// Parse `column=value` overrides.
pub fn parse_settings(items: &[String]) -> CliResult<HashMap<String, String>> {
    items
        .iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("expected column=value, got \"{item}\"")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    /// `None` for the population curve (u = 0).
    pub cluster: Option<String>,
    pub x: f64,
    pub tau: f64,
    /// `None` where the curve is not finite.
    pub prediction: Option<f64>,
}

fn atom_values(
    atoms: &[Atom],
    lookup: impl Fn(&str) -> Option<String>,
    context: &str,
) -> CliResult<Vec<f64>> {
    atoms
        .iter()
        .map(|atom| match lookup(&atom.column) {
            Some(raw) => atom.eval(&raw).map_err(CliError::Usage),
            // unset indicators fall back to the reference level
            None if atom.level.is_some() => Ok(0.0),
            None => Err(CliError::Usage(format!(
                "{context}: numeric column \"{}\" needs a value (use --set {}=...)",
                atom.column, atom.column
            ))),
        })
        .collect()
}

fn curve(
    layout: &Layout,
    beta: &[f64],
    u: &[f64],
    atoms: &[f64],
    grid: &[f64],
    tau: f64,
    cluster: Option<&str>,
    out: &mut Vec<PredictionRow>,
) {
    let mut x = Vec::with_capacity(1 + atoms.len());
    let mut phi = vec![0.0; layout.design.s()];
    for &g in grid {
        x.clear();
        x.push(g);
        x.extend_from_slice(atoms);
        layout.design.phi_into(beta, u, &x, &mut phi);
        let value = layout.model.value(&phi, &x).ok().filter(|v| v.is_finite());
        if value.is_none() {
            log::warn!("prediction at x = {g} (τ = {tau}) is not finite");
        }
        out.push(PredictionRow {
            cluster: cluster.map(str::to_string),
            x: g,
            tau,
            prediction: value,
        });
    }
}

/// Population curve at u = 0, followed by one curve per cluster at its
/// predicted random effects when `clusters` is set.
pub fn predict(
    fit: &FitOutput,
    grid: &[f64],
    settings: &HashMap<String, String>,
    clusters: bool,
) -> CliResult<Vec<PredictionRow>> {
    let layout = fit.config.layout()?;
    if fit.beta.len() != layout.design.p() {
        return Err(CliError::Config(format!(
            "fit file has {} coefficients but its config implies {}",
            fit.beta.len(),
            layout.design.p()
        )));
    }
    let q = layout.design.q();
    let mut rows = Vec::with_capacity(grid.len());
    let pop = atom_values(&layout.atoms, |c| settings.get(c).cloned(), "population curve")?;
    curve(&layout, &fit.beta, &vec![0.0; q], &pop, grid, fit.tau, None, &mut rows);
    if clusters {
        for re in &fit.random_effects {
            let values = atom_values(&layout.atoms, |c| re.values.get(c).cloned(), &re.id)?;
            curve(&layout, &fit.beta, &re.u, &values, grid, fit.tau, Some(&re.id), &mut rows);
        }
    }
    Ok(rows)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "NA".into(),
    }
}

/// CSV text: `x,tau,prediction` for population rows, with a leading `cluster`
/// column when `with_cluster` is set.
pub fn to_csv<'a>(rows: impl IntoIterator<Item = &'a PredictionRow>, with_cluster: bool) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Usage(e.to_string());
    if with_cluster {
        w.write_record(["cluster", "x", "tau", "prediction"]).map_err(io)?;
    } else {
        w.write_record(["x", "tau", "prediction"]).map_err(io)?;
    }
    for r in rows {
        let (x, tau, p) = (format!("{}", r.x), format!("{}", r.tau), fmt_value(r.prediction));
        if with_cluster {
            w.write_record([r.cluster.as_deref().unwrap_or(""), &x, &tau, &p]).map_err(io)?;
        } else {
            w.write_record([&x, &tau, &p]).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
