//! Reading long-format CSV data into clusters.

use std::collections::HashMap;
use std::path::Path;

use nlqmm::{Cluster, ClusteredDataset};

use crate::config::{FitConfig, Layout};
use crate::error::{CliError, CliResult};

/// A dataset built for one config together with the per-cluster raw values of
/// every referenced column (taken from each cluster's first row).
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: ClusteredDataset,
    pub cluster_values: Vec<Vec<(String, String)>>,
}

pub fn load(path: &Path, config: &FitConfig, layout: &Layout) -> CliResult<LoadedData> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read(file, path, config, layout)
}

fn data_error(path: &Path, line: u64, message: impl Into<String>) -> CliError {
    CliError::Data {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read<R: std::io::Read>(
    input: R,
    path: &Path,
    config: &FitConfig,
    layout: &Layout,
) -> CliResult<LoadedData> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| data_error(path, 1, e.to_string()))?
        .clone();
    let column = |name: &str| -> CliResult<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Config(format!("column \"{name}\" not found in {}", path.display()))
        })
    };
    let referenced = config.referenced_columns()?;
    let ref_idx: Vec<usize> = referenced.iter().map(|c| column(c)).collect::<CliResult<_>>()?;
    let y_idx = column(&config.response)?;
    let g_idx = column(&config.group)?;
    let x_idx = column(&config.argument)?;
    let atom_idx: Vec<usize> = layout.atoms.iter().map(|a| column(&a.column)).collect::<CliResult<_>>()?;

    struct Building {
        y: Vec<f64>,
        rows: Vec<Vec<f64>>,
        values: Vec<(String, String)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Building> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |idx: usize, name: &str| -> CliResult<f64> {
            let raw = &record[idx];
            let v: f64 = raw
                .parse()
                .map_err(|_| data_error(path, line, format!("column \"{name}\": \"{raw}\" is not a number")))?;
            if !v.is_finite() {
                return Err(data_error(path, line, format!("column \"{name}\" is not finite")));
            }
            Ok(v)
        };
        let y = number(y_idx, &config.response)?;
        let mut row = Vec::with_capacity(1 + atom_idx.len());
        row.push(number(x_idx, &config.argument)?);
        for (atom, &idx) in layout.atoms.iter().zip(&atom_idx) {
            row.push(atom.eval(&record[idx]).map_err(|m| data_error(path, line, m))?);
        }
        let id = record[g_idx].to_string();
        if id.is_empty() {
            return Err(data_error(path, line, format!("empty group id in column \"{}\"", config.group)));
        }
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Building {
                y: Vec::new(),
                rows: Vec::new(),
                values: referenced
                    .iter()
                    .zip(&ref_idx)
                    .map(|(name, &i)| (name.clone(), record[i].to_string()))
                    .collect(),
            }
        });
        entry.y.push(y);
        entry.rows.push(row);
    }
    if order.is_empty() {
        return Err(data_error(path, 1, "no data rows"));
    }

    let mut clusters = Vec::with_capacity(order.len());
    let mut cluster_values = Vec::with_capacity(order.len());
    for id in order {
        let b = groups.remove(&id).expect("group recorded on first sight");
        clusters.push(Cluster::new(id, b.y, b.rows)?);
        cluster_values.push(b.values);
    }
    let mut names = vec![config.argument.clone()];
    names.extend(layout.atoms.iter().map(|a| a.label()));
    Ok(LoadedData {
        dataset: ClusteredDataset::new(clusters, names)?,
        cluster_values,
    })
}
