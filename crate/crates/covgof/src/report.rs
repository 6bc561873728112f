//! JSON reports and the CSV tables that accompany them.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use covgof_core::gof::SurfacePair;
use covgof_core::{LongDataset, MultivariateTestResult, TimeMap, UnivariateTestResult};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{format_number, ExperimentReport};

/// Points per axis of exported covariance surfaces.
pub const SURFACE_GRID: usize = 61;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_subjects: usize,
    pub n_outcomes: usize,
    pub n_rows: usize,
    pub dropped_rows: usize,
    pub domain: (f64, f64),
    pub outcome_labels: Vec<String>,
    pub visits_per_outcome: Vec<VisitSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSummary {
    pub outcome: String,
    pub mean_visits: f64,
    pub max_visits: usize,
    pub single_visit_subjects: usize,
}

impl DataSummary {
    pub fn of(data: &LongDataset) -> Self {
        let visits_per_outcome = data
            .outcome_labels()
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let counts: Vec<usize> = data.visit_counts(i + 1).into_iter().filter(|&c| c > 0).collect();
                VisitSummary {
                    outcome: label.clone(),
                    mean_visits: counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64,
                    max_visits: counts.iter().copied().max().unwrap_or(0),
                    single_visit_subjects: counts.iter().filter(|&&c| c == 1).count(),
                }
            })
            .collect();
        Self {
            n_subjects: data.n_subjects(),
            n_outcomes: data.n_outcomes(),
            n_rows: data.n_rows(),
            dropped_rows: data.dropped_rows(),
            domain: data.domain(),
            outcome_labels: data.outcome_labels().to_vec(),
            visits_per_outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestOutcome {
    Univariate(Box<UnivariateTestResult>),
    Multivariate(Box<MultivariateTestResult>),
}

impl TestOutcome {
    pub fn surfaces(&self) -> &[SurfacePair] {
        match self {
            TestOutcome::Univariate(r) => &r.surfaces,
            TestOutcome::Multivariate(r) => &r.surfaces,
        }
    }

    pub fn time_map(&self) -> TimeMap {
        match self {
            TestOutcome::Univariate(r) => r.time_map,
            TestOutcome::Multivariate(r) => r.time_map,
        }
    }
}

/// Report written by the `test` command. `C` is the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport<C> {
    pub tool: ToolInfo,
    pub command: String,
    pub config: C,
    pub data: DataSummary,
    pub result: TestOutcome,
}

/// Report written by the `simulate` and `power` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFile<C> {
    pub tool: ToolInfo,
    pub command: String,
    pub config: C,
    pub report: ExperimentReport,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Internal(format!("{}: {other:?}", path.display())),
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Bootstrap draws. Univariate: `replicate,statistic`. Multivariate: one row
/// per aggregate and replicate with the per-outcome statistics and the
/// aggregate value.
pub fn write_draws(outcome: &TestOutcome, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = csv_err(path);
    match outcome {
        TestOutcome::Univariate(r) => {
            w.write_record(["replicate", "statistic"]).map_err(&err)?;
            for (b, d) in r.draws.iter().enumerate() {
                w.write_record([b.to_string(), d.to_string()]).map_err(&err)?;
            }
        }
        TestOutcome::Multivariate(r) => {
            let mut header = vec!["aggregate".to_string(), "replicate".into()];
            header.extend(r.outcomes.iter().map(|o| o.label.clone()));
            header.push("value".into());
            w.write_record(&header).map_err(&err)?;
            for (name, agg) in [("linf", &r.linf), ("l2", &r.l2)] {
                let Some(agg) = agg else { continue };
                for (b, (row, v)) in agg.draws.iter().zip(&agg.aggregate_draws).enumerate() {
                    let mut rec = vec![name.to_string(), b.to_string()];
                    rec.extend(row.iter().map(f64::to_string));
                    rec.push(v.to_string());
                    w.write_record(&rec).map_err(&err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The alternative and smoothed null surfaces of one outcome on a
/// `SURFACE_GRID × SURFACE_GRID` grid of original-scale times.
pub fn write_surface(pair: &SurfacePair, map: &TimeMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = csv_err(path);
    w.write_record(["t", "t_prime", "alternative", "smoothed_null"]).map_err(&err)?;
    let alt = pair.alternative.grid(SURFACE_GRID);
    let null = pair.smoothed_null.grid(SURFACE_GRID);
    let step = 1.0 / (SURFACE_GRID - 1) as f64;
    for i in 0..SURFACE_GRID {
        for j in 0..SURFACE_GRID {
            let idx = i * SURFACE_GRID + j;
            w.write_record([
                map.from_unit(i as f64 * step).to_string(),
                map.from_unit(j as f64 * step).to_string(),
                alt[idx].to_string(),
                null[idx].to_string(),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Level in percent, e.g. `5` for α = 0.05.
fn level_tag(alpha: f64) -> String {
    format_number(alpha * 100.0)
}

/// One row per cell with rates and standard errors for every statistic and level.
pub fn write_cells(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = csv_err(path);
    let keys: BTreeSet<&String> = report.cells.iter().flat_map(|c| c.params.keys()).collect();
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["replications", "completed", "failures", "aborted"].map(String::from));
    for s in &report.statistics {
        for &a in &report.alphas {
            header.push(format!("rate_{s}_{}", level_tag(a)));
            header.push(format!("se_{s}_{}", level_tag(a)));
        }
    }
    header.push("mean_runtime_ms".into());
    w.write_record(&header).map_err(&err)?;
    for c in &report.cells {
        let mut rec = vec![c.label.clone()];
        rec.extend(keys.iter().map(|k| c.params.get(*k).cloned().unwrap_or_default()));
        rec.extend([
            c.replications.to_string(),
            c.completed.to_string(),
            c.failures.len().to_string(),
            c.aborted.to_string(),
        ]);
        for s in &report.statistics {
            for &a in &report.alphas {
                match c.rate(s, a) {
                    Some(r) => rec.extend([r.rate.to_string(), r.se.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
        }
        rec.push(format!("{:.3}", c.mean_runtime_ms));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `cell,delta,statistic,alpha,rate,se`.
pub fn write_power_curve(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let err = csv_err(path);
    w.write_record(["cell", "delta", "statistic", "alpha", "rate", "se"]).map_err(&err)?;
    for p in report.power_curve.iter().flatten() {
        w.write_record([
            p.cell.clone(),
            p.delta.to_string(),
            p.statistic.clone(),
            p.alpha.to_string(),
            p.rate.to_string(),
            p.se.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// File-name friendly form of a cell label.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() || ch == '.' {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_names() {
        assert_eq!(slug("quadratic N=100 J=5"), "quadratic_n_100_j_5");
        assert_eq!(slug("sigma2=0.25 N=100"), "sigma2_0.25_n_100");
    }

    #[test]
    fn level_tags() {
        assert_eq!(level_tag(0.05), "5");
        assert_eq!(level_tag(0.1), "10");
    }
}
