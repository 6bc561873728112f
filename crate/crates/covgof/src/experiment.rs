//! Monte Carlo runners for Type I error tables and power curves.

use std::collections::BTreeMap;
use std::time::Instant;

use covgof_core::gof::bonferroni_followup;
use covgof_core::rng::{derive_seed, Domain};
use covgof_core::{
    run_mgfc_test, run_univariate_test, Executor, FollowUp, LongDataset, Mode, ScenarioSpec, Sequential, Statistic,
    TestConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nominal levels every cell is evaluated at.
pub const ALPHAS: [f64; 2] = [0.05, 0.10];

/// A cell is abandoned when more than this fraction of its replications fail.
pub const MAX_CELL_FAILURE_FRACTION: f64 = 0.02;

/// A testing procedure evaluated on each simulated dataset. It may report
/// several p-values, one per named variant; a variant rejects at level α when
/// its p-value is below α.
pub trait Procedure: Sync {
    fn names(&self) -> Vec<String>;
    fn p_values(&self, data: &LongDataset, seed: u64) -> covgof_core::Result<Vec<f64>>;
}

/// Univariate test of outcome 1 in one or more modes, all on the same seed.
#[derive(Debug, Clone)]
pub struct UnivariateProcedure {
    pub config: TestConfig,
    pub modes: Vec<Mode>,
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Improved => "improved",
        Mode::Original => "original",
    }
}

impl Procedure for UnivariateProcedure {
    fn names(&self) -> Vec<String> {
        self.modes.iter().map(|&m| mode_name(m).to_string()).collect()
    }

    fn p_values(&self, data: &LongDataset, seed: u64) -> covgof_core::Result<Vec<f64>> {
        self.modes
            .iter()
            .map(|&mode| {
                let cfg = TestConfig { mode, seed, ..self.config };
                run_univariate_test(data, 1, &cfg, &Sequential).map(|r| r.p_value)
            })
            .collect()
    }
}

/// Multivariate test, optionally alongside the Bonferroni-adjusted univariate
/// procedure whose p-value is `min(1, K · min_k p_k)`.
#[derive(Debug, Clone)]
pub struct MgfcProcedure {
    pub config: TestConfig,
    pub bonferroni: bool,
}

impl Procedure for MgfcProcedure {
    fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.config.statistic.includes(Statistic::Linf) {
            names.push("linf".to_string());
        }
        if self.config.statistic.includes(Statistic::L2) {
            names.push("l2".to_string());
        }
        if self.bonferroni {
            names.push("bonferroni".to_string());
        }
        names
    }

    fn p_values(&self, data: &LongDataset, seed: u64) -> covgof_core::Result<Vec<f64>> {
        let cfg = TestConfig {
            seed,
            followup: FollowUp::Never,
            ..self.config
        };
        let r = run_mgfc_test(data, &cfg, &Sequential)?;
        let mut p: Vec<f64> = r.linf.iter().chain(r.l2.iter()).map(|a| a.p_value).collect();
        if self.bonferroni {
            let f = bonferroni_followup(data, &cfg, &Sequential)?;
            let k = f.tests.len() as f64;
            let min = f.tests.iter().map(|t| t.p_value).fold(f64::INFINITY, f64::min);
            p.push((k * min).min(1.0));
        }
        Ok(p)
    }
}

/// One design point of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    /// Key/value tags used for filtering and tabulation, e.g. `N=100`.
    pub params: BTreeMap<String, String>,
    pub spec: ScenarioSpec,
    /// Outcomes (1-based) whose effect size follows the power grid.
    #[serde(default)]
    pub active: Vec<usize>,
}

impl Cell {
    /// Whether every `key=value` pair in `filter` matches this cell's tags.
    pub fn matches(&self, filter: &[(String, String)]) -> bool {
        filter.iter().all(|(k, v)| self.params.get(k).is_some_and(|p| p == v))
    }

    /// The cell with effect size `delta` on its active outcomes.
    pub fn at_delta(&self, delta: f64) -> Result<Cell> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("effect size must be finite and non-negative, got {delta}")));
        }
        let mut cell = self.clone();
        for &k in &self.active {
            let o = cell
                .spec
                .outcomes
                .get_mut(k.wrapping_sub(1))
                .ok_or_else(|| Error::Config(format!("active outcome {k} does not exist in cell {}", self.label)))?;
            o.delta = delta;
        }
        cell.params.insert("delta".into(), format_number(delta));
        Ok(cell)
    }
}

/// Shortest decimal form of a grid value, with float noise removed.
pub fn format_number(x: f64) -> String {
    let rounded = (x * 1e9).round() / 1e9;
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub statistic: String,
    pub alpha: f64,
    pub rejections: usize,
    pub rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub params: BTreeMap<String, String>,
    pub scenario: ScenarioSpec,
    pub replications: usize,
    pub completed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub aborted: bool,
    /// Empty when the cell was aborted.
    pub rates: Vec<Rate>,
    pub mean_runtime_ms: f64,
}

impl CellReport {
    pub fn rate(&self, statistic: &str, alpha: f64) -> Option<&Rate> {
        self.rates
            .iter()
            .find(|r| r.statistic == statistic && (r.alpha - alpha).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub cell: String,
    pub delta: f64,
    pub statistic: String,
    pub alpha: f64,
    pub rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub statistics: Vec<String>,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub cells: Vec<CellReport>,
    /// Present for power experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_curve: Option<Vec<PowerPoint>>,
}

impl ExperimentReport {
    pub fn any_aborted(&self) -> bool {
        self.cells.iter().any(|c| c.aborted)
    }
}

/// Runs `replications` generate-then-test cycles for one cell. Replication
/// `r` draws its data from `spec.generate(seed, r)` and tests it with the
/// seed derived from `(seed, r)`, so results do not depend on scheduling.
pub fn run_cell<P: Procedure, E: Executor>(
    cell: &Cell,
    procedure: &P,
    replications: usize,
    seed: u64,
    exec: &E,
) -> CellReport {
    let names = procedure.names();
    let outcomes = exec.map(replications, |r| {
        let start = Instant::now();
        let res = cell
            .spec
            .generate(seed, r as u64)
            .and_then(|data| procedure.p_values(&data, derive_seed(seed, Domain::TestSeed, r as u64)));
        (res, start.elapsed().as_secs_f64())
    });

    let mut failures = Vec::new();
    let mut counts = vec![[0usize; ALPHAS.len()]; names.len()];
    let mut completed = 0;
    let mut elapsed = 0.0;
    for (r, (res, secs)) in outcomes.into_iter().enumerate() {
        elapsed += secs;
        match res {
            Ok(p) if p.len() == names.len() => {
                completed += 1;
                for (c, &pv) in counts.iter_mut().zip(&p) {
                    for (slot, &alpha) in c.iter_mut().zip(&ALPHAS) {
                        *slot += usize::from(pv < alpha);
                    }
                }
            }
            Ok(p) => failures.push(ReplicateFailure {
                replicate: r,
                message: format!("procedure returned {} p-values for {} statistics", p.len(), names.len()),
            }),
            Err(e) => failures.push(ReplicateFailure {
                replicate: r,
                message: e.to_string(),
            }),
        }
    }

    let aborted = replications == 0 || failures.len() as f64 > MAX_CELL_FAILURE_FRACTION * replications as f64;
    let rates = if aborted {
        Vec::new()
    } else {
        names
            .iter()
            .zip(&counts)
            .flat_map(|(name, c)| {
                ALPHAS.iter().zip(c).map(move |(&alpha, &rejections)| {
                    let rate = rejections as f64 / completed as f64;
                    Rate {
                        statistic: name.clone(),
                        alpha,
                        rejections,
                        rate,
                        se: (rate * (1.0 - rate) / completed as f64).sqrt(),
                    }
                })
            })
            .collect()
    };
    CellReport {
        label: cell.label.clone(),
        params: cell.params.clone(),
        scenario: cell.spec.clone(),
        replications,
        completed,
        failures,
        aborted,
        rates,
        mean_runtime_ms: if replications > 0 { 1e3 * elapsed / replications as f64 } else { 0.0 },
    }
}

/// Type I error rates for every cell; all effect sizes must be zero.
pub fn run_type1_experiment<P: Procedure, E: Executor>(
    cells: &[Cell],
    procedure: &P,
    replications: usize,
    seed: u64,
    exec: &E,
) -> Result<ExperimentReport> {
    if replications == 0 {
        return Err(Error::Config("replications R must be at least 1".into()));
    }
    for c in cells {
        if c.spec.outcomes.iter().any(|o| o.delta != 0.0) {
            return Err(Error::Config(format!("cell {} has a nonzero effect size; Type I runs need delta = 0", c.label)));
        }
    }
    Ok(ExperimentReport {
        statistics: procedure.names(),
        alphas: ALPHAS.to_vec(),
        seed,
        cells: cells.iter().map(|c| run_cell(c, procedure, replications, seed, exec)).collect(),
        power_curve: None,
    })
}

/// Rejection rates over a grid of effect sizes for every base cell. Every
/// grid point reuses the same seed, so neighbouring points share their
/// random effects, visit designs and bootstrap streams.
pub fn run_power_experiment<P: Procedure, E: Executor>(
    cells: &[Cell],
    deltas: &[f64],
    procedure: &P,
    replications: usize,
    seed: u64,
    exec: &E,
) -> Result<ExperimentReport> {
    if deltas.is_empty() {
        return Err(Error::Config("effect-size grid is empty".into()));
    }
    if replications == 0 {
        return Err(Error::Config("replications R must be at least 1".into()));
    }
    let mut reports = Vec::with_capacity(cells.len() * deltas.len());
    let mut curve = Vec::new();
    for base in cells {
        if base.active.is_empty() {
            return Err(Error::Config(format!("cell {} has no outcome carrying the effect", base.label)));
        }
        for &delta in deltas {
            let cell = base.at_delta(delta)?;
            let report = run_cell(&cell, procedure, replications, seed, exec);
            curve.extend(report.rates.iter().map(|r| PowerPoint {
                cell: base.label.clone(),
                delta,
                statistic: r.statistic.clone(),
                alpha: r.alpha,
                rate: r.rate,
                se: r.se,
            }));
            reports.push(report);
        }
    }
    Ok(ExperimentReport {
        statistics: procedure.names(),
        alphas: ALPHAS.to_vec(),
        seed,
        cells: reports,
        power_curve: Some(curve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Always(f64);

    impl Procedure for Always {
        fn names(&self) -> Vec<String> {
            vec!["stub".into()]
        }

        fn p_values(&self, _: &LongDataset, _: u64) -> covgof_core::Result<Vec<f64>> {
            Ok(vec![self.0])
        }
    }

    struct FailsEvery(usize);

    impl Procedure for FailsEvery {
        fn names(&self) -> Vec<String> {
            vec!["stub".into()]
        }

        fn p_values(&self, _: &LongDataset, seed: u64) -> covgof_core::Result<Vec<f64>> {
            if (seed as usize).is_multiple_of(self.0) {
                Err(covgof_core::Error::Internal("stub failure".into()))
            } else {
                Ok(vec![0.5])
            }
        }
    }

    fn cell() -> Cell {
        Cell {
            label: "tiny".into(),
            params: BTreeMap::from([("N".into(), "20".into())]),
            spec: ScenarioSpec::univariate_sparse(20, 2, 6, 1.0),
            active: vec![1],
        }
    }

    #[test]
    fn always_rejecting_stub_has_rate_one() {
        let r = run_type1_experiment(&[cell()], &Always(0.0), 40, 1, &Sequential).unwrap();
        let c = &r.cells[0];
        assert!(!c.aborted);
        for alpha in ALPHAS {
            let rate = c.rate("stub", alpha).unwrap();
            assert_eq!(rate.rate, 1.0);
            assert_eq!(rate.se, 0.0);
        }
    }

    #[test]
    fn never_rejecting_stub_and_standard_error() {
        let r = run_cell(&cell(), &Always(0.07), 50, 1, &Sequential);
        assert_eq!(r.rate("stub", 0.05).unwrap().rate, 0.0);
        assert_eq!(r.rate("stub", 0.10).unwrap().rate, 1.0);
        assert_eq!(r.completed, 50);
    }

    #[test]
    fn cells_abort_above_two_percent_failures() {
        // derived test seeds are effectively random, so count what failed
        let r = run_cell(&cell(), &FailsEvery(5), 100, 3, &Sequential);
        assert!(r.failures.len() > 2);
        assert!(r.aborted);
        assert!(r.rates.is_empty());
        let ok = run_cell(&cell(), &FailsEvery(usize::MAX), 100, 3, &Sequential);
        assert!(!ok.aborted);
    }

    #[test]
    fn type1_runs_reject_effects_and_power_needs_a_grid() {
        let shifted = cell().at_delta(0.5).unwrap();
        assert!(run_type1_experiment(&[shifted], &Always(0.0), 5, 1, &Sequential).is_err());
        assert!(run_power_experiment(&[cell()], &[], &Always(0.0), 5, 1, &Sequential).is_err());
        assert!(cell().at_delta(-1.0).is_err());
    }

    #[test]
    fn power_curve_has_one_point_per_delta_statistic_and_level() {
        let grid = [0.0, 0.5, 1.0];
        let r = run_power_experiment(&[cell()], &grid, &Always(0.0), 4, 1, &Sequential).unwrap();
        assert_eq!(r.cells.len(), 3);
        assert_eq!(r.power_curve.unwrap().len(), 3 * ALPHAS.len());
        assert_eq!(r.cells[1].scenario.outcomes[0].delta, 0.5);
        assert_eq!(r.cells[1].params["delta"], "0.5");
    }

    #[test]
    fn filters_match_all_pairs() {
        let c = cell();
        assert!(c.matches(&[("N".into(), "20".into())]));
        assert!(!c.matches(&[("N".into(), "100".into())]));
        assert!(!c.matches(&[("J".into(), "5".into())]));
        assert!(c.matches(&[]));
    }

    #[test]
    fn grid_values_print_without_float_noise() {
        assert_eq!(format_number(0.2 + 0.1), "0.3");
        assert_eq!(format_number(12.0), "12");
        assert_eq!(format_number(-0.0), "0");
    }
}
