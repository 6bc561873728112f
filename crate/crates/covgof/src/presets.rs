//! Named simulation designs and effect-size grids.

use std::collections::BTreeMap;
use std::str::FromStr;

use covgof_core::sim::OutcomeSpec;
use covgof_core::{Deviation, Mode, ScenarioSpec, VisitModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{format_number, Cell};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table1,
    Table2,
    Scenario1a,
    Scenario1b,
    Scenario2,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            "scenario1a" => Ok(Preset::Scenario1a),
            "scenario1b" => Ok(Preset::Scenario1b),
            "scenario2" => Ok(Preset::Scenario2),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (expected table1, table2, scenario1a, scenario1b or scenario2)"
            ))),
        }
    }
}

/// Desk scale keeps runs tractable; full scale matches the published
/// replication counts and sample sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

/// Which procedure an experiment evaluates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcedureSpec {
    Univariate { modes: Vec<Mode> },
    Mgfc { bonferroni: bool },
}

/// A fully specified experiment before any command-line overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub cells: Vec<Cell>,
    pub procedure: ProcedureSpec,
    pub replications: usize,
    pub n_boot: usize,
    /// Default effect-size grid; `None` for designs without a deviation.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

fn tags(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn deviation_name(d: Deviation) -> &'static str {
    match d {
        Deviation::None => "none",
        Deviation::Quadratic => "quadratic",
        Deviation::Trigonometric => "trigonometric",
    }
}

fn scenario1_cells(setting_b: bool) -> Vec<Cell> {
    let mut cells = Vec::new();
    for deviation in [Deviation::Quadratic, Deviation::Trigonometric] {
        for j in [5, 10] {
            let n = 100;
            cells.push(Cell {
                label: format!("{} N={n} J={j}", deviation_name(deviation)),
                params: tags(&[("N", n.to_string()), ("J", j.to_string()), ("deviation", deviation_name(deviation).into())]),
                spec: ScenarioSpec::scenario1(n, j, 0.0, setting_b, deviation),
                active: if setting_b { vec![1] } else { vec![1, 2, 3] },
            });
        }
    }
    cells
}

impl Preset {
    pub fn plan(self, scale: Scale) -> ExperimentPlan {
        let full = scale == Scale::Full;
        let n_boot = if full { 1000 } else { 200 };
        let replications = match (self, full) {
            (_, false) => 500,
            (Preset::Table1, true) => 5000,
            (_, true) => 1000,
        };
        let (name, cells, procedure, grid) = match self {
            Preset::Table1 => {
                let mut cells = Vec::new();
                for s2 in [0.25, 1.0, 4.0] {
                    for n in [100, 500] {
                        for (jbar, lo, hi) in [(4, 2, 6), (7, 5, 9)] {
                            cells.push(Cell {
                                label: format!("sigma2={s2} N={n} J={jbar}"),
                                params: tags(&[
                                    ("sigma2", format_number(s2)),
                                    ("N", n.to_string()),
                                    ("J", jbar.to_string()),
                                ]),
                                spec: ScenarioSpec::univariate_sparse(n, lo, hi, s2),
                                active: Vec::new(),
                            });
                        }
                    }
                }
                let procedure = ProcedureSpec::Univariate {
                    modes: vec![Mode::Improved, Mode::Original],
                };
                ("table1", cells, procedure, None)
            }
            Preset::Table2 => {
                let mut cells = Vec::new();
                for n in [100, 500] {
                    for j in [5, 10, 15, 20] {
                        cells.push(Cell {
                            label: format!("N={n} J={j}"),
                            params: tags(&[("N", n.to_string()), ("J", j.to_string())]),
                            spec: ScenarioSpec::scenario1(n, j, 0.0, false, Deviation::None),
                            active: Vec::new(),
                        });
                    }
                }
                ("table2", cells, ProcedureSpec::Mgfc { bonferroni: false }, None)
            }
            Preset::Scenario1a | Preset::Scenario1b => {
                let b = self == Preset::Scenario1b;
                let grid = parse_grid("0.2:1.5:0.1").expect("static grid");
                (
                    if b { "scenario1b" } else { "scenario1a" },
                    scenario1_cells(b),
                    ProcedureSpec::Mgfc { bonferroni: true },
                    Some(grid),
                )
            }
            Preset::Scenario2 => {
                let n = if full { 500 } else { 200 };
                let cells = vec![Cell {
                    label: format!("quadratic N={n}"),
                    params: tags(&[("N", n.to_string()), ("deviation", "quadratic".into())]),
                    spec: ScenarioSpec::scenario2(n, 0.0),
                    active: vec![1, 2],
                }];
                let grid = parse_grid("4:12:1").expect("static grid");
                ("scenario2", cells, ProcedureSpec::Mgfc { bonferroni: true }, Some(grid))
            }
        };
        ExperimentPlan {
            name: name.into(),
            cells,
            procedure,
            replications,
            n_boot,
            grid,
        }
    }
}

/// Parses `lo:hi:step` into the inclusive arithmetic grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("invalid grid '{s}': {why}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("expected lo:hi:step"));
    }
    let num = |p: &str| p.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad("not a number"));
    let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if step <= 0.0 {
        return Err(bad("step must be positive"));
    }
    if hi < lo {
        return Err(bad("upper end below lower end"));
    }
    if lo < 0.0 {
        return Err(bad("effect sizes must be non-negative"));
    }
    let span = (hi - lo) / step;
    let n = span.round();
    if (span - n).abs() > 1e-6 {
        return Err(bad("step does not divide the range"));
    }
    if n > 10_000.0 {
        return Err(bad("more than 10000 points"));
    }
    Ok((0..=n as usize)
        .map(|i| format_number(lo + i as f64 * step).parse().expect("formatted number"))
        .collect())
}

/// Parses `KEY=VALUE[,KEY=VALUE...]` cell filters.
pub fn parse_cell_filter(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("invalid cell filter '{p}': expected KEY=VALUE")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Labels of the five-outcome synthetic cognitive battery.
pub const BATTERY_LABELS: [&str; 5] = ["ADAS13", "MMSE", "RAVLT", "CDRSB", "FAQ"];

/// Five correlated outcomes with ADNI-like visit counts in which only the
/// last outcome (`FAQ`) departs from linear random effects, by a periodic
/// deviation of size `delta`.
pub fn battery_spec(n: usize, delta: f64) -> ScenarioSpec {
    let outcomes = (0..5)
        .map(|k| OutcomeSpec {
            sigma0_sq: 1.0,
            sigma01: -0.25,
            sigma1_sq: 0.5,
            error_var: 1.0,
            delta: if k == 4 { delta } else { 0.0 },
        })
        .collect();
    ScenarioSpec {
        name: format!("battery N={n} delta={delta}"),
        n_subjects: n,
        visits: VisitModel::adni_like(),
        domain: (0.0, 1.0),
        outcomes,
        cross: Default::default(),
        sigma: None,
        deviation: Deviation::Trigonometric,
        shared_z: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_power_grid_has_fourteen_points() {
        let g = parse_grid("0.2:1.5:0.1").unwrap();
        assert_eq!(g.len(), 14);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[13], 1.5);
        assert_eq!(g[3], 0.5);
        assert_eq!(parse_grid("4:12:1").unwrap().len(), 9);
        assert_eq!(parse_grid("1:1:0.5").unwrap(), vec![1.0]);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        for g in ["", "1:2", "1:2:0", "2:1:0.1", "0:1:0.3", "a:1:0.1", "-1:1:1", "0:1:-0.1", "0:inf:1"] {
            assert!(parse_grid(g).is_err(), "{g}");
        }
    }

    #[test]
    fn presets_parse_and_have_the_documented_shape() {
        assert!("table3".parse::<Preset>().is_err());
        let t1 = Preset::Table1.plan(Scale::Desk);
        assert_eq!(t1.cells.len(), 12);
        assert_eq!((t1.replications, t1.n_boot), (500, 200));
        assert_eq!(Preset::Table1.plan(Scale::Full).replications, 5000);
        let t2 = "table2".parse::<Preset>().unwrap().plan(Scale::Full);
        assert_eq!(t2.cells.len(), 8);
        assert_eq!((t2.replications, t2.n_boot), (1000, 1000));
        let f = parse_cell_filter("N=100,J=5").unwrap();
        assert_eq!(t2.cells.iter().filter(|c| c.matches(&f)).count(), 1);
        let s1b = Preset::Scenario1b.plan(Scale::Desk);
        assert_eq!(s1b.cells.len(), 4);
        assert!(s1b.cells.iter().all(|c| c.active == vec![1]));
        assert_eq!(Preset::Scenario2.plan(Scale::Desk).cells[0].spec.n_subjects, 200);
        assert_eq!(Preset::Scenario2.plan(Scale::Full).cells[0].spec.n_subjects, 500);
    }

    #[test]
    fn cell_filters_need_key_value_pairs() {
        assert!(parse_cell_filter("N").is_err());
        assert_eq!(parse_cell_filter("").unwrap(), vec![]);
    }

    #[test]
    fn battery_design_is_valid() {
        let spec = battery_spec(50, 3.0);
        spec.validate().unwrap();
        let data = spec.generate(1, 0).unwrap();
        assert_eq!(data.n_outcomes(), 5);
        assert_eq!(spec.outcomes.iter().filter(|o| o.delta > 0.0).count(), 1);
    }
}
