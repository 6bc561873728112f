//! Command-line interface: argument parsing, configuration resolution and
//! the four commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use covgof_core::{run_mgfc_test, run_univariate_test, FollowUp, Mode, ScenarioSpec, StatisticChoice, TestConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::exec::Parallel;
use crate::experiment::{
    run_power_experiment, run_type1_experiment, Cell, ExperimentReport, MgfcProcedure, UnivariateProcedure, ALPHAS,
};
use crate::io::{load_csv, Schema};
use crate::presets::{parse_cell_filter, parse_grid, ExperimentPlan, Preset, ProcedureSpec, Scale};
use crate::report::{
    read_json, slug, write_cells, write_draws, write_json, write_power_curve, write_surface, DataSummary,
    ExperimentFile, TestOutcome, TestReport, ToolInfo,
};
use crate::svg::{Chart, Series};

#[derive(Debug, Parser)]
#[command(name = "covgof", version, about = "Goodness-of-fit tests for parametric covariance structures in sparse functional data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a long-format CSV dataset.
    Test(TestArgs),
    /// Type I error experiment over a preset or configured design.
    Simulate(SimulateArgs),
    /// Power experiment over a grid of effect sizes.
    Power(PowerArgs),
    /// Regenerate tables and charts from a saved report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Improved,
    Original,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Improved => Mode::Improved,
            ModeArg::Original => Mode::Original,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatisticArg {
    Linf,
    L2,
    Both,
}

impl From<StatisticArg> for StatisticChoice {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Linf => StatisticChoice::Linf,
            StatisticArg::L2 => StatisticChoice::L2,
            StatisticArg::Both => StatisticChoice::Both,
        }
    }
}

/// Options shared by every command that runs tests.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "covgof-out")]
    pub out: PathBuf,
    #[arg(long, env = "COVGOF_SEED")]
    pub seed: Option<u64>,
    /// Bootstrap replicates.
    #[arg(long = "B")]
    pub n_boot: Option<usize>,
    /// Spline basis size per margin.
    #[arg(long = "H")]
    pub n_basis: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub statistic: Option<StatisticArg>,
    /// Use the uncapped subsample size for the ℓ∞ aggregate.
    #[arg(long)]
    pub no_cap: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// Long-format CSV with subject, outcome, time and value columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Run per-outcome univariate tests at α / K when the multivariate test rejects.
    #[arg(long)]
    pub followup: bool,
    #[arg(long)]
    pub subject_col: Option<String>,
    #[arg(long)]
    pub outcome_col: Option<String>,
    #[arg(long)]
    pub time_col: Option<String>,
    #[arg(long)]
    pub value_col: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// Monte Carlo replications per cell.
    #[arg(long = "R")]
    pub replications: Option<usize>,
    /// Published replication counts, bootstrap size and sample sizes.
    #[arg(long)]
    pub full_scale: bool,
    /// Restrict to cells matching KEY=VALUE[,KEY=VALUE...], e.g. `N=100,J=5`.
    #[arg(long)]
    pub cell: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub sim: SimulateArgs,
    /// Effect sizes as lo:hi:step.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// A report.json written by another command.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "covgof-out")]
    pub out: PathBuf,
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Partial test settings, merged over the defaults.
    pub test: Option<Value>,
    pub schema: Option<Schema>,
    pub seed: Option<u64>,
    pub experiment: Option<FileExperiment>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileExperiment {
    pub preset: Option<Preset>,
    pub name: Option<String>,
    pub cells: Option<Vec<Cell>>,
    /// Single-cell shorthand for `cells`.
    pub scenario: Option<ScenarioSpec>,
    /// Outcomes carrying the effect in the `scenario` shorthand; all by default.
    pub active_outcomes: Option<Vec<usize>>,
    pub procedure: Option<ProcedureSpec>,
    pub replications: Option<usize>,
    pub grid: Option<GridSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Range(String),
    Values(Vec<f64>),
}

impl GridSpec {
    fn resolve(&self) -> Result<Vec<f64>> {
        match self {
            GridSpec::Range(s) => parse_grid(s),
            GridSpec::Values(v) => {
                if v.is_empty() || v.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
                    return Err(Error::Config("grid values must be finite, non-negative and nonempty".into()));
                }
                Ok(v.clone())
            }
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults, then the file's partial test settings, then flags.
fn resolve_test_config(mut base: TestConfig, file: &FileConfig, args: &CommonArgs) -> Result<TestConfig> {
    if let Some(patch) = &file.test {
        let mut v = serde_json::to_value(base)?;
        merge(&mut v, patch.clone());
        base = serde_json::from_value(v).map_err(|e| Error::Config(format!("test settings: {e}")))?;
    }
    if let Some(seed) = args.seed.or(file.seed) {
        base.seed = seed;
    }
    if let Some(b) = args.n_boot {
        base.n_boot = b;
    }
    if let Some(h) = args.n_basis {
        base.n_basis = h;
    }
    if let Some(a) = args.alpha {
        base.alpha = a;
    }
    if let Some(m) = args.mode {
        base.mode = m.into();
    }
    if let Some(s) = args.statistic {
        base.statistic = s.into();
    }
    if args.no_cap {
        base.cap_m = false;
    }
    base.validate()?;
    Ok(base)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Configuration echoed into `test` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTest {
    pub input: String,
    pub schema: Schema,
    pub test: TestConfig,
    pub workers: usize,
}

pub fn cmd_test(args: &TestArgs) -> Result<i32> {
    let file = load_file_config(args.common.config.as_deref())?;
    let base = TestConfig {
        followup: FollowUp::Never,
        ..TestConfig::default()
    };
    let mut test = resolve_test_config(base, &file, &args.common)?;
    if args.followup && test.followup == FollowUp::Never {
        test.followup = FollowUp::IfRejected;
    }
    let mut schema = file.schema.clone().unwrap_or_default();
    for (slot, flag) in [
        (&mut schema.subject, &args.subject_col),
        (&mut schema.outcome, &args.outcome_col),
        (&mut schema.time, &args.time_col),
        (&mut schema.value, &args.value_col),
    ] {
        if let Some(name) = flag {
            *slot = name.clone();
        }
    }
    let data = load_csv(&args.input, &schema)?;
    let exec = Parallel::new(args.common.workers)?;
    let result = if data.n_outcomes() == 1 {
        TestOutcome::Univariate(Box::new(run_univariate_test(&data, 1, &test, &exec)?))
    } else {
        TestOutcome::Multivariate(Box::new(run_mgfc_test(&data, &test, &exec)?))
    };

    let out = &args.common.out;
    ensure_dir(out)?;
    let report = TestReport {
        tool: ToolInfo::default(),
        command: "test".into(),
        config: ResolvedTest {
            input: args.input.display().to_string(),
            schema,
            test,
            workers: args.common.workers,
        },
        data: DataSummary::of(&data),
        result,
    };
    write_json(&report, &out.join("report.json"))?;
    write_draws(&report.result, &out.join("draws.csv"))?;
    let map = report.result.time_map();
    for pair in report.result.surfaces() {
        write_surface(pair, &map, &out.join(format!("cov_surface_{}.csv", pair.outcome)))?;
    }
    print_test_summary(&report.result);
    Ok(0)
}

fn print_test_summary(result: &TestOutcome) {
    match result {
        TestOutcome::Univariate(r) => {
            println!(
                "{}: T = {:.6}, p = {:.4}, {}",
                r.outcome.label,
                r.outcome.statistic,
                r.p_value,
                if r.reject { "reject" } else { "do not reject" }
            );
        }
        TestOutcome::Multivariate(r) => {
            for o in &r.outcomes {
                println!("{}: T = {:.6}", o.label, o.statistic);
            }
            for (name, agg) in [("linf", &r.linf), ("l2", &r.l2)] {
                if let Some(a) = agg {
                    println!(
                        "{name}: statistic = {:.6}, m = {}, p = {:.4}, {}",
                        a.statistic,
                        a.m,
                        a.p_value,
                        if a.reject { "reject" } else { "do not reject" }
                    );
                }
            }
            if let Some(f) = &r.followup {
                let labels: Vec<&str> = f.flagged.iter().map(|&k| r.outcomes[k - 1].label.as_str()).collect();
                println!("follow-up at {:.4}: flagged [{}]", f.threshold, labels.join(", "));
            }
        }
    }
}

/// Configuration echoed into `simulate` and `power` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedExperiment {
    pub name: String,
    pub preset: Option<Preset>,
    pub scale: Scale,
    pub procedure: ProcedureSpec,
    pub replications: usize,
    pub seed: u64,
    pub test: TestConfig,
    pub cell_filter: Vec<(String, String)>,
    pub grid: Option<Vec<f64>>,
    pub workers: usize,
}

struct Resolved {
    config: ResolvedExperiment,
    cells: Vec<Cell>,
}

fn resolve_experiment(args: &SimulateArgs, grid_flag: Option<&str>) -> Result<Resolved> {
    let file = load_file_config(args.common.config.as_deref())?;
    let fx = file.experiment.clone().unwrap_or_default();
    let scale = if args.full_scale { Scale::Full } else { Scale::Desk };
    let preset = match (&args.preset, fx.preset) {
        (Some(p), _) => Some(p.parse::<Preset>()?),
        (None, p) => p,
    };
    let mut plan = match preset {
        Some(p) => p.plan(scale),
        None => ExperimentPlan {
            name: "custom".into(),
            cells: Vec::new(),
            procedure: ProcedureSpec::Mgfc { bonferroni: true },
            replications: if args.full_scale { 1000 } else { 500 },
            n_boot: if args.full_scale { 1000 } else { 200 },
            grid: None,
        },
    };
    if let Some(name) = fx.name {
        plan.name = name;
    }
    if let Some(cells) = fx.cells {
        plan.cells = cells;
    }
    if let Some(spec) = fx.scenario {
        let active = fx.active_outcomes.unwrap_or_else(|| (1..=spec.n_outcomes()).collect());
        plan.cells = vec![Cell {
            label: spec.name.clone(),
            params: Default::default(),
            spec,
            active,
        }];
    }
    if let Some(p) = fx.procedure {
        plan.procedure = p;
    }
    if let Some(r) = fx.replications {
        plan.replications = r;
    }
    if let Some(g) = &fx.grid {
        plan.grid = Some(g.resolve()?);
    }
    if let Some(g) = grid_flag {
        plan.grid = Some(parse_grid(g)?);
    }
    if let Some(r) = args.replications {
        plan.replications = r;
    }
    if plan.cells.is_empty() {
        return Err(Error::Config("no design: pass --preset or a config with experiment cells".into()));
    }
    for c in &plan.cells {
        c.spec.validate()?;
    }

    let base = TestConfig {
        n_boot: plan.n_boot,
        followup: FollowUp::Never,
        ..TestConfig::default()
    };
    let test = resolve_test_config(base, &file, &args.common)?;
    if let (ProcedureSpec::Univariate { modes }, Some(m)) = (&mut plan.procedure, args.common.mode) {
        *modes = vec![m.into()];
    }
    let cell_filter = match &args.cell {
        Some(s) => parse_cell_filter(s)?,
        None => Vec::new(),
    };
    let cells: Vec<Cell> = plan.cells.iter().filter(|c| c.matches(&cell_filter)).cloned().collect();
    if cells.is_empty() {
        return Err(Error::Config(format!("no cell of '{}' matches the filter", plan.name)));
    }
    let seed = test.seed;
    Ok(Resolved {
        config: ResolvedExperiment {
            name: plan.name,
            preset,
            scale,
            procedure: plan.procedure,
            replications: plan.replications,
            seed,
            test,
            cell_filter,
            grid: plan.grid,
            workers: args.common.workers,
        },
        cells,
    })
}

fn run_experiment(r: &Resolved, power: bool, exec: &Parallel) -> Result<ExperimentReport> {
    let c = &r.config;
    match (&c.procedure, power) {
        (ProcedureSpec::Univariate { modes }, false) => {
            let p = UnivariateProcedure {
                config: c.test,
                modes: modes.clone(),
            };
            run_type1_experiment(&r.cells, &p, c.replications, c.seed, exec)
        }
        (ProcedureSpec::Univariate { modes }, true) => {
            let p = UnivariateProcedure {
                config: c.test,
                modes: modes.clone(),
            };
            run_power_experiment(&r.cells, grid(c)?, &p, c.replications, c.seed, exec)
        }
        (ProcedureSpec::Mgfc { bonferroni }, false) => {
            let p = MgfcProcedure {
                config: c.test,
                bonferroni: *bonferroni,
            };
            run_type1_experiment(&r.cells, &p, c.replications, c.seed, exec)
        }
        (ProcedureSpec::Mgfc { bonferroni }, true) => {
            let p = MgfcProcedure {
                config: c.test,
                bonferroni: *bonferroni,
            };
            run_power_experiment(&r.cells, grid(c)?, &p, c.replications, c.seed, exec)
        }
    }
}

fn grid(c: &ResolvedExperiment) -> Result<&[f64]> {
    c.grid
        .as_deref()
        .ok_or_else(|| Error::Config(format!("'{}' has no effect-size grid; pass --grid lo:hi:step", c.name)))
}

fn print_cells(report: &ExperimentReport) {
    for c in &report.cells {
        if c.aborted {
            println!("{}: aborted after {} failed replications", c.label, c.failures.len());
            continue;
        }
        let rates: Vec<String> = c
            .rates
            .iter()
            .map(|r| format!("{}@{} = {:.3} ({:.3})", r.statistic, r.alpha, r.rate, r.se))
            .collect();
        println!("{}: {}", c.label, rates.join(", "));
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let resolved = resolve_experiment(args, None)?;
    let exec = Parallel::new(args.common.workers)?;
    let report = run_experiment(&resolved, false, &exec)?;
    let out = &args.common.out;
    ensure_dir(out)?;
    let file = ExperimentFile {
        tool: ToolInfo::default(),
        command: "simulate".into(),
        config: resolved.config,
        report,
    };
    write_json(&file, &out.join("report.json"))?;
    write_cells(&file.report, &out.join("cells.csv"))?;
    print_cells(&file.report);
    Ok(if file.report.any_aborted() { 3 } else { 0 })
}

pub fn cmd_power(args: &PowerArgs) -> Result<i32> {
    let resolved = resolve_experiment(&args.sim, args.grid.as_deref())?;
    grid(&resolved.config)?;
    if let Some(c) = resolved.cells.iter().find(|c| c.active.is_empty()) {
        return Err(Error::Config(format!("cell '{}' has no outcome carrying an effect", c.label)));
    }
    let exec = Parallel::new(args.sim.common.workers)?;
    let report = run_experiment(&resolved, true, &exec)?;
    let out = &args.sim.common.out;
    ensure_dir(out)?;
    let file = ExperimentFile {
        tool: ToolInfo::default(),
        command: "power".into(),
        config: resolved.config,
        report,
    };
    write_json(&file, &out.join("report.json"))?;
    write_power_artifacts(&file.report, &file.config.name, file.config.test.alpha, out)?;
    print_cells(&file.report);
    Ok(if file.report.any_aborted() { 3 } else { 0 })
}

fn display_name(statistic: &str) -> String {
    match statistic {
        "linf" => "ℓ∞ aggregate".into(),
        "l2" => "ℓ2 aggregate".into(),
        "bonferroni" => "Bonferroni univariate".into(),
        other => other.into(),
    }
}

/// Rate-versus-Δ charts, one per base cell, at the configured level when it
/// is one of the tabulated levels and at 0.05 otherwise.
pub fn power_charts(report: &ExperimentReport, name: &str, alpha: f64) -> Vec<(String, Chart)> {
    let level = ALPHAS.iter().copied().find(|a| (a - alpha).abs() < 1e-12).unwrap_or(ALPHAS[0]);
    let curve = report.power_curve.as_deref().unwrap_or(&[]);
    let mut labels: Vec<&str> = Vec::new();
    for p in curve {
        if !labels.contains(&p.cell.as_str()) {
            labels.push(&p.cell);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let series = report
                .statistics
                .iter()
                .map(|s| Series {
                    name: display_name(s),
                    points: curve
                        .iter()
                        .filter(|p| p.cell == label && &p.statistic == s && (p.alpha - level).abs() < 1e-12)
                        .map(|p| (p.delta, p.rate, p.se))
                        .collect(),
                })
                .collect();
            let chart = Chart {
                title: format!("{name}: {label}"),
                x_label: "effect size Δ".into(),
                y_label: format!("rejection rate at α = {level}"),
                series,
                reference: Some(level),
            };
            (format!("power_{}.svg", slug(label)), chart)
        })
        .collect()
}

fn write_power_artifacts(report: &ExperimentReport, name: &str, alpha: f64, out: &Path) -> Result<()> {
    write_cells(report, &out.join("cells.csv"))?;
    write_power_curve(report, &out.join("power_curve.csv"))?;
    for (file, chart) in power_charts(report, name, alpha) {
        let path = out.join(file);
        fs::write(&path, chart.render()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<i32> {
    let value: Value = read_json(&args.input)?;
    let command = value.get("command").and_then(Value::as_str).unwrap_or_default().to_string();
    match command.as_str() {
        "simulate" | "power" => {
            let file: ExperimentFile<ResolvedExperiment> = serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("{}: not an experiment report: {e}", args.input.display())))?;
            ensure_dir(&args.out)?;
            if command == "power" {
                write_power_artifacts(&file.report, &file.config.name, file.config.test.alpha, &args.out)?;
            } else {
                write_cells(&file.report, &args.out.join("cells.csv"))?;
            }
            print_cells(&file.report);
            Ok(0)
        }
        "test" => {
            let result = &value["result"];
            println!("{}", serde_json::to_string_pretty(&summarize_test(result))?);
            Ok(0)
        }
        _ => Err(Error::Config(format!("{}: unrecognized report", args.input.display()))),
    }
}

/// Headline numbers of a saved test report.
fn summarize_test(result: &Value) -> Value {
    let pick = |v: &Value| {
        serde_json::json!({
            "statistic": v["statistic"],
            "p_value": v["p_value"],
            "reject": v["reject"],
        })
    };
    match result["kind"].as_str() {
        Some("univariate") => serde_json::json!({
            "outcome": result["outcome"]["label"],
            "statistic": result["outcome"]["statistic"],
            "p_value": result["p_value"],
            "reject": result["reject"],
        }),
        _ => serde_json::json!({
            "linf": pick(&result["linf"]),
            "l2": pick(&result["l2"]),
            "followup": result["followup"]["flagged"],
        }),
    }
}

/// Runs the parsed command and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Power(a) => cmd_power(a),
        Command::Report(a) => cmd_report(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merging_keeps_unpatched_fields() {
        let base = TestConfig {
            n_boot: 200,
            ..TestConfig::default()
        };
        let file = FileConfig {
            test: Some(serde_json::json!({"alpha": 0.1, "variance": {"n_basis": 8}})),
            ..Default::default()
        };
        let args = Cli::parse_from(["covgof", "simulate", "--H", "7"]);
        let Command::Simulate(s) = args.command else { unreachable!() };
        let cfg = resolve_test_config(base, &file, &s.common).unwrap();
        assert_eq!(cfg.n_boot, 200);
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.n_basis, 7);
        assert_eq!(cfg.variance.n_basis, 8);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::parse_from([
            "covgof", "power", "--preset", "scenario1a", "--grid", "0.2:1.5:0.1", "--R", "10", "--B", "20", "--mode",
            "original", "--statistic", "l2", "--no-cap", "--workers", "2", "--full-scale", "--cell", "J=5",
        ]);
        let Command::Power(p) = cli.command else { unreachable!() };
        assert_eq!(p.sim.replications, Some(10));
        assert_eq!(p.sim.common.n_boot, Some(20));
        assert_eq!(p.grid.as_deref(), Some("0.2:1.5:0.1"));
        assert!(p.sim.full_scale && p.sim.common.no_cap);
    }

    #[test]
    fn invalid_overrides_are_input_errors() {
        let cli = Cli::parse_from(["covgof", "simulate", "--alpha", "1.5"]);
        let Command::Simulate(s) = cli.command else { unreachable!() };
        let e = resolve_test_config(TestConfig::default(), &FileConfig::default(), &s.common).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
