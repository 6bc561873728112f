//! Acceptance criteria at their pinned tolerances. Prints one PASS/FAIL line
//! per criterion and exits nonzero if any fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 4 10`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::process::Command;
use std::time::Instant;

use covgof::experiment::{run_cell, run_power_experiment, Cell, CellReport, MgfcProcedure, UnivariateProcedure};
use covgof::io::{save_csv, Schema};
use covgof::presets::{battery_spec, Preset, Scale, BATTERY_LABELS};
use covgof::Parallel;
use covgof_core::estimation::{estimate_error_variance_naive, estimate_error_variance_smooth};
use covgof_core::gof::{m_out_of_n_size, outcome_statistic, StatisticContext};
use covgof_core::{FollowUp, LongDataset, Mode, ScenarioSpec, Statistic, TestConfig};
use serde_json::Value;

const BOOT: usize = 200;

fn desk_config() -> TestConfig {
    TestConfig {
        n_boot: BOOT,
        followup: FollowUp::Never,
        ..TestConfig::default()
    }
}

fn cell(label: &str, spec: ScenarioSpec, active: Vec<usize>) -> Cell {
    Cell {
        label: label.into(),
        params: Default::default(),
        spec,
        active,
    }
}

fn rate(c: &CellReport, statistic: &str) -> (f64, f64) {
    match c.rate(statistic, 0.05) {
        Some(r) => (r.rate, r.se),
        None => (f64::NAN, f64::NAN),
    }
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn univariate_cell(s2: f64, seed: u64, exec: &Parallel) -> CellReport {
    let c = cell("table1", ScenarioSpec::univariate_sparse(100, 2, 6, s2), vec![]);
    let p = UnivariateProcedure {
        config: desk_config(),
        modes: vec![Mode::Improved, Mode::Original],
    };
    run_cell(&c, &p, 500, seed, exec)
}

fn criteria_1_and_2(exec: &Parallel) -> Vec<(u32, bool, String)> {
    let r = univariate_cell(4.0, 1001, exec);
    let (imp, imp_se) = rate(&r, "improved");
    let (orig, orig_se) = rate(&r, "original");
    vec![
        (
            1,
            within(imp, 0.02, 0.09),
            format!("improved Type I {imp:.3} (SE {imp_se:.3}) in [0.02, 0.09], failures {}", r.failures.len()),
        ),
        (
            2,
            orig >= 0.12 && orig > imp,
            format!("original Type I {orig:.3} (SE {orig_se:.3}) >= 0.12 and > improved {imp:.3}"),
        ),
    ]
}

fn criterion_3(exec: &Parallel) -> (bool, String) {
    let r = univariate_cell(0.25, 1003, exec);
    let (imp, _) = rate(&r, "improved");
    let (orig, _) = rate(&r, "original");
    (
        within(imp, 0.02, 0.10) && within(orig, 0.02, 0.10),
        format!("sigma2=0.25: improved {imp:.3}, original {orig:.3}, both in [0.02, 0.10]"),
    )
}

fn mgfc(bonferroni: bool) -> MgfcProcedure {
    MgfcProcedure {
        config: desk_config(),
        bonferroni,
    }
}

fn criterion_4(exec: &Parallel) -> (bool, String) {
    let plan = Preset::Table2.plan(Scale::Desk);
    let mut ok = true;
    let mut detail = Vec::new();
    for j in ["5", "10"] {
        let c = plan
            .cells
            .iter()
            .find(|c| c.params["N"] == "100" && c.params["J"] == j)
            .expect("table2 cell");
        let r = run_cell(c, &mgfc(false), 500, 1004, exec);
        let (li, _) = rate(&r, "linf");
        let (l2, _) = rate(&r, "l2");
        ok &= within(li, 0.02, 0.09) && within(l2, 0.02, 0.09);
        detail.push(format!("J={j}: linf {li:.3}, l2 {l2:.3}"));
    }
    (ok, format!("{}; each in [0.02, 0.09]", detail.join("; ")))
}

fn criterion_5(exec: &Parallel) -> (bool, String) {
    let c = cell("scenario2", ScenarioSpec::scenario2(200, 0.0), vec![1, 2]);
    let r = run_cell(&c, &mgfc(false), 300, 1005, exec);
    let (li, _) = rate(&r, "linf");
    let (l2, _) = rate(&r, "l2");
    let l2_10 = r.rate("l2", 0.10).map_or(f64::NAN, |x| x.rate);
    (
        within(li, 0.02, 0.10) && within(l2, 0.02, 0.10),
        format!("N=200: linf {li:.3}, l2 {l2:.3} in [0.02, 0.10] (l2 at 0.10: {l2_10:.3})"),
    )
}

/// `a >= b - 2 SE`, with SE the larger of the two binomial standard errors.
fn not_below(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 - 2.0 * a.1.max(b.1)
}

fn scenario1_quadratic(setting_b: bool) -> Cell {
    let plan = if setting_b { Preset::Scenario1b } else { Preset::Scenario1a }.plan(Scale::Desk);
    plan.cells
        .into_iter()
        .find(|c| c.params["deviation"] == "quadratic" && c.params["J"] == "5")
        .expect("scenario 1 cell")
}

fn criterion_6(exec: &Parallel) -> (bool, String) {
    let base = scenario1_quadratic(false);
    let r = run_power_experiment(&[base], &[0.8, 1.2], &mgfc(true), 300, 1006, exec).expect("power run");
    let mut ok = true;
    let mut detail = Vec::new();
    for c in &r.cells {
        let (li, l2, bo) = (rate(c, "linf"), rate(c, "l2"), rate(c, "bonferroni"));
        ok &= not_below(l2, li) && not_below(li, bo);
        detail.push(format!("delta={}: l2 {:.3}, linf {:.3}, bonferroni {:.3}", c.params["delta"], l2.0, li.0, bo.0));
    }
    for s in ["linf", "l2", "bonferroni"] {
        ok &= not_below(rate(&r.cells[1], s), rate(&r.cells[0], s));
    }
    (ok, format!("{}; ordering and monotonicity within 2 SE", detail.join("; ")))
}

fn criterion_7(exec: &Parallel) -> (bool, String) {
    let base = scenario1_quadratic(true);
    let r = run_power_experiment(&[base], &[1.2], &mgfc(false), 300, 1007, exec).expect("power run");
    let (li, l2) = (rate(&r.cells[0], "linf"), rate(&r.cells[0], "l2"));
    (not_below(li, l2), format!("setting b, delta=1.2: linf {:.3} >= l2 {:.3} - 2 SE", li.0, l2.0))
}

fn criterion_8() -> (bool, String) {
    let r = support::truncation_suite(1008, 200, 500);
    (
        r.min_eigenvalue >= -1e-10 && r.min_margin >= -1e-12 && r.max_idempotence_error <= 1e-12,
        format!(
            "min eigenvalue {:.2e}, min candidate margin {:.2e}, idempotence {:.2e}",
            r.min_eigenvalue, r.min_margin, r.max_idempotence_error
        ),
    )
}

fn criterion_9() -> (bool, String) {
    let worst = support::hs_quadrature_suite(1009, 50);
    (worst <= 1e-6, format!("max relative error {worst:.2e} over 50 surfaces"))
}

fn criterion_10() -> (bool, String) {
    let m: Vec<usize> = [100, 500, 1000].iter().map(|&n| m_out_of_n_size(n, Statistic::Linf, true)).collect();
    (m == [100, 441, 700], format!("m = {m:?}"))
}

fn criterion_11() -> Vec<(u32, bool, String)> {
    let spec = ScenarioSpec::univariate_sparse(100, 2, 6, 4.0);
    let cfg = desk_config();
    let ctx = StatisticContext::new(&cfg).expect("context");
    let (mut smooth, mut naive, mut below) = (Vec::new(), Vec::new(), 0);
    for r in 0..200 {
        let (unit, _) = spec.generate(1011, r).unwrap().rescale_time().unwrap();
        let fit = outcome_statistic(&unit.panel(1).unwrap(), &ctx).expect("fit");
        let s = estimate_error_variance_smooth(&fit.residuals, &cfg.variance).expect("smooth").sigma_sq;
        let n = estimate_error_variance_naive(&fit.residuals, &fit.alt.theta_hat, &cfg.variance).expect("naive").sigma_sq;
        below += usize::from(n < 4.0);
        smooth.push((s - 4.0).abs());
        naive.push((n - 4.0).abs());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[99] + v[100])
    };
    let (ms, mn) = (median(&mut smooth), median(&mut naive));
    vec![
        (11, ms < mn, format!("(a) median |error| smooth {ms:.3} < naive {mn:.3}")),
        (
            11,
            below as f64 >= 0.6 * 200.0,
            format!("(b) naive below 4 in {below}/200 replicates, need >= 120"),
        ),
    ]
}

fn battery_csv(delta: f64, seed: u64, run: u64, path: &std::path::Path) {
    let data = battery_spec(200, delta).generate(seed, run).unwrap();
    let labels = BATTERY_LABELS.iter().map(|s| s.to_string()).collect();
    let data = LongDataset::from_observations(data.observations().to_vec(), data.subject_labels().to_vec(), labels).unwrap();
    save_csv(&data, path, &Schema::default()).unwrap();
}

/// Runs `covgof test` on one synthetic battery and reports whether the
/// multivariate test rejected and the follow-up flagged only FAQ.
fn battery_run(delta: f64, seed: u64, run: u64, dir: &std::path::Path) -> bool {
    let input = dir.join("battery.csv");
    let out = dir.join("out");
    battery_csv(delta, seed, run, &input);
    let status = Command::new(env!("CARGO_BIN_EXE_covgof"))
        .args(["test", "--followup", "--B", &BOOT.to_string(), "--seed", &run.to_string()])
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .env_remove("COVGOF_SEED")
        .output()
        .expect("binary runs");
    if status.status.code() != Some(0) {
        return false;
    }
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let r = &report["result"];
    let rejected = r["linf"]["reject"].as_bool() == Some(true) || r["l2"]["reject"].as_bool() == Some(true);
    rejected && r["followup"]["flagged"] == serde_json::json!([5])
}

fn criterion_12() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    // pilot on separate seeds: the effect size with the most exact FAQ flags
    let pilot: Vec<(f64, usize)> = [1.0, 2.0, 3.0, 4.0]
        .into_iter()
        .map(|d| (d, (0..20).filter(|&r| battery_run(d, 7_012, r, dir.path())).count()))
        .collect();
    let delta = pilot.iter().fold(pilot[0], |best, &p| if p.1 > best.1 { p } else { best }).0;
    let hits = (0..100).filter(|&r| battery_run(delta, 1012, r, dir.path())).count();
    let pilot: Vec<String> = pilot.iter().map(|(d, h)| format!("{d}:{h}/20")).collect();
    (
        hits >= 80,
        format!(
            "delta={delta} (pilot {}): multivariate rejection with exactly FAQ flagged in {hits}/100 runs",
            pilot.join(" ")
        ),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: u32| selected.is_empty() || selected.contains(&k);
    let exec = Parallel::new(0).expect("thread pool");
    let mut results: Vec<(u32, bool, String)> = Vec::new();
    let mut timed = |ks: &[u32], f: &mut dyn FnMut() -> Vec<(u32, bool, String)>| {
        if ks.iter().any(|&k| want(k)) {
            let start = Instant::now();
            let rows = f();
            let secs = start.elapsed().as_secs_f64();
            for (k, ok, detail) in rows {
                println!("criterion {k:>2} {}: {detail} [{secs:.0}s]", if ok { "PASS" } else { "FAIL" });
                results.push((k, ok, detail));
            }
        }
    };
    let one = |k: u32, r: (bool, String)| vec![(k, r.0, r.1)];
    timed(&[10], &mut || one(10, criterion_10()));
    timed(&[9], &mut || one(9, criterion_9()));
    timed(&[8], &mut || one(8, criterion_8()));
    timed(&[11], &mut criterion_11);
    timed(&[1, 2], &mut || criteria_1_and_2(&exec));
    timed(&[3], &mut || one(3, criterion_3(&exec)));
    timed(&[4], &mut || one(4, criterion_4(&exec)));
    timed(&[5], &mut || one(5, criterion_5(&exec)));
    timed(&[6], &mut || one(6, criterion_6(&exec)));
    timed(&[7], &mut || one(7, criterion_7(&exec)));
    timed(&[12], &mut || one(12, criterion_12()));

    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} checks passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing criteria {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
