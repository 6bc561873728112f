//! Test statistics and the parametric bootstrap.
//!
//! The statistic for one outcome is the Hilbert–Schmidt distance between the
//! tensor-product least-squares covariance and the null covariance pushed
//! through the same least-squares smoother. Its null distribution is
//! approximated by refitting the whole pipeline on data simulated from the
//! fitted null model, with visit designs resampled from the observed subjects.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LongDataset, Panel, TimeMap};
use crate::error::{invalid, Error, Result, Stage, StageExt};
use crate::estimation::lmm::{fit_null_multivariate, fit_null_univariate, NullFitMultivariate, NullFitOptions, NullFitUnivariate};
use crate::estimation::mean::{demean, fit_mean, MeanFit};
use crate::estimation::tensor::{fit_alt_covariance, smooth_null, AltCovariance, PairSolver, TruncationDiagnostics};
use crate::estimation::variance::{
    estimate_error_variance_naive, estimate_error_variance_smooth, ErrorVarianceEstimate, VarianceOptions,
};
use crate::exec::Executor;
use crate::rng::{derive_seed, stream, Domain, StreamRng};
use crate::spline::{BSplineBasis, CoefSurface, GramMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// PSD-truncated alternative, smooth error variance.
    Improved,
    /// Raw alternative, error variance against its own diagonal.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticChoice {
    Linf,
    L2,
    Both,
}

impl StatisticChoice {
    pub fn includes(self, s: Statistic) -> bool {
        matches!(
            (self, s),
            (StatisticChoice::Both, _) | (StatisticChoice::Linf, Statistic::Linf) | (StatisticChoice::L2, Statistic::L2)
        )
    }
}

/// When the multivariate test runs per-outcome univariate tests at `α / K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowUp {
    Never,
    IfRejected,
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Tensor-product basis size per margin.
    pub n_basis: usize,
    pub n_boot: usize,
    pub alpha: f64,
    pub mode: Mode,
    pub statistic: StatisticChoice,
    /// Cap the ℓ∞ resample size at `N`.
    pub cap_m: bool,
    pub seed: u64,
    /// Report `(1 + #{T* > T}) / (1 + B)` instead of the plain exceedance fraction.
    pub plus_one: bool,
    pub mean_basis: usize,
    pub variance: VarianceOptions,
    pub null_fit: NullFitOptions,
    /// Abort when more than this fraction of replicates fail or do not converge.
    pub max_failure_fraction: f64,
    pub followup: FollowUp,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            n_basis: 5,
            n_boot: 1000,
            alpha: 0.05,
            mode: Mode::Improved,
            statistic: StatisticChoice::Both,
            cap_m: true,
            seed: 0,
            plus_one: false,
            mean_basis: 10,
            variance: VarianceOptions::default(),
            null_fit: NullFitOptions::default(),
            max_failure_fraction: 0.05,
            followup: FollowUp::IfRejected,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(invalid!("bootstrap replicates B must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.n_basis < 4 {
            return Err(invalid!("basis size H must be at least 4, got {}", self.n_basis));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(invalid!("failure fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `‖Δ‖²_HS = tr(G Δ G Δ)` for a symmetric coefficient matrix `Δ`.
pub fn hs_norm_sq(delta: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    let a = g * delta;
    // tr(A A) with A = GΔ
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * a[(j, i)];
        }
    }
    acc
}

/// Hilbert–Schmidt distance between two surfaces over the same basis.
pub fn hs_distance(a: &CoefSurface, b: &CoefSurface, gram: &GramMatrix) -> Result<f64> {
    if a.basis != b.basis || a.basis.n_basis() != gram.dim() {
        return Err(invalid!("surfaces and Gram matrix use different bases"));
    }
    let delta = &a.theta - &b.theta;
    Ok(hs_norm_sq(&delta, &gram.g).max(0.0).sqrt())
}

/// `(max_k T_k, mean_k T_k²)`.
pub fn aggregate_stats(t: &[f64]) -> Result<(f64, f64)> {
    if t.is_empty() {
        return Err(invalid!("aggregates need at least one outcome statistic"));
    }
    let t_inf = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_l2 = t.iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
    Ok((t_inf, t_l2))
}

/// Bootstrap sample size: `N` for ℓ2, `⌈7 N^{2/3}⌉` (capped at `N` if asked) for ℓ∞.
pub fn m_out_of_n_size(n: usize, statistic: Statistic, cap: bool) -> usize {
    match statistic {
        Statistic::L2 => n,
        Statistic::Linf => {
            let x = 7.0 * (n as f64).cbrt().powi(2);
            // 7 · 1000^{2/3} is exactly 700; do not let rounding push it to 701
            let r = x.round();
            let m = if (x - r).abs() < 1e-9 * x.max(1.0) { r } else { x.ceil() } as usize;
            if cap {
                m.min(n)
            } else {
                m
            }
        }
    }
}

/// `#{b : draws_b > observed} / B`.
pub fn p_value(draws: &[f64], observed: f64) -> f64 {
    if draws.is_empty() {
        return f64::NAN;
    }
    draws.iter().filter(|&&d| d > observed).count() as f64 / draws.len() as f64
}

fn p_value_with(draws: &[f64], observed: f64, plus_one: bool) -> f64 {
    if plus_one {
        let exceed = draws.iter().filter(|&&d| d > observed).count() as f64;
        (1.0 + exceed) / (1.0 + draws.len() as f64)
    } else {
        p_value(draws, observed)
    }
}

/// Fixed ingredients of every statistic evaluation.
#[derive(Debug, Clone)]
pub struct StatisticContext {
    pub basis: BSplineBasis,
    pub gram: GramMatrix,
    pub mode: Mode,
    pub mean_basis: usize,
    pub null_fit: NullFitOptions,
}

impl StatisticContext {
    pub fn new(cfg: &TestConfig) -> Result<Self> {
        let basis = BSplineBasis::equal(cfg.n_basis)?;
        let gram = GramMatrix::new(&basis)?;
        Ok(Self {
            basis,
            gram,
            mode: cfg.mode,
            mean_basis: cfg.mean_basis,
            null_fit: cfg.null_fit,
        })
    }
}

/// Everything computed for one outcome on the unit time scale.
#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub statistic: f64,
    /// The statistic with the untruncated surface, for diagnostics.
    pub statistic_untruncated: f64,
    pub mean: MeanFit,
    pub residuals: Panel,
    pub null: NullFitUnivariate,
    pub alt: AltCovariance,
    pub smoothed_null: CoefSurface,
}

/// Demean, fit the null, fit the alternative, smooth the null, measure.
pub fn outcome_statistic(panel: &Panel, ctx: &StatisticContext) -> Result<OutcomeFit> {
    let mean = fit_mean(panel, ctx.mean_basis).stage(Stage::Mean)?;
    let residuals = demean(panel, &mean);
    let null = fit_null_univariate(&residuals, &ctx.null_fit).stage(Stage::NullFit)?;
    let solver = PairSolver::new(&residuals, &ctx.basis).stage(Stage::AltCovariance)?;
    let alt = fit_alt_covariance(&solver, &residuals, &ctx.gram);
    let smoothed = smooth_null(&solver, &residuals, |t, s| null.eval_null_cov(t, s));
    let raw = hs_distance(&alt.theta_hat, &smoothed.theta0, &ctx.gram)?;
    let statistic = match ctx.mode {
        Mode::Improved => hs_distance(&alt.theta_star, &smoothed.theta0, &ctx.gram)?,
        Mode::Original => raw,
    };
    Ok(OutcomeFit {
        statistic,
        statistic_untruncated: raw,
        mean,
        residuals,
        null,
        alt,
        smoothed_null: smoothed.theta0,
    })
}

/// Error variance by the mode's estimator.
pub fn error_variance(fit: &OutcomeFit, mode: Mode, opts: &VarianceOptions) -> Result<ErrorVarianceEstimate> {
    match mode {
        Mode::Improved => estimate_error_variance_smooth(&fit.residuals, opts),
        Mode::Original => estimate_error_variance_naive(&fit.residuals, &fit.alt.theta_hat, opts),
    }
    .stage(Stage::ErrorVariance)
}

/// Lower Cholesky factor of a covariance, with `1e-8 I` jitter if needed.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let n = cov.nrows();
    let jittered = cov + DMatrix::<f64>::identity(n, n) * 1e-8;
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Internal(alloc::format!("random-effects covariance not PSD:\n{cov}")))
}

/// One outcome's generating ingredients on the unit time scale.
#[derive(Debug, Clone)]
pub struct OutcomeGenerator {
    pub mean: MeanFit,
    pub error_sd: f64,
}

/// Per-subject visit designs, one time list per outcome.
#[derive(Debug, Clone)]
pub struct VisitPatterns {
    n_outcomes: usize,
    /// `times[s * K + k]` for pattern `s`.
    times: Vec<Vec<f64>>,
}

impl VisitPatterns {
    pub fn from_panels(panels: &[Panel], n_subjects: usize) -> Self {
        let k = panels.len();
        let mut times = vec![Vec::new(); n_subjects * k];
        for (kk, p) in panels.iter().enumerate() {
            for c in 0..p.n_curves() {
                times[p.subjects[c] * k + kk] = p.curve(c).0.to_vec();
            }
        }
        // a subject with no observations at all carries no design
        let mut kept = Vec::with_capacity(times.len());
        for s in 0..n_subjects {
            let row = &times[s * k..(s + 1) * k];
            if row.iter().any(|t| !t.is_empty()) {
                kept.extend(row.iter().cloned());
            }
        }
        Self {
            n_outcomes: k,
            times: kept,
        }
    }

    pub fn n_patterns(&self) -> usize {
        self.times.len() / self.n_outcomes.max(1)
    }

    fn pattern(&self, s: usize, k: usize) -> &[f64] {
        &self.times[s * self.n_outcomes + k]
    }
}

/// Simulates `n` subjects from the null model with designs resampled from
/// `patterns`. `factor` is the lower Cholesky factor of the `2K × 2K`
/// random-effects covariance.
pub fn simulate_null(
    patterns: &VisitPatterns,
    generators: &[OutcomeGenerator],
    factor: &DMatrix<f64>,
    n: usize,
    rng: &mut StreamRng,
) -> Vec<Panel> {
    let k = generators.len();
    let d = 2 * k;
    let mut panels: Vec<Panel> = (0..k).map(|_| Panel::with_capacity(n, n * 8)).collect();
    let mut z = vec![0.0; d];
    let mut b = vec![0.0; d];
    for i in 0..n {
        let s = rng.random_range(0..patterns.n_patterns());
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for r in 0..d {
            b[r] = (0..=r).map(|c| factor[(r, c)] * z[c]).sum();
        }
        for (kk, g) in generators.iter().enumerate() {
            let times = patterns.pattern(s, kk);
            if times.is_empty() {
                continue;
            }
            let p = &mut panels[kk];
            p.start_curve(i);
            for &t in times {
                let e: f64 = rng.sample(StandardNormal);
                p.push(t, g.mean.eval(t) + b[2 * kk] + b[2 * kk + 1] * t + g.error_sd * e);
            }
        }
    }
    panels
}

fn take_subjects(panel: &Panel, m: usize) -> Panel {
    let mut out = Panel::default();
    for c in 0..panel.n_curves() {
        if panel.subjects[c] >= m {
            break;
        }
        out.start_curve(panel.subjects[c]);
        let (t, y) = panel.curve(c);
        for (&tt, &yy) in t.iter().zip(y) {
            out.push(tt, yy);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplicateDiagnostics {
    pub requested: usize,
    pub used: usize,
    pub failed: usize,
    pub nonconverged_null_fits: usize,
}

struct ReplicateDraw {
    full: Vec<f64>,
    sub: Option<Vec<f64>>,
    nonconverged: usize,
}

fn replicate_statistics(panels: &[Panel], ctx: &StatisticContext) -> Result<(Vec<f64>, usize)> {
    let mut out = Vec::with_capacity(panels.len());
    let mut nonconverged = 0;
    for p in panels {
        let fit = outcome_statistic(p, ctx)?;
        if !fit.null.converged {
            nonconverged += 1;
        }
        out.push(fit.statistic);
    }
    Ok((out, nonconverged))
}

/// Runs `B` replicates; replicate `b` draws from the stream `(seed, b)` only.
#[allow(clippy::too_many_arguments)]
fn run_bootstrap<E: Executor>(
    exec: &E,
    cfg: &TestConfig,
    ctx: &StatisticContext,
    patterns: &VisitPatterns,
    generators: &[OutcomeGenerator],
    factor: &DMatrix<f64>,
    n: usize,
    m_sub: Option<usize>,
) -> Result<(Vec<ReplicateDraw>, ReplicateDiagnostics)> {
    let draws: Vec<Result<ReplicateDraw>> = exec.map(cfg.n_boot, |b| {
        let mut rng = stream(cfg.seed, Domain::Bootstrap, b as u64);
        let size = n.max(m_sub.unwrap_or(0));
        let panels = simulate_null(patterns, generators, factor, size, &mut rng);
        let full_panels: Vec<Panel> = if size > n {
            panels.iter().map(|p| take_subjects(p, n)).collect()
        } else {
            panels.clone()
        };
        let (full, mut nonconverged) = replicate_statistics(&full_panels, ctx)?;
        let sub = match m_sub {
            Some(m) if m != n => {
                let sub_panels: Vec<Panel> = panels.iter().map(|p| take_subjects(p, m)).collect();
                let (s, nc) = replicate_statistics(&sub_panels, ctx)?;
                nonconverged += nc;
                Some(s)
            }
            Some(_) => Some(full.clone()),
            None => None,
        };
        Ok(ReplicateDraw {
            full,
            sub,
            nonconverged,
        })
    });
    let mut diag = ReplicateDiagnostics {
        requested: cfg.n_boot,
        ..Default::default()
    };
    let mut ok = Vec::with_capacity(draws.len());
    let mut last_err = None;
    for d in draws {
        match d {
            Ok(d) => {
                diag.nonconverged_null_fits += d.nonconverged;
                ok.push(d);
            }
            Err(e) => {
                diag.failed += 1;
                last_err = Some(e);
            }
        }
    }
    diag.used = ok.len();
    let bad_replicates = diag.failed + ok.iter().filter(|d| d.nonconverged > 0).count();
    let limit = cfg.max_failure_fraction * cfg.n_boot as f64;
    if bad_replicates as f64 > limit || ok.is_empty() {
        let detail = last_err.map(|e| alloc::format!("; last error: {e}")).unwrap_or_default();
        return Err(Error::NonConvergence(alloc::format!(
            "{} of {} bootstrap replicates failed and {} had non-converged null fits{detail}",
            diag.failed, cfg.n_boot, diag.nonconverged_null_fits
        ))
        .at(Stage::Bootstrap));
    }
    Ok((ok, diag))
}

/// Observed-data summary for one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub outcome: usize,
    pub label: String,
    pub statistic: f64,
    pub statistic_untruncated: f64,
    /// Null fit on the internal `[0, 1]` time scale.
    pub null_fit: NullFitUnivariate,
    /// `(σ0², σ01, σ1²)` on the original time scale.
    pub null_params_original: (f64, f64, f64),
    pub truncation: TruncationDiagnostics,
    pub mean_lambda: f64,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub single_visit_subjects: usize,
}

/// Fitted surfaces for export, on the unit time scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePair {
    pub outcome: usize,
    /// `Ĉ_A*` in improved mode, `Ĉ_A` in original mode.
    pub alternative: CoefSurface,
    pub smoothed_null: CoefSurface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateTestResult {
    pub config: TestConfig,
    pub outcome: OutcomeReport,
    pub error_variance: ErrorVarianceEstimate,
    pub p_value: f64,
    pub reject: bool,
    pub draws: Vec<f64>,
    pub replicates: ReplicateDiagnostics,
    pub time_map: TimeMap,
    #[serde(skip)]
    pub surfaces: Vec<SurfacePair>,
}

fn outcome_report(fit: &OutcomeFit, k: usize, label: &str, map: &TimeMap) -> OutcomeReport {
    let panel = &fit.residuals;
    OutcomeReport {
        outcome: k,
        label: label.into(),
        statistic: fit.statistic,
        statistic_untruncated: fit.statistic_untruncated,
        null_fit: fit.null,
        null_params_original: map.null_params_to_original((fit.null.sigma0_sq, fit.null.sigma01, fit.null.sigma1_sq)),
        truncation: fit.alt.diagnostics(),
        mean_lambda: fit.mean.lambda(),
        n_subjects: panel.n_curves(),
        n_observations: panel.n_points(),
        single_visit_subjects: (0..panel.n_curves()).filter(|&i| panel.len_of(i) == 1).count(),
    }
}

fn surface_pair(fit: &OutcomeFit, k: usize, mode: Mode) -> SurfacePair {
    SurfacePair {
        outcome: k,
        alternative: match mode {
            Mode::Improved => fit.alt.theta_star.clone(),
            Mode::Original => fit.alt.theta_hat.clone(),
        },
        smoothed_null: fit.smoothed_null.clone(),
    }
}

fn univariate_factor(null: &NullFitUnivariate) -> Result<DMatrix<f64>> {
    let d = null.random_effects_cov();
    sampling_factor(&DMatrix::from_row_slice(2, 2, &[d[0][0], d[0][1], d[1][0], d[1][1]]))
}

/// Univariate test of outcome `k` (1-based).
pub fn run_univariate_test<E: Executor>(
    data: &LongDataset,
    k: usize,
    cfg: &TestConfig,
    exec: &E,
) -> Result<UnivariateTestResult> {
    cfg.validate()?;
    let (unit, map) = data.rescale_time().stage(Stage::Dataset)?;
    let panel = unit.panel(k).stage(Stage::Dataset)?;
    let label = unit.outcome_labels()[k - 1].clone();
    let ctx = StatisticContext::new(cfg)?;
    let fit = outcome_statistic(&panel, &ctx)?;
    let null = fit.null.require_converged().stage(Stage::NullFit)?;
    let error_variance = error_variance(&fit, cfg.mode, &cfg.variance)?;
    let patterns = VisitPatterns::from_panels(core::slice::from_ref(&panel), unit.n_subjects());
    let generators = [OutcomeGenerator {
        mean: fit.mean.clone(),
        error_sd: error_variance.sigma_sq.sqrt(),
    }];
    let factor = univariate_factor(&null)?;
    let n = panel.n_curves();
    let (draws, replicates) = run_bootstrap(exec, cfg, &ctx, &patterns, &generators, &factor, n, None)?;
    let draws: Vec<f64> = draws.into_iter().map(|d| d.full[0]).collect();
    let p = p_value_with(&draws, fit.statistic, cfg.plus_one);
    Ok(UnivariateTestResult {
        config: *cfg,
        outcome: outcome_report(&fit, k, &label, &map),
        error_variance,
        p_value: p,
        reject: p < cfg.alpha,
        draws,
        replicates,
        time_map: map,
        surfaces: vec![surface_pair(&fit, k, cfg.mode)],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowUpResult {
    pub threshold: f64,
    pub tests: Vec<UnivariateTestResult>,
    /// Outcomes (1-based) with p-value below the threshold.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub m: usize,
    /// `B × K` per-outcome replicate statistics.
    pub draws: Vec<Vec<f64>>,
    pub aggregate_draws: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateTestResult {
    pub config: TestConfig,
    pub outcomes: Vec<OutcomeReport>,
    pub error_variances: Vec<ErrorVarianceEstimate>,
    pub null_fit: NullFitMultivariate,
    pub linf: Option<AggregateResult>,
    pub l2: Option<AggregateResult>,
    /// `m` before capping at `N`, reported because the cap is an interpretation.
    pub m_uncapped: usize,
    pub replicates: ReplicateDiagnostics,
    pub followup: Option<FollowUpResult>,
    pub time_map: TimeMap,
    #[serde(skip)]
    pub surfaces: Vec<SurfacePair>,
}

impl MultivariateTestResult {
    pub fn any_rejection(&self) -> bool {
        self.linf.as_ref().is_some_and(|a| a.reject) || self.l2.as_ref().is_some_and(|a| a.reject)
    }
}

fn aggregate(draws: &[Vec<f64>], observed: &[f64], which: Statistic, cfg: &TestConfig, m: usize) -> Result<AggregateResult> {
    let pick = |t: &[f64]| -> Result<f64> {
        let (inf, l2) = aggregate_stats(t)?;
        Ok(match which {
            Statistic::Linf => inf,
            Statistic::L2 => l2,
        })
    };
    let statistic = pick(observed)?;
    let aggregate_draws = draws.iter().map(|row| pick(row)).collect::<Result<Vec<_>>>()?;
    let p = p_value_with(&aggregate_draws, statistic, cfg.plus_one);
    Ok(AggregateResult {
        statistic,
        p_value: p,
        reject: p < cfg.alpha,
        m,
        draws: draws.to_vec(),
        aggregate_draws,
    })
}

/// Multivariate test over all `K ≥ 2` outcomes, with optional Bonferroni follow-up.
pub fn run_mgfc_test<E: Executor>(data: &LongDataset, cfg: &TestConfig, exec: &E) -> Result<MultivariateTestResult> {
    cfg.validate()?;
    let k = data.n_outcomes();
    if k < 2 {
        return Err(invalid!("the multivariate test needs K ≥ 2 outcomes; use the univariate test"));
    }
    let (unit, map) = data.rescale_time().stage(Stage::Dataset)?;
    let panels = (1..=k).map(|kk| unit.panel(kk)).collect::<Result<Vec<_>>>().stage(Stage::Dataset)?;
    let ctx = StatisticContext::new(cfg)?;
    let fits = panels.iter().map(|p| outcome_statistic(p, &ctx)).collect::<Result<Vec<_>>>()?;
    for f in &fits {
        f.null.require_converged().stage(Stage::NullFit)?;
    }
    let residuals: Vec<Panel> = fits.iter().map(|f| f.residuals.clone()).collect();
    let n = unit.n_subjects();
    let null_fit = fit_null_multivariate(&residuals, n, &cfg.null_fit)
        .and_then(|f| f.require_converged())
        .stage(Stage::NullFit)?;
    let error_variances = fits
        .iter()
        .map(|f| error_variance(f, cfg.mode, &cfg.variance))
        .collect::<Result<Vec<_>>>()?;
    let generators: Vec<OutcomeGenerator> = fits
        .iter()
        .zip(&error_variances)
        .map(|(f, v)| OutcomeGenerator {
            mean: f.mean.clone(),
            error_sd: v.sigma_sq.sqrt(),
        })
        .collect();
    let mut sigma = null_fit.sigma_matrix();
    if null_fit.near_singular {
        let d = sigma.nrows();
        sigma += DMatrix::<f64>::identity(d, d) * 1e-8;
    }
    let factor = sampling_factor(&sigma)?;
    let patterns = VisitPatterns::from_panels(&panels, n);

    let want_inf = cfg.statistic.includes(Statistic::Linf);
    let want_l2 = cfg.statistic.includes(Statistic::L2);
    let m_inf = m_out_of_n_size(n, Statistic::Linf, cfg.cap_m);
    let m_uncapped = m_out_of_n_size(n, Statistic::Linf, false);
    let (draws, replicates) = if want_l2 {
        run_bootstrap(exec, cfg, &ctx, &patterns, &generators, &factor, n, want_inf.then_some(m_inf))?
    } else {
        run_bootstrap(exec, cfg, &ctx, &patterns, &generators, &factor, m_inf, None)?
    };
    let observed: Vec<f64> = fits.iter().map(|f| f.statistic).collect();
    let l2 = if want_l2 {
        let rows: Vec<Vec<f64>> = draws.iter().map(|d| d.full.clone()).collect();
        Some(aggregate(&rows, &observed, Statistic::L2, cfg, n)?)
    } else {
        None
    };
    let linf = if want_inf {
        let rows: Vec<Vec<f64>> = draws
            .iter()
            .map(|d| d.sub.clone().unwrap_or_else(|| d.full.clone()))
            .collect();
        Some(aggregate(&rows, &observed, Statistic::Linf, cfg, m_inf)?)
    } else {
        None
    };

    let labels = unit.outcome_labels();
    let outcomes: Vec<OutcomeReport> = fits
        .iter()
        .enumerate()
        .map(|(i, f)| outcome_report(f, i + 1, &labels[i], &map))
        .collect();
    let surfaces = fits.iter().enumerate().map(|(i, f)| surface_pair(f, i + 1, cfg.mode)).collect();
    let mut result = MultivariateTestResult {
        config: *cfg,
        outcomes,
        error_variances,
        null_fit,
        linf,
        l2,
        m_uncapped,
        replicates,
        followup: None,
        time_map: map,
        surfaces,
    };
    let run_followup = match cfg.followup {
        FollowUp::Never => false,
        FollowUp::IfRejected => result.any_rejection(),
        FollowUp::Always => true,
    };
    if run_followup {
        result.followup = Some(bonferroni_followup(data, cfg, exec)?);
    }
    Ok(result)
}

/// Per-outcome univariate tests at `α / K`, each with its own derived seed.
pub fn bonferroni_followup<E: Executor>(data: &LongDataset, cfg: &TestConfig, exec: &E) -> Result<FollowUpResult> {
    let k = data.n_outcomes();
    let threshold = cfg.alpha / k as f64;
    let mut tests = Vec::with_capacity(k);
    for kk in 1..=k {
        let sub = TestConfig {
            seed: derive_seed(cfg.seed, Domain::TestSeed, kk as u64),
            ..*cfg
        };
        let mut r = run_univariate_test(data, kk, &sub, exec)?;
        r.reject = r.p_value < threshold;
        tests.push(r);
    }
    let flagged = tests.iter().filter(|t| t.reject).map(|t| t.outcome.outcome).collect();
    Ok(FollowUpResult {
        threshold,
        tests,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hs_distance_identity_gram() {
        let basis = BSplineBasis::equal(4).unwrap();
        let g = GramMatrix {
            g: DMatrix::identity(4, 4),
            sqrt: DMatrix::identity(4, 4),
            inv_sqrt: DMatrix::identity(4, 4),
        };
        let a = CoefSurface::new(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[3.0, 4.0, 0.0, 0.0])), basis.clone()).unwrap();
        let z = CoefSurface::zero(basis);
        assert!((hs_distance(&a, &z, &g).unwrap() - 5.0).abs() < 1e-14);
        assert_eq!(hs_distance(&a, &a, &g).unwrap(), 0.0);
    }

    #[test]
    fn basis_mismatch_is_rejected() {
        let b4 = BSplineBasis::equal(4).unwrap();
        let b5 = BSplineBasis::equal(5).unwrap();
        let g = GramMatrix::new(&b4).unwrap();
        assert!(hs_distance(&CoefSurface::zero(b4), &CoefSurface::zero(b5), &g).is_err());
    }

    #[test]
    fn aggregates() {
        let (i, l) = aggregate_stats(&[3.0, 4.0, 0.0]).unwrap();
        assert_eq!(i, 4.0);
        assert!((l - 25.0 / 3.0).abs() < 1e-15);
        assert_eq!(aggregate_stats(&[2.5]).unwrap(), (2.5, 6.25));
        assert!(aggregate_stats(&[]).is_err());
    }

    #[test]
    fn m_rule() {
        assert_eq!(m_out_of_n_size(100, Statistic::Linf, true), 100);
        assert_eq!(m_out_of_n_size(100, Statistic::Linf, false), 151);
        assert_eq!(m_out_of_n_size(500, Statistic::Linf, true), 441);
        assert_eq!(m_out_of_n_size(1000, Statistic::Linf, true), 700);
        assert_eq!(m_out_of_n_size(1000, Statistic::L2, true), 1000);
    }

    #[test]
    fn p_values() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(p_value(&d, 2.5), 0.5);
        assert_eq!(p_value(&d, 10.0), 0.0);
        assert_eq!(p_value(&d, 0.0), 1.0);
        assert_eq!(p_value(&d, 4.0), 0.0);
        assert_eq!(p_value_with(&d, 10.0, true), 0.2);
    }

    #[test]
    fn statistic_choice() {
        assert!(StatisticChoice::Both.includes(Statistic::Linf));
        assert!(!StatisticChoice::L2.includes(Statistic::Linf));
    }
}
