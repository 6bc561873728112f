//! Data generators for the simulation designs.
//!
//! Outcome `k` of subject `i` is `b_{0ik} + b_{1ik} t + Δ_k z_i(t) + ε`, with
//! `(b_{0i1}, b_{1i1}, …, b_{0iK}, b_{1iK}) ~ N(0, Σ)` and a zero mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::PI;

use nalgebra::DMatrix;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LongDataset, Observation};
use crate::error::{invalid, Result};
use crate::rng::{stream, Domain, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitModel {
    /// `j` equispaced times shared by every subject and outcome.
    Fixed { j: usize },
    /// `J` uniform on `j_min..=j_max`, times drawn without replacement from a
    /// grid of `grid_points` equispaced points.
    Grid { grid_points: usize, j_min: usize, j_max: usize },
    /// `J` from a discrete distribution, times uniform and sorted.
    Empirical { counts: Vec<usize>, probs: Vec<f64> },
}

impl VisitModel {
    /// Sparse univariate design: `J` uniform on `{2, …, 6}` from an 80-point grid.
    pub fn sparse_grid(j_min: usize, j_max: usize) -> Self {
        VisitModel::Grid {
            grid_points: 80,
            j_min,
            j_max,
        }
    }

    /// ADNI-like visit-count table: mode below 5, mean near 6.
    pub fn adni_like() -> Self {
        VisitModel::Empirical {
            counts: vec![2, 3, 4, 8, 12, 16, 20],
            probs: vec![0.30, 0.25, 0.17, 0.05, 0.08, 0.08, 0.07],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            VisitModel::Fixed { j } if *j == 0 => Err(invalid!("fixed design needs at least one visit")),
            VisitModel::Grid {
                grid_points,
                j_min,
                j_max,
            } => {
                if *grid_points < 2 || j_min > j_max || *j_min == 0 || *j_max > *grid_points {
                    Err(invalid!("grid design needs 1 ≤ j_min ≤ j_max ≤ grid_points, grid ≥ 2"))
                } else {
                    Ok(())
                }
            }
            VisitModel::Empirical { counts, probs } => {
                if counts.is_empty() || counts.len() != probs.len() {
                    return Err(invalid!("visit table needs matching, non-empty counts and probabilities"));
                }
                if probs.iter().any(|&p| !(p >= 0.0)) || counts.contains(&0) {
                    return Err(invalid!("visit table has a negative probability or a zero count"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(invalid!("visit probabilities sum to {total}, not 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Expected visit count.
    pub fn mean_visits(&self) -> f64 {
        match self {
            VisitModel::Fixed { j } => *j as f64,
            VisitModel::Grid { j_min, j_max, .. } => 0.5 * (*j_min + *j_max) as f64,
            VisitModel::Empirical { counts, probs } => counts.iter().zip(probs).map(|(&c, &p)| c as f64 * p).sum(),
        }
    }

    /// One subject's sorted visit times on `domain`.
    pub fn draw_times(&self, domain: (f64, f64), rng: &mut StreamRng) -> Vec<f64> {
        let (lo, hi) = domain;
        match self {
            VisitModel::Fixed { j } => {
                if *j == 1 {
                    return vec![lo];
                }
                (0..*j).map(|i| lo + (hi - lo) * i as f64 / (*j - 1) as f64).collect()
            }
            VisitModel::Grid {
                grid_points,
                j_min,
                j_max,
            } => {
                let j = rng.random_range(*j_min..=*j_max);
                let mut idx: Vec<usize> = sample(rng, *grid_points, j).into_vec();
                idx.sort_unstable();
                idx.iter()
                    .map(|&g| lo + (hi - lo) * g as f64 / (*grid_points - 1) as f64)
                    .collect()
            }
            VisitModel::Empirical { counts, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = *counts.last().expect("validated");
                for (&c, &p) in counts.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        j = c;
                        break;
                    }
                }
                let mut t: Vec<f64> = (0..j).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
                t.sort_by(f64::total_cmp);
                t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deviation {
    None,
    /// `z(t) = b₂ t²`.
    Quadratic,
    /// `z(t) = ξ₁ sin(2πt) + ξ₂ sin(4πt)`.
    Trigonometric,
}

/// One subject's realized deviation function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationDraw {
    kind: Deviation,
    a: f64,
    b: f64,
}

impl DeviationDraw {
    pub fn draw(kind: Deviation, rng: &mut StreamRng) -> Self {
        let (a, b) = match kind {
            Deviation::None => (0.0, 0.0),
            Deviation::Quadratic => (rng.sample(StandardNormal), 0.0),
            Deviation::Trigonometric => (rng.sample(StandardNormal), rng.sample(StandardNormal)),
        };
        Self { kind, a, b }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            Deviation::None => 0.0,
            Deviation::Quadratic => self.a * t * t,
            Deviation::Trigonometric => self.a * (2.0 * PI * t).sin() + self.b * (4.0 * PI * t).sin(),
        }
    }
}

/// Per-outcome null parameters and effect size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub sigma0_sq: f64,
    pub sigma01: f64,
    pub sigma1_sq: f64,
    pub error_var: f64,
    pub delta: f64,
}

/// Cross-outcome correlations of the random effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCorrelation {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_slope: f64,
}

impl Default for CrossCorrelation {
    fn default() -> Self {
        Self {
            intercept: 0.5,
            slope: 0.5,
            intercept_slope: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_subjects: usize,
    pub visits: VisitModel,
    /// Time domain before rescaling.
    pub domain: (f64, f64),
    pub outcomes: Vec<OutcomeSpec>,
    pub cross: CrossCorrelation,
    /// Full `2K × 2K` random-effects covariance; overrides the per-outcome
    /// parameters and `cross` when present.
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub deviation: Deviation,
    /// One deviation function per subject shared by all outcomes.
    pub shared_z: bool,
}

pub const DEFAULT_SLOPE_VARIANCE: f64 = 0.5;

impl ScenarioSpec {
    /// Sparse univariate design on `[−1, 1]` with `(σ0², σ01) = (1, −0.5)`.
    pub fn univariate_sparse(n: usize, j_min: usize, j_max: usize, error_var: f64) -> Self {
        Self {
            name: format!("univariate N={n} J={j_min}..{j_max} sigma2={error_var}"),
            n_subjects: n,
            visits: VisitModel::sparse_grid(j_min, j_max),
            domain: (-1.0, 1.0),
            outcomes: vec![OutcomeSpec {
                sigma0_sq: 1.0,
                sigma01: -0.5,
                sigma1_sq: DEFAULT_SLOPE_VARIANCE,
                error_var,
                delta: 0.0,
            }],
            cross: CrossCorrelation::default(),
            sigma: None,
            deviation: Deviation::None,
            shared_z: true,
        }
    }

    /// Balanced three-outcome design; setting `b` perturbs outcome 1 only.
    pub fn scenario1(n: usize, j: usize, delta: f64, setting_b: bool, deviation: Deviation) -> Self {
        let outcomes = (0..3)
            .map(|k| OutcomeSpec {
                sigma0_sq: 1.0,
                sigma01: -0.25,
                sigma1_sq: 0.5,
                error_var: 1.0,
                delta: if setting_b && k > 0 { 0.0 } else { delta },
            })
            .collect();
        Self {
            name: format!("scenario1{} N={n} J={j} delta={delta}", if setting_b { 'b' } else { 'a' }),
            n_subjects: n,
            visits: VisitModel::Fixed { j },
            domain: (0.0, 1.0),
            outcomes,
            cross: CrossCorrelation::default(),
            sigma: None,
            deviation,
            shared_z: true,
        }
    }

    /// Unbalanced two-outcome design with ADNI-like visit counts.
    pub fn scenario2(n: usize, delta: f64) -> Self {
        let outcomes = (0..2)
            .map(|_| OutcomeSpec {
                sigma0_sq: 1.0,
                sigma01: -0.25,
                sigma1_sq: 0.5,
                error_var: 1.0,
                delta,
            })
            .collect();
        Self {
            name: format!("scenario2 N={n} delta={delta}"),
            n_subjects: n,
            visits: VisitModel::adni_like(),
            domain: (0.0, 1.0),
            outcomes,
            cross: CrossCorrelation::default(),
            sigma: None,
            deviation: Deviation::Quadratic,
            shared_z: true,
        }
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    /// The implied `2K × 2K` random-effects covariance.
    pub fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        let k = self.n_outcomes();
        let d = 2 * k;
        if let Some(s) = &self.sigma {
            if s.len() != d || s.iter().any(|r| r.len() != d) {
                return Err(invalid!("sigma must be {d}x{d}"));
            }
            return Ok(DMatrix::from_fn(d, d, |i, j| s[i][j]));
        }
        let mut m = DMatrix::zeros(d, d);
        for (a, oa) in self.outcomes.iter().enumerate() {
            for (b, ob) in self.outcomes.iter().enumerate() {
                let (i, j) = (2 * a, 2 * b);
                if a == b {
                    m[(i, i)] = oa.sigma0_sq;
                    m[(i, i + 1)] = oa.sigma01;
                    m[(i + 1, i)] = oa.sigma01;
                    m[(i + 1, i + 1)] = oa.sigma1_sq;
                } else {
                    let c = &self.cross;
                    m[(i, j)] = c.intercept * (oa.sigma0_sq * ob.sigma0_sq).sqrt();
                    m[(i + 1, j + 1)] = c.slope * (oa.sigma1_sq * ob.sigma1_sq).sqrt();
                    m[(i, j + 1)] = c.intercept_slope * (oa.sigma0_sq * ob.sigma1_sq).sqrt();
                    m[(i + 1, j)] = c.intercept_slope * (oa.sigma1_sq * ob.sigma0_sq).sqrt();
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(invalid!("scenario needs at least one outcome"));
        }
        if self.n_subjects < 2 {
            return Err(invalid!("scenario needs at least two subjects"));
        }
        if !(self.domain.1 > self.domain.0) {
            return Err(invalid!("empty time domain {:?}", self.domain));
        }
        for (k, o) in self.outcomes.iter().enumerate() {
            if !(o.delta >= 0.0) {
                return Err(invalid!("outcome {}: effect size must be ≥ 0", k + 1));
            }
            if !(o.error_var >= 0.0) {
                return Err(invalid!("outcome {}: error variance must be ≥ 0", k + 1));
            }
        }
        self.visits.validate()?;
        self.sampling_factor().map(|_| ())
    }

    fn sampling_factor(&self) -> Result<DMatrix<f64>> {
        let m = self.sigma_matrix()?;
        m.clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| invalid!("random-effects covariance is not positive definite:\n{m}"))
    }

    /// Dataset for replication `rep`; a pure function of `(spec, seed, rep)`.
    pub fn generate(&self, seed: u64, rep: u64) -> Result<LongDataset> {
        self.validate()?;
        let mut rng = stream(seed, Domain::Simulation, rep);
        let (obs, _) = self.generate_with(&mut rng, &self.sampling_factor()?);
        let labels = (0..self.n_subjects).map(|i| format!("s{i:05}")).collect();
        let outcomes = (1..=self.n_outcomes()).map(|k| format!("y{k}")).collect();
        LongDataset::from_observations(obs, labels, outcomes)
    }

    /// Observations plus the random-effect vectors, for moment checks.
    pub fn generate_with(&self, rng: &mut StreamRng, factor: &DMatrix<f64>) -> (Vec<Observation>, Vec<Vec<f64>>) {
        let k = self.n_outcomes();
        let d = 2 * k;
        let mut obs = Vec::new();
        let mut effects = Vec::with_capacity(self.n_subjects);
        let mut z = vec![0.0; d];
        for i in 0..self.n_subjects {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let b: Vec<f64> = (0..d).map(|r| (0..=r).map(|c| factor[(r, c)] * z[c]).sum()).collect();
            let shared = DeviationDraw::draw(self.deviation, rng);
            let times = self.visits.draw_times(self.domain, rng);
            for (kk, o) in self.outcomes.iter().enumerate() {
                let dev = if self.shared_z { shared } else { DeviationDraw::draw(self.deviation, rng) };
                // fixed designs share times across outcomes; others draw per outcome
                let own;
                let ts = if kk == 0 || matches!(self.visits, VisitModel::Fixed { .. }) {
                    &times
                } else {
                    own = self.visits.draw_times(self.domain, rng);
                    &own
                };
                for &t in ts {
                    let e: f64 = rng.sample(StandardNormal);
                    obs.push(Observation {
                        subject: i,
                        outcome: kk + 1,
                        time: t,
                        value: b[2 * kk] + b[2 * kk + 1] * t + o.delta * dev.eval(t) + o.error_var.sqrt() * e,
                    });
                }
            }
            effects.push(b);
        }
        (obs, effects)
    }
}
