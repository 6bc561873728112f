//! Oracles shared by the property tests and the acceptance runner.

#![allow(dead_code)]

use covgof_core::estimation::psd_truncate;
use covgof_core::gof::{hs_distance, hs_norm_sq};
use covgof_core::linalg::min_eigenvalue;
use covgof_core::rng::{stream, Domain, StreamRng};
use covgof_core::{BSplineBasis, CoefSurface, GramMatrix};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_symmetric(h: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(h, h, |_, _| normal(rng));
    (&a + a.transpose()) * 0.5
}

pub fn clip_negative(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| v.max(0.0));
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// Worst cases over a batch of random truncation problems.
#[derive(Debug, Clone, Copy)]
pub struct TruncationSuite {
    /// Smallest eigenvalue of `G½ Θ* G½` over all instances.
    pub min_eigenvalue: f64,
    /// Smallest `d(candidate, Θ̂) − d(Θ*, Θ̂)`; negative means a candidate won.
    pub min_margin: f64,
    /// Largest entrywise change when truncating an already valid surface,
    /// relative to its largest entry.
    pub max_idempotence_error: f64,
}

/// Truncates random symmetric `Θ̂` with `H` cycling through 4, 5, 7 and
/// compares each result with `candidates` valid surfaces: projections of
/// random symmetric matrices and small valid perturbations of the optimum.
pub fn truncation_suite(seed: u64, instances: usize, candidates: usize) -> TruncationSuite {
    let mut rng = stream(seed, Domain::Simulation, 0);
    let mut out = TruncationSuite {
        min_eigenvalue: f64::INFINITY,
        min_margin: f64::INFINITY,
        max_idempotence_error: 0.0,
    };
    for inst in 0..instances {
        let h = [4, 5, 7][inst % 3];
        let basis = BSplineBasis::equal(h).unwrap();
        let gram = GramMatrix::new(&basis).unwrap();
        let theta_hat = CoefSurface::new(random_symmetric(h, &mut rng), basis.clone()).unwrap();
        let star = psd_truncate(&theta_hat, &gram);
        let scaled = &gram.sqrt * &star.theta * &gram.sqrt;
        out.min_eigenvalue = out.min_eigenvalue.min(min_eigenvalue(&scaled));

        let best = hs_distance(&star, &theta_hat, &gram).unwrap();
        for c in 0..candidates {
            let cand = if c % 2 == 0 {
                clip_negative(&random_symmetric(h, &mut rng))
            } else {
                let eps = 10f64.powi(-((c % 5) as i32));
                clip_negative(&(&scaled + random_symmetric(h, &mut rng) * eps))
            };
            let theta = &gram.inv_sqrt * cand * &gram.inv_sqrt;
            let theta = (&theta + theta.transpose()) * 0.5;
            let cand = CoefSurface::new(theta, basis.clone()).unwrap();
            let d = hs_distance(&cand, &theta_hat, &gram).unwrap();
            out.min_margin = out.min_margin.min(d - best);
        }

        let again = psd_truncate(&star, &gram);
        let err = (&again.theta - &star.theta).amax() / star.theta.amax().max(1.0);
        out.max_idempotence_error = out.max_idempotence_error.max(err);
    }
    out
}

/// Composite 4-point Gauss–Legendre nodes and weights on `[0, 1]`:
/// 100 panels, 400 points.
pub fn gl_grid() -> Vec<(f64, f64)> {
    let x = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
    let w = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
    let panels = 100;
    let half = 0.5 / panels as f64;
    let mut out = Vec::with_capacity(4 * panels);
    for p in 0..panels {
        let mid = (2 * p + 1) as f64 * half;
        for r in 0..4 {
            out.push((mid + half * x[r], half * w[r]));
        }
    }
    out
}

/// Largest relative gap between `tr(GΔGΔ)` and 400 × 400 quadrature of
/// `∫∫ (b(t)ᵀ Δ b(s))²` over random symmetric `Δ`.
pub fn hs_quadrature_suite(seed: u64, instances: usize) -> f64 {
    let mut rng = stream(seed, Domain::Simulation, 0);
    let grid = gl_grid();
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let h = [4, 5, 7][inst % 3];
        let basis = BSplineBasis::equal(h).unwrap();
        let gram = GramMatrix::new(&basis).unwrap();
        let delta = random_symmetric(h, &mut rng);
        let rows: Vec<Vec<f64>> = grid.iter().map(|&(t, _)| basis.eval(t).unwrap()).collect();
        let mut quad = 0.0;
        for (i, &(_, wi)) in grid.iter().enumerate() {
            for (j, &(_, wj)) in grid.iter().enumerate() {
                let mut v = 0.0;
                for a in 0..h {
                    for b in 0..h {
                        v += rows[i][a] * delta[(a, b)] * rows[j][b];
                    }
                }
                quad += wi * wj * v * v;
            }
        }
        let closed = hs_norm_sq(&delta, &gram.g);
        worst = worst.max((closed - quad).abs() / quad);
    }
    worst
}
