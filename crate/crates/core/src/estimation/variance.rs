//! Measurement-error variance.
//!
//! Both estimators integrate `V̂(t) − C(t, t)`, where `V̂` smooths the squared
//! residuals. They differ in the covariance diagonal: the smooth estimator uses a
//! penalized tensor-product surface fitted to off-diagonal products, the naive
//! one the unpenalized least-squares surface of the test itself.

use alloc::string::ToString;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::mean::PenalizedCurve;
use super::tensor::{hvec_index, hvec_len, unpack_hvec, PairDesign};
use crate::dataset::Panel;
use crate::error::{Error, Result};
use crate::linalg::{lambda_grid, PenalizedLs};
use crate::spline::{BSplineBasis, CoefSurface};

pub const ERROR_VAR_FLOOR: f64 = 1e-8;
pub const MIN_VARIANCE_OBSERVATIONS: usize = 30;
pub const MIN_PAIRED_SUBJECTS: usize = 10;
const TRAPEZOID_POINTS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Naive,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    /// GCV choice for the surface (smooth estimator only).
    pub surface_lambda: Option<f64>,
    /// GCV choice for `V̂`.
    pub diagonal_lambda: f64,
    /// `∫(V̂ − C)` before flooring.
    pub raw_integral: f64,
    pub floored: bool,
    /// `V̂(t) − C(t, t)` was negative at every grid point.
    pub all_negative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorVarianceEstimate {
    pub sigma_sq: f64,
    pub method: VarianceMethod,
    pub diagnostics: VarianceDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceOptions {
    /// Basis size on each margin of the smooth surface and for `V̂`.
    pub n_basis: usize,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self { n_basis: 10 }
    }
}

fn check_preconditions(residuals: &Panel) -> Result<()> {
    if residuals.n_points() < MIN_VARIANCE_OBSERVATIONS {
        return Err(Error::InvalidInput(alloc::format!(
            "error variance needs at least {MIN_VARIANCE_OBSERVATIONS} observations, got {}",
            residuals.n_points()
        )));
    }
    let paired = (0..residuals.n_curves()).filter(|&i| residuals.len_of(i) >= 2).count();
    if paired < MIN_PAIRED_SUBJECTS {
        return Err(Error::InvalidInput(alloc::format!(
            "error variance needs at least {MIN_PAIRED_SUBJECTS} subjects with two or more visits, got {paired}"
        )));
    }
    Ok(())
}

/// Penalized spline of `Ỹ²` against time.
pub fn fit_diagonal(residuals: &Panel, n_basis: usize) -> Result<PenalizedCurve> {
    let basis = BSplineBasis::equal(n_basis)?;
    let squares: alloc::vec::Vec<f64> = residuals.values.iter().map(|v| v * v).collect();
    PenalizedCurve::fit(&residuals.times, &squares, &basis)
}

fn integrate(v: &PenalizedCurve, surface: &CoefSurface) -> (f64, bool) {
    let n = TRAPEZOID_POINTS;
    let h = 1.0 / (n - 1) as f64;
    let mut total = 0.0;
    let mut all_negative = true;
    for i in 0..n {
        let t = i as f64 * h;
        let d = v.eval(t) - surface.eval_unchecked(t, t);
        if d >= 0.0 {
            all_negative = false;
        }
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += w * d;
    }
    (total * h, all_negative)
}

fn finish(method: VarianceMethod, v: &PenalizedCurve, surface: &CoefSurface, surface_lambda: Option<f64>) -> ErrorVarianceEstimate {
    let (raw, all_negative) = integrate(v, surface);
    let floored = !(raw > ERROR_VAR_FLOOR);
    ErrorVarianceEstimate {
        sigma_sq: if floored { ERROR_VAR_FLOOR } else { raw },
        method,
        diagnostics: VarianceDiagnostics {
            surface_lambda,
            diagonal_lambda: v.lambda,
            raw_integral: raw,
            floored,
            all_negative,
        },
    }
}

/// Second-difference penalty on both margins of a symmetric coefficient
/// matrix, in half-vectorized coordinates: `Eᵀ (P ⊗ I + I ⊗ P) E`.
pub(crate) fn tensor_penalty(basis: &BSplineBasis) -> DMatrix<f64> {
    let h = basis.n_basis();
    let p = basis.difference_penalty();
    let mut out = DMatrix::zeros(hvec_len(h), hvec_len(h));
    for a in 0..h {
        for b in 0..h {
            let i = hvec_index(h, a, b);
            for c in 0..h {
                for d in 0..h {
                    let mut v = 0.0;
                    if b == d {
                        v += p[(a, c)];
                    }
                    if a == c {
                        v += p[(b, d)];
                    }
                    if v != 0.0 {
                        out[(i, hvec_index(h, c, d))] += v;
                    }
                }
            }
        }
    }
    out
}

/// Penalized tensor-product surface of the off-diagonal products, GCV-tuned.
pub fn fit_smooth_surface(residuals: &Panel, n_basis: usize) -> Result<(CoefSurface, f64)> {
    let basis = BSplineBasis::equal(n_basis)?;
    let design = PairDesign::new(residuals, &basis);
    if design.n_pairs() == 0 {
        return Err(Error::Degenerate("no within-subject pairs".to_string()));
    }
    let y = design.products(residuals);
    let yty = y.iter().map(|v| v * v).sum();
    let pls = PenalizedLs::new(&design.gram(), &tensor_penalty(&basis), &design.cross(&y), yty, design.n_pairs())
        .map_err(|e| Error::Singular(alloc::format!("smooth covariance surface: {e}")))?;
    let choice = pls.select_gcv(&lambda_grid())?;
    let theta = unpack_hvec(n_basis, &pls.coefficients(choice.lambda));
    Ok((CoefSurface { theta, basis }, choice.lambda))
}

/// Smooth-surface (FACE-style) estimator.
pub fn estimate_error_variance_smooth(residuals: &Panel, opts: &VarianceOptions) -> Result<ErrorVarianceEstimate> {
    check_preconditions(residuals)?;
    let (surface, lambda) = fit_smooth_surface(residuals, opts.n_basis)?;
    let v = fit_diagonal(residuals, opts.n_basis)?;
    Ok(finish(VarianceMethod::Smooth, &v, &surface, Some(lambda)))
}

/// Original-style estimator against the untruncated least-squares surface.
pub fn estimate_error_variance_naive(
    residuals: &Panel,
    theta_hat: &CoefSurface,
    opts: &VarianceOptions,
) -> Result<ErrorVarianceEstimate> {
    check_preconditions(residuals)?;
    let v = fit_diagonal(residuals, opts.n_basis)?;
    Ok(finish(VarianceMethod::Naive, &v, theta_hat, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn penalty_vanishes_on_bilinear_surfaces() {
        // Θ = a bᵀ + b aᵀ with a, b linear in the index lies in the penalty null space
        let basis = BSplineBasis::equal(7).unwrap();
        let pen = tensor_penalty(&basis);
        let h = 7;
        let mut v = nalgebra::DVector::zeros(hvec_len(h));
        for a in 0..h {
            for b in a..h {
                v[hvec_index(h, a, b)] = 1.0 + 0.3 * (a + b) as f64 + 0.1 * (a * b) as f64;
            }
        }
        assert!((pen.transpose() * &pen * &v).amax() < 1e-9 * pen.amax().powi(2));
        assert!((&pen - pen.transpose()).amax() < 1e-12);
    }

    #[test]
    fn noise_free_data_has_negligible_nugget() {
        use crate::rng::{stream, Domain};
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = stream(11, Domain::Simulation, 0);
        let mut p = Panel::default();
        for i in 0..300 {
            p.start_curve(i);
            let a: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            for _ in 0..8 {
                let t: f64 = rng.random();
                p.push(t, a + c * t);
            }
        }
        let total = p.values.iter().map(|v| v * v).sum::<f64>() / p.n_points() as f64;
        let est = estimate_error_variance_smooth(&p, &VarianceOptions::default()).unwrap();
        assert!(est.sigma_sq < 0.05 * total, "{est:?} vs total {total}");
    }

    #[test]
    fn diagonal_above_squares_is_floored() {
        let mut p = Panel::default();
        for i in 0..20 {
            p.start_curve(i);
            for j in 0..4 {
                p.push(j as f64 / 3.0, if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let basis = BSplineBasis::equal(5).unwrap();
        let theta = DMatrix::from_element(5, 5, 3.0);
        let surface = CoefSurface::new(theta, basis).unwrap();
        let est = estimate_error_variance_naive(&p, &surface, &VarianceOptions::default()).unwrap();
        assert_eq!(est.sigma_sq, ERROR_VAR_FLOOR);
        assert!(est.diagnostics.floored && est.diagnostics.all_negative);
    }

    #[test]
    fn preconditions() {
        let mut p = Panel::default();
        for i in 0..5 {
            p.start_curve(i);
            for j in 0..8 {
                p.push(j as f64 / 7.0, (i + j) as f64);
            }
        }
        assert!(estimate_error_variance_smooth(&p, &VarianceOptions::default()).is_err());
        let _: Vec<f64> = Vec::new();
    }
}
