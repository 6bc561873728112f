use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Panel;
use crate::error::{invalid, Error, Result};
use crate::linalg::{lambda_grid, PenalizedLs};
use crate::spline::BSplineBasis;

/// Penalized cubic spline curve on `[0, 1]` with a second-difference penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedCurve {
    pub basis: BSplineBasis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub edf: f64,
}

impl PenalizedCurve {
    /// Fits `values ~ f(times)` with λ chosen by GCV over [`lambda_grid`].
    pub fn fit(times: &[f64], values: &[f64], basis: &BSplineBasis) -> Result<Self> {
        let h = basis.n_basis();
        if times.len() < h {
            return Err(invalid!("{} observations cannot fit {h} spline coefficients", times.len()));
        }
        let mut xtx = DMatrix::zeros(h, h);
        let mut xty = DVector::zeros(h);
        let mut yty = 0.0;
        for (&t, &y) in times.iter().zip(values) {
            let (first, b) = basis.eval_local(t);
            for r in 0..4 {
                xty[first + r] += b[r] * y;
                for c in 0..4 {
                    xtx[(first + r, first + c)] += b[r] * b[c];
                }
            }
            yty += y * y;
        }
        let pls = PenalizedLs::new(&xtx, &basis.difference_penalty(), &xty, yty, times.len())
            .map_err(|e| Error::Singular(alloc::format!("penalized spline system: {e}")))?;
        let choice = pls.select_gcv(&lambda_grid())?;
        let coefficients = pls.coefficients(choice.lambda).iter().copied().collect();
        Ok(Self {
            basis: basis.clone(),
            coefficients,
            lambda: choice.lambda,
            edf: choice.edf,
        })
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let (first, b) = self.basis.eval_local(t.clamp(0.0, 1.0));
        (0..4).map(|r| b[r] * self.coefficients[first + r]).sum()
    }
}

/// Smooth mean `μ̂` of one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFit {
    pub curve: PenalizedCurve,
}

impl MeanFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.curve.eval(t)
    }

    pub fn lambda(&self) -> f64 {
        self.curve.lambda
    }

    pub fn edf(&self) -> f64 {
        self.curve.edf
    }
}

pub const MIN_MEAN_OBSERVATIONS: usize = 20;

/// Penalized-spline mean over all observations of a panel (times on `[0, 1]`).
pub fn fit_mean(panel: &Panel, n_basis: usize) -> Result<MeanFit> {
    if panel.n_points() < MIN_MEAN_OBSERVATIONS {
        return Err(invalid!(
            "mean fit needs at least {MIN_MEAN_OBSERVATIONS} observations, got {}",
            panel.n_points()
        ));
    }
    let basis = BSplineBasis::equal(n_basis)?;
    let curve = PenalizedCurve::fit(&panel.times, &panel.values, &basis)?;
    Ok(MeanFit { curve })
}

/// Residuals `Ỹ = Y − μ̂(t)`, row for row.
pub fn demean(panel: &Panel, mean: &MeanFit) -> Panel {
    let values = panel
        .times
        .iter()
        .zip(&panel.values)
        .map(|(&t, &y)| y - mean.eval(t))
        .collect();
    panel.with_values(values)
}

/// One outcome after mean removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemeanedOutcome {
    pub residuals: Panel,
    pub mean: MeanFit,
}

impl DemeanedOutcome {
    pub fn new(panel: &Panel, mean_basis: usize) -> Result<Self> {
        let mean = fit_mean(panel, mean_basis)?;
        Ok(Self {
            residuals: demean(panel, &mean),
            mean,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn grid_panel(values: impl Fn(f64) -> f64) -> Panel {
        let mut p = Panel::default();
        for s in 0..10 {
            p.start_curve(s);
            for j in 0..5 {
                let t = (s * 5 + j) as f64 / 49.0;
                p.push(t, values(t));
            }
        }
        p
    }

    #[test]
    fn constant_is_reproduced() {
        let p = grid_panel(|_| 3.25);
        let m = fit_mean(&p, 10).unwrap();
        for i in 0..=100 {
            assert!((m.eval(i as f64 / 100.0) - 3.25).abs() < 1e-8);
        }
    }

    #[test]
    fn shift_moves_mean_and_keeps_residuals() {
        let p = grid_panel(|t| (6.0 * t).sin() + if ((t * 49.0) as usize).is_multiple_of(3) { 0.3 } else { -0.2 });
        let shifted = p.with_values(p.values.iter().map(|v| v + 2.0).collect());
        let m0 = fit_mean(&p, 10).unwrap();
        let m1 = fit_mean(&shifted, 10).unwrap();
        assert_eq!(m0.lambda(), m1.lambda());
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            assert!((m1.eval(t) - m0.eval(t) - 2.0).abs() < 1e-9);
        }
        let r0 = demean(&p, &m0);
        let r1 = demean(&shifted, &m1);
        for (a, b) in r0.values.iter().zip(&r1.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_observations() {
        let mut p = Panel::default();
        p.start_curve(0);
        for j in 0..5 {
            p.push(j as f64 / 4.0, 1.0);
        }
        assert!(fit_mean(&p, 10).is_err());
        assert!(PenalizedCurve::fit(&[0.1, 0.2], &[1.0, 2.0], &BSplineBasis::equal(5).unwrap()).is_err());
        let _ = vec![0];
    }
}
