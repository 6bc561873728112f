//! Tensor-product least squares over within-subject pairs.
//!
//! A symmetric surface `b(t)ᵀ Θ b(t′)` is parametrized by the upper triangle
//! of `Θ` (half-vectorization), so the row for the pair `(t, t′)` has entry
//! `B_a(t)B_b(t′) + B_b(t)B_a(t′)` at `(a, b)`, `a < b`, and `B_a(t)B_a(t′)`
//! on the diagonal. The rows of `(j, j′)` and `(j′, j)` coincide, so the
//! ordered-pair problem is the unordered one with every term doubled.

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::Panel;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, sym_spectral_map};
use crate::spline::{BSplineBasis, CoefSurface, GramMatrix};

const NORMAL_RIDGE: f64 = 1e-10;

#[inline]
pub(crate) fn hvec_index(h: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * h - a * (a + 1) / 2 + b
}

pub(crate) fn hvec_len(h: usize) -> usize {
    h * (h + 1) / 2
}

pub(crate) fn unpack_hvec(h: usize, v: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(h, h);
    for a in 0..h {
        for b in a..h {
            let x = v[hvec_index(h, a, b)];
            m[(a, b)] = x;
            m[(b, a)] = x;
        }
    }
    m
}

/// Sparse design rows over the unordered within-subject pairs of a panel.
#[derive(Debug, Clone)]
pub struct PairDesign {
    basis: BSplineBasis,
    /// `(j, j′)` point indices into the panel, `j < j′`.
    pairs: Vec<(u32, u32)>,
    row_offsets: Vec<u32>,
    cols: Vec<u16>,
    vals: Vec<f64>,
}

impl PairDesign {
    pub fn new(panel: &Panel, basis: &BSplineBasis) -> Self {
        let h = basis.n_basis();
        let n_pairs = panel.n_ordered_pairs() / 2;
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut row_offsets = Vec::with_capacity(n_pairs + 1);
        let mut cols = Vec::with_capacity(n_pairs * 10);
        let mut vals = Vec::with_capacity(n_pairs * 10);
        row_offsets.push(0);
        let local: Vec<(usize, [f64; 4])> = panel.times.iter().map(|&t| basis.eval_local(t)).collect();
        let mut scratch = [0.0f64; 64];
        let mut touched: Vec<usize> = Vec::with_capacity(16);
        for c in 0..panel.n_curves() {
            let (start, end) = (panel.offsets[c], panel.offsets[c + 1]);
            for j in start..end {
                for jj in (j + 1)..end {
                    let (fa, va) = local[j];
                    let (fb, vb) = local[jj];
                    // accumulate into a small dense window keyed by local offsets
                    touched.clear();
                    for r in 0..4 {
                        for s in 0..4 {
                            let (a, b) = (fa + r, fb + s);
                            let idx = hvec_index(h, a, b);
                            let v = va[r] * vb[s];
                            if let Some(pos) = touched.iter().position(|&t| t == idx) {
                                scratch[pos] += v;
                            } else {
                                scratch[touched.len()] = v;
                                touched.push(idx);
                            }
                        }
                    }
                    for (pos, &idx) in touched.iter().enumerate() {
                        let v = scratch[pos];
                        if v != 0.0 {
                            cols.push(idx as u16);
                            vals.push(v);
                        }
                    }
                    pairs.push((j as u32, jj as u32));
                    row_offsets.push(cols.len() as u32);
                }
            }
        }
        Self {
            basis: basis.clone(),
            pairs,
            row_offsets,
            cols,
            vals,
        }
    }

    pub fn basis(&self) -> &BSplineBasis {
        &self.basis
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_params(&self) -> usize {
        hvec_len(self.basis.n_basis())
    }

    #[inline]
    fn row(&self, r: usize) -> (&[u16], &[f64]) {
        let range = self.row_offsets[r] as usize..self.row_offsets[r + 1] as usize;
        (&self.cols[range.clone()], &self.vals[range])
    }

    /// `XᵀX` over unordered pairs.
    pub fn gram(&self) -> DMatrix<f64> {
        let p = self.n_params();
        let mut xtx = DMatrix::zeros(p, p);
        for r in 0..self.n_pairs() {
            let (c, v) = self.row(r);
            for (i, &ci) in c.iter().enumerate() {
                for (k, &ck) in c.iter().enumerate() {
                    xtx[(ci as usize, ck as usize)] += v[i] * v[k];
                }
            }
        }
        xtx
    }

    /// `Xᵀy` for the per-pair responses `y`.
    pub fn cross(&self, y: &[f64]) -> DVector<f64> {
        let mut xty = DVector::zeros(self.n_params());
        for (r, &yr) in y.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&ci, &vi) in c.iter().zip(v) {
                xty[ci as usize] += vi * yr;
            }
        }
        xty
    }

    /// Raw products `Ỹ_j Ỹ_j′` in pair order.
    pub fn products(&self, panel: &Panel) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|&(j, jj)| panel.values[j as usize] * panel.values[jj as usize])
            .collect()
    }

    /// `f(t_j, t_j′)` in pair order.
    pub fn evaluate(&self, panel: &Panel, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.pairs
            .iter()
            .map(|&(j, jj)| f(panel.times[j as usize], panel.times[jj as usize]))
            .collect()
    }
}

/// Factorized normal equations shared by the alternative fit and `𝒦`.
#[derive(Debug, Clone)]
pub struct PairSolver {
    design: PairDesign,
    chol: Cholesky<f64, Dyn>,
}

impl PairSolver {
    pub fn new(panel: &Panel, basis: &BSplineBasis) -> Result<Self> {
        let h = basis.n_basis();
        let ordered = panel.n_ordered_pairs();
        if ordered < h * h {
            return Err(Error::Degenerate(alloc::format!(
                "{ordered} within-subject pairs cannot estimate {} surface coefficients",
                h * h
            )));
        }
        let design = PairDesign::new(panel, basis);
        let mut xtx = design.gram();
        let p = xtx.nrows();
        let ridge = NORMAL_RIDGE * (xtx.trace() / p as f64).max(f64::MIN_POSITIVE);
        for i in 0..p {
            xtx[(i, i)] += ridge;
        }
        let chol = Cholesky::new(xtx).ok_or_else(|| {
            Error::Singular(alloc::format!(
                "pair design for H = {h} is singular beyond ridge rescue"
            ))
        })?;
        Ok(Self { design, chol })
    }

    pub fn design(&self) -> &PairDesign {
        &self.design
    }

    pub fn solve(&self, y: &[f64]) -> CoefSurface {
        let beta = self.chol.solve(&self.design.cross(y));
        CoefSurface {
            theta: unpack_hvec(self.design.basis.n_basis(), &beta),
            basis: self.design.basis.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltCovariance {
    pub theta_hat: CoefSurface,
    pub theta_star: CoefSurface,
    pub truncation_applied: bool,
    pub min_eigenvalue_before: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationDiagnostics {
    pub truncation_applied: bool,
    pub min_eigenvalue_before: f64,
}

impl AltCovariance {
    pub fn diagnostics(&self) -> TruncationDiagnostics {
        TruncationDiagnostics {
            truncation_applied: self.truncation_applied,
            min_eigenvalue_before: self.min_eigenvalue_before,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedNull {
    pub theta0: CoefSurface,
}

/// Least-squares surface `Θ̂` of the raw products, with its PSD truncation.
pub fn fit_alt_covariance(solver: &PairSolver, residuals: &Panel, gram: &GramMatrix) -> AltCovariance {
    let y = solver.design.products(residuals);
    let theta_hat = solver.solve(&y);
    let (theta_star, min_eigenvalue_before, truncation_applied) = truncate_with_info(&theta_hat, gram);
    AltCovariance {
        theta_hat,
        theta_star,
        truncation_applied,
        min_eigenvalue_before,
    }
}

/// `𝒦 Ĉ0`: the same least-squares problem with responses `Ĉ0(t_j, t_j′)`.
pub fn smooth_null(solver: &PairSolver, residuals: &Panel, c0: impl Fn(f64, f64) -> f64) -> SmoothedNull {
    let y = solver.design.evaluate(residuals, c0);
    SmoothedNull {
        theta0: solver.solve(&y),
    }
}

fn truncate_with_info(theta: &CoefSurface, gram: &GramMatrix) -> (CoefSurface, f64, bool) {
    let tilde = &gram.sqrt * &theta.theta * &gram.sqrt;
    let (values, vectors) = sym_eigen(&tilde);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return (theta.clone(), min, false);
    }
    let clipped = sym_spectral_map(&values, &vectors, |v| v.max(0.0));
    let mut back = &gram.inv_sqrt * clipped * &gram.inv_sqrt;
    crate::linalg::symmetrize(&mut back);
    (
        CoefSurface {
            theta: back,
            basis: theta.basis.clone(),
        },
        min,
        true,
    )
}

/// Closest PSD surface in Hilbert–Schmidt distance: clip the negative
/// eigenvalues of `G^{1/2} Θ G^{1/2}` and map back.
pub fn psd_truncate(theta: &CoefSurface, gram: &GramMatrix) -> CoefSurface {
    truncate_with_info(theta, gram).0
}

/// Least-squares criterion summed over ordered pairs `j ≠ j′`.
pub fn pair_objective(residuals: &Panel, surface: &CoefSurface) -> f64 {
    let mut total = 0.0;
    for (t, y) in residuals.curves() {
        for j in 0..t.len() {
            for jj in 0..t.len() {
                if j != jj {
                    let r = y[j] * y[jj] - surface.eval_unchecked(t[j], t[jj]);
                    total += r * r;
                }
            }
        }
    }
    total
}
