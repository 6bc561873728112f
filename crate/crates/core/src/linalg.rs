//! Dense linear-algebra helpers shared by the estimators.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::error::{Error, Result};

/// Smoothing-parameter grid: 2^-20, 2^-19, ..., 2^20.
pub fn lambda_grid() -> Vec<f64> {
    (-20..=20).map(|e| Float::powi(2.0_f64, e)).collect()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues in ascending order.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen(m);
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `V diag(f(λ)) Vᵀ` for a symmetric matrix.
pub fn sym_spectral_map(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &v) in values.iter().enumerate() {
        let fj = f(v);
        scaled.column_mut(j).scale_mut(fj);
    }
    let mut out = &scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

/// Cholesky factor, escalating a relative ridge until the factorization succeeds.
pub fn cholesky_ridged(a: &DMatrix<f64>, base_ridge: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Singular("empty system".into()));
    }
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut ridge = base_ridge * scale;
    for _ in 0..8 {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok((c, ridge));
        }
        ridge *= 100.0;
    }
    Err(Error::Singular(format!(
        "{n}x{n} system not positive definite after ridge {ridge:e}"
    )))
}

/// Penalized least squares `min ‖y − Xβ‖² + λ βᵀPβ` in Demmler–Reinsch form.
///
/// One Cholesky and one symmetric eigendecomposition up front make every
/// subsequent λ an O(p) evaluation of fit, effective degrees of freedom and
/// residual sum of squares.
#[derive(Debug, Clone)]
pub struct PenalizedLs {
    n: usize,
    yty: f64,
    // L⁻ᵀ U, maps rotated coordinates back to coefficients.
    back: DMatrix<f64>,
    spectrum: DVector<f64>,
    rotated_rhs: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcvChoice {
    pub lambda: f64,
    pub edf: f64,
    pub rss: f64,
    pub gcv: f64,
}

impl PenalizedLs {
    /// `xtx = XᵀX`, `penalty = P`, `xty = Xᵀy`, `yty = yᵀy`, `n` = number of rows of X.
    pub fn new(
        xtx: &DMatrix<f64>,
        penalty: &DMatrix<f64>,
        xty: &DVector<f64>,
        yty: f64,
        n: usize,
    ) -> Result<Self> {
        let (chol, _) = cholesky_ridged(xtx, 1e-10)?;
        let l = chol.l();
        let l_inv = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
            .ok_or_else(|| Error::Singular("triangular inverse".into()))?;
        let mut m = &l_inv * penalty * l_inv.transpose();
        symmetrize(&mut m);
        let (spectrum, u) = sym_eigen(&m);
        let spectrum = spectrum.map(|s| s.max(0.0));
        let rotated_rhs = u.transpose() * (&l_inv * xty);
        let back = l_inv.transpose() * u;
        Ok(Self {
            n,
            yty,
            back,
            spectrum,
            rotated_rhs,
        })
    }

    pub fn edf(&self, lambda: f64) -> f64 {
        self.spectrum.iter().map(|&s| 1.0 / (1.0 + lambda * s)).sum()
    }

    pub fn rss(&self, lambda: f64) -> f64 {
        let fitted: f64 = self
            .spectrum
            .iter()
            .zip(self.rotated_rhs.iter())
            .map(|(&s, &z)| {
                let shrink = 1.0 / (1.0 + lambda * s);
                z * z * (2.0 * shrink - shrink * shrink)
            })
            .sum();
        (self.yty - fitted).max(0.0)
    }

    pub fn coefficients(&self, lambda: f64) -> DVector<f64> {
        let shrunk = DVector::from_iterator(
            self.spectrum.len(),
            self.spectrum
                .iter()
                .zip(self.rotated_rhs.iter())
                .map(|(&s, &z)| z / (1.0 + lambda * s)),
        );
        &self.back * shrunk
    }

    /// Generalized cross-validation over `grid`; ties keep the smallest λ.
    pub fn select_gcv(&self, grid: &[f64]) -> Result<GcvChoice> {
        let n = self.n as f64;
        let mut best: Option<GcvChoice> = None;
        for &lambda in grid {
            let edf = self.edf(lambda);
            let denom = n - edf;
            if denom <= 1e-8 * n {
                continue;
            }
            let rss = self.rss(lambda);
            let gcv = n * rss / (denom * denom);
            if best.is_none_or(|b| gcv < b.gcv) {
                best = Some(GcvChoice {
                    lambda,
                    edf,
                    rss,
                    gcv,
                });
            }
        }
        best.ok_or_else(|| {
            Error::Degenerate(format!(
                "no smoothing parameter leaves residual degrees of freedom (n = {})",
                self.n
            ))
        })
    }
}

/// Symmetric square root and inverse square root of a positive definite matrix.
pub fn symmetric_roots(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (values, vectors) = sym_eigen(g);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::Internal(format!(
            "matrix expected positive definite has eigenvalue {min:e}"
        )));
    }
    let sqrt = sym_spectral_map(&values, &vectors, |v| v.sqrt());
    let inv_sqrt = sym_spectral_map(&values, &vectors, |v| 1.0 / v.sqrt());
    Ok((sqrt, inv_sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demmler_reinsch_matches_direct_solve() {
        let x = DMatrix::from_row_slice(
            6,
            3,
            &[1.0, 0.2, 0.0, 0.5, 1.0, 0.1, 0.0, 0.4, 1.0, 0.3, 0.3, 0.3, 1.0, 0.0, 0.7, 0.2, 0.9, 0.1],
        );
        let y = DVector::from_row_slice(&[1.0, -0.5, 2.0, 0.3, 0.8, -1.2]);
        let p = DMatrix::from_row_slice(3, 3, &[1.0, -2.0, 1.0, -2.0, 4.0, -2.0, 1.0, -2.0, 1.0]);
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * &y;
        let pls = PenalizedLs::new(&xtx, &p, &xty, y.dot(&y), 6).unwrap();
        for &lambda in &[0.0, 0.3, 5.0] {
            let direct = (&xtx + &p * lambda).cholesky().unwrap().solve(&xty);
            let beta = pls.coefficients(lambda);
            assert!((&beta - &direct).amax() < 1e-10);
            let resid = &y - &x * &direct;
            assert!((pls.rss(lambda) - resid.dot(&resid)).abs() < 1e-10);
            let hat_trace = (&xtx + &p * lambda).cholesky().unwrap().solve(&xtx).trace();
            assert!((pls.edf(lambda) - hat_trace).abs() < 1e-10);
        }
    }

    #[test]
    fn roots_multiply_back() {
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.7]);
        let (s, si) = symmetric_roots(&g).unwrap();
        assert!((&s * &s - &g).amax() < 1e-12);
        assert!((&si * &g * &si - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }
}
