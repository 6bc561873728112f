//! Maximum likelihood for random intercept-and-slope models.
//!
//! Subject `i` contributes `y_i ~ N(0, Z_i Σ Z_iᵀ + S_i)` where `Z_i` places the
//! rows `[1, t]` of outcome `k` in the outcome's 2-column block and `S_i` is
//! diagonal with `σ_k²`. With `Σ = LLᵀ` the Woodbury identity reduces every
//! subject to per-outcome sufficient statistics and a `2K × 2K` system, so the
//! cost is independent of the number of visits.
//!
//! Parameters are unconstrained: the lower triangle of `L` row by row with
//! log-diagonal, then `log(σ_k² − floor)`.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dataset::Panel;
use crate::error::{invalid, Error, Result};
use crate::linalg::sym_eigen;
use crate::optim::{self, BfgsOptions};

pub const ERROR_VAR_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-subject, per-outcome sums: count, Σt, Σt², Σy, Σty, Σy².
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Suff {
    n: f64,
    st: f64,
    stt: f64,
    sy: f64,
    sty: f64,
    syy: f64,
}

impl Suff {
    fn from_curve(times: &[f64], values: &[f64]) -> Self {
        let mut s = Suff::default();
        for (&t, &y) in times.iter().zip(values) {
            s.n += 1.0;
            s.st += t;
            s.stt += t * t;
            s.sy += y;
            s.sty += t * y;
            s.syy += y * y;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullFitUnivariate {
    pub sigma0_sq: f64,
    pub sigma01: f64,
    pub sigma1_sq: f64,
    pub error_var: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub grad_inf: f64,
    pub error_var_at_floor: bool,
    pub starts_run: usize,
}

impl NullFitUnivariate {
    /// `C0(t, t′) = σ0² + σ01 (t + t′) + σ1² t t′`.
    #[inline]
    pub fn eval_null_cov(&self, t: f64, t_prime: f64) -> f64 {
        self.sigma0_sq + self.sigma01 * (t + t_prime) + self.sigma1_sq * t * t_prime
    }

    pub fn random_effects_cov(&self) -> [[f64; 2]; 2] {
        [[self.sigma0_sq, self.sigma01], [self.sigma01, self.sigma1_sq]]
    }

    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence(alloc::format!(
                "univariate null fit: gradient norm {:.3e} after {} starts",
                self.grad_inf, self.starts_run
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullFitMultivariate {
    /// `2K × 2K` covariance of `(b_{0i1}, b_{1i1}, …, b_{0iK}, b_{1iK})`, row-major.
    pub sigma: Vec<Vec<f64>>,
    pub error_vars: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub grad_inf: f64,
    pub min_eigenvalue: f64,
    /// Set when the minimum eigenvalue fell below 1e-8; sampling then uses `Σ + 1e-8 I`.
    pub near_singular: bool,
    pub starts_run: usize,
}

impl NullFitMultivariate {
    pub fn n_outcomes(&self) -> usize {
        self.error_vars.len()
    }

    pub fn sigma_matrix(&self) -> DMatrix<f64> {
        let d = self.sigma.len();
        DMatrix::from_fn(d, d, |i, j| self.sigma[i][j])
    }

    /// `(σ_{k0}², σ_{k01}, σ_{k1}²)` for outcome `k` (1-based).
    pub fn diagonal_block(&self, k: usize) -> Result<(f64, f64, f64)> {
        self.check_outcome(k)?;
        let i = 2 * (k - 1);
        Ok((self.sigma[i][i], self.sigma[i][i + 1], self.sigma[i + 1][i + 1]))
    }

    fn check_outcome(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_outcomes() {
            Err(invalid!("outcome {k} outside 1..={}", self.n_outcomes()))
        } else {
            Ok(())
        }
    }

    /// `C0^{(kk′)}(t, t′) = [1, t] Σ_{kk′} [1, t′]ᵀ`.
    pub fn eval_cross_cov(&self, k: usize, k_prime: usize, t: f64, t_prime: f64) -> Result<f64> {
        self.check_outcome(k)?;
        self.check_outcome(k_prime)?;
        let (i, j) = (2 * (k - 1), 2 * (k_prime - 1));
        let s = &self.sigma;
        Ok(s[i][j] + s[i][j + 1] * t_prime + s[i + 1][j] * t + s[i + 1][j + 1] * t * t_prime)
    }

    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence(alloc::format!(
                "multivariate null fit: gradient norm {:.3e} after {} starts",
                self.grad_inf, self.starts_run
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullFitOptions {
    pub starts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for NullFitOptions {
    fn default() -> Self {
        Self {
            starts: 3,
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

/// Gaussian log-likelihood of the stacked model, with sufficient statistics
/// laid out subject-major: `stats[i * K + k]`.
#[derive(Debug, Clone)]
pub(crate) struct LmmLikelihood {
    k: usize,
    stats: Vec<Suff>,
    n_obs: f64,
}

impl LmmLikelihood {
    pub(crate) fn new(panels: &[&Panel], n_subjects: usize) -> Self {
        let k = panels.len();
        let mut stats = vec![Suff::default(); n_subjects * k];
        for (kk, panel) in panels.iter().enumerate() {
            for c in 0..panel.n_curves() {
                let (t, y) = panel.curve(c);
                let s = Suff::from_curve(t, y);
                let slot = &mut stats[panel.subjects[c] * k + kk];
                debug_assert_eq!(slot.n, 0.0);
                *slot = s;
            }
        }
        let n_obs = stats.iter().map(|s| s.n).sum();
        stats.retain(|s| s.n > 0.0 || k > 1);
        Self { k, stats, n_obs }
    }

    fn n_subjects(&self) -> usize {
        self.stats.len() / self.k
    }

    #[cfg(test)]
    pub(crate) fn n_params(&self) -> usize {
        let d = 2 * self.k;
        d * (d + 1) / 2 + self.k
    }

    /// Unpacks `L` (row-major, d×d) and `σ_k²`.
    fn unpack(&self, theta: &[f64], l: &mut [f64], s2: &mut [f64]) {
        let d = 2 * self.k;
        l.iter_mut().for_each(|v| *v = 0.0);
        let mut p = 0;
        for i in 0..d {
            for j in 0..=i {
                l[i * d + j] = if i == j { theta[p].exp() } else { theta[p] };
                p += 1;
            }
        }
        for kk in 0..self.k {
            s2[kk] = ERROR_VAR_FLOOR + theta[p + kk].exp();
        }
    }

    /// Log-likelihood only.
    #[cfg(test)]
    pub(crate) fn log_likelihood(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; theta.len()];
        -self.objective(theta, &mut g) * self.n_obs
    }

    /// `−ℓ(θ)/n_obs` and its gradient.
    pub(crate) fn objective(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        if self.k == 1 {
            self.objective_univariate(theta, grad)
        } else {
            self.objective_general(theta, grad)
        }
    }

    fn objective_univariate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let l11 = theta[0].exp();
        let l21 = theta[1];
        let l22 = theta[2].exp();
        let e = theta[3].exp();
        let s2 = ERROR_VAR_FLOOR + e;
        let inv = 1.0 / s2;
        let ln_s2 = s2.ln();
        let (mut ll, mut g00, mut g01, mut g11, mut gs2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in &self.stats {
            let (a00, a01, a11) = (s.n * inv, s.st * inv, s.stt * inv);
            let (a0, a1) = (s.sy * inv, s.sty * inv);
            // B = Lᵀ A L
            let al00 = a00 * l11 + a01 * l21;
            let al01 = a01 * l22;
            let al10 = a01 * l11 + a11 * l21;
            let al11 = a11 * l22;
            let m00 = 1.0 + l11 * al00 + l21 * al10;
            let m01 = l11 * al01 + l21 * al11;
            let m11 = 1.0 + l22 * al11;
            let det = m00 * m11 - m01 * m01;
            let (i00, i01, i11) = (m11 / det, -m01 / det, m00 / det);
            let u0 = l11 * a0 + l21 * a1;
            let u1 = l22 * a1;
            let w0 = i00 * u0 + i01 * u1;
            let w1 = i01 * u0 + i11 * u1;
            let quad = s.syy * inv - (u0 * w0 + u1 * w1);
            ll -= 0.5 * (s.n * (LN_2PI + ln_s2) + det.ln() + quad);
            // P = L M⁻¹ Lᵀ
            let p00 = l11 * l11 * i00;
            let p01 = l11 * (l21 * i00 + l22 * i01);
            let p11 = l21 * l21 * i00 + 2.0 * l21 * l22 * i01 + l22 * l22 * i11;
            let c0 = p00 * a0 + p01 * a1;
            let c1 = p01 * a0 + p11 * a1;
            let r0 = a0 - (a00 * c0 + a01 * c1);
            let r1 = a1 - (a01 * c0 + a11 * c1);
            // Q = A − A P A
            let ap00 = a00 * p00 + a01 * p01;
            let ap01 = a00 * p01 + a01 * p11;
            let ap10 = a01 * p00 + a11 * p01;
            let ap11 = a01 * p01 + a11 * p11;
            let q00 = a00 - (ap00 * a00 + ap01 * a01);
            let q01 = a01 - (ap00 * a01 + ap01 * a11);
            let q11 = a11 - (ap10 * a01 + ap11 * a11);
            g00 += 0.5 * (r0 * r0 - q00);
            g01 += 0.5 * (r0 * r1 - q01);
            g11 += 0.5 * (r1 * r1 - q11);
            let resid = s.syy - 2.0 * (c0 * s.sy + c1 * s.sty)
                + (c0 * c0 * s.n + 2.0 * c0 * c1 * s.st + c1 * c1 * s.stt);
            let tr_pz = p00 * s.n + 2.0 * p01 * s.st + p11 * s.stt;
            gs2 += 0.5 * ((resid + tr_pz) * inv * inv - s.n * inv);
        }
        // ∂ℓ/∂L = 2 G L
        let gl00 = g00 * l11 + g01 * l21;
        let gl10 = g01 * l11 + g11 * l21;
        let gl11 = g11 * l22;
        let scale = -1.0 / self.n_obs;
        grad[0] = scale * 2.0 * gl00 * l11;
        grad[1] = scale * 2.0 * gl10;
        grad[2] = scale * 2.0 * gl11 * l22;
        grad[3] = scale * gs2 * e;
        scale * ll
    }

    fn objective_general(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k;
        let d = 2 * k;
        let mut l = vec![0.0; d * d];
        let mut s2 = vec![0.0; k];
        self.unpack(theta, &mut l, &mut s2);
        let ln_s2: Vec<f64> = s2.iter().map(|v| v.ln()).collect();

        let mut a = vec![0.0; d * d];
        let mut av = vec![0.0; d];
        let mut al = vec![0.0; d * d];
        let mut m = vec![0.0; d * d];
        let mut minv = vec![0.0; d * d];
        let mut lm = vec![0.0; d * d];
        let mut p = vec![0.0; d * d];
        let mut u = vec![0.0; d];
        let mut w = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut r = vec![0.0; d];
        let mut ap = vec![0.0; d * d];
        let mut gsum = vec![0.0; d * d];
        let mut gs2 = vec![0.0; k];
        let mut ll = 0.0;

        for i in 0..self.n_subjects() {
            let stats = &self.stats[i * k..(i + 1) * k];
            a.iter_mut().for_each(|v| *v = 0.0);
            let mut c0 = 0.0;
            let mut n_i = 0.0;
            let mut logdet_s = 0.0;
            for (kk, s) in stats.iter().enumerate() {
                let inv = 1.0 / s2[kk];
                let b = 2 * kk;
                a[b * d + b] = s.n * inv;
                a[b * d + b + 1] = s.st * inv;
                a[(b + 1) * d + b] = s.st * inv;
                a[(b + 1) * d + b + 1] = s.stt * inv;
                av[b] = s.sy * inv;
                av[b + 1] = s.sty * inv;
                c0 += s.syy * inv;
                n_i += s.n;
                logdet_s += s.n * ln_s2[kk];
            }
            if n_i == 0.0 {
                continue;
            }
            // AL, exploiting the 2×2 block structure of A
            for row in 0..d {
                let b = row & !1;
                for col in 0..d {
                    al[row * d + col] = a[row * d + b] * l[b * d + col] + a[row * d + b + 1] * l[(b + 1) * d + col];
                }
            }
            // M = I + Lᵀ (AL)
            for row in 0..d {
                for col in 0..=row {
                    let mut acc = 0.0;
                    for q in row.max(col)..d {
                        acc += l[q * d + row] * al[q * d + col];
                    }
                    let v = acc + if row == col { 1.0 } else { 0.0 };
                    m[row * d + col] = v;
                    m[col * d + row] = v;
                }
            }
            if !cholesky_in_place(&mut m, d) {
                return f64::INFINITY;
            }
            let logdet_m: f64 = (0..d).map(|q| 2.0 * m[q * d + q].ln()).sum();
            // u = Lᵀ a
            for row in 0..d {
                u[row] = (row..d).map(|q| l[q * d + row] * av[q]).sum();
            }
            chol_solve(&m, d, &u, &mut w);
            let quad = c0 - u.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>();
            ll -= 0.5 * (n_i * LN_2PI + logdet_s + logdet_m + quad);

            chol_inverse(&m, d, &mut minv);
            // P = L M⁻¹ Lᵀ
            for row in 0..d {
                for col in 0..d {
                    lm[row * d + col] = (0..=row).map(|q| l[row * d + q] * minv[q * d + col]).sum();
                }
            }
            for row in 0..d {
                for col in 0..=row {
                    let v: f64 = (0..=col).map(|q| lm[row * d + q] * l[col * d + q]).sum();
                    p[row * d + col] = v;
                    p[col * d + row] = v;
                }
            }
            for row in 0..d {
                c[row] = (0..d).map(|q| p[row * d + q] * av[q]).sum();
            }
            for row in 0..d {
                let b = row & !1;
                r[row] = av[row] - (a[row * d + b] * c[b] + a[row * d + b + 1] * c[b + 1]);
            }
            for row in 0..d {
                let b = row & !1;
                for col in 0..d {
                    ap[row * d + col] = a[row * d + b] * p[b * d + col] + a[row * d + b + 1] * p[(b + 1) * d + col];
                }
            }
            for row in 0..d {
                for col in 0..d {
                    let bc = col & !1;
                    let apa = ap[row * d + bc] * a[bc * d + col] + ap[row * d + bc + 1] * a[(bc + 1) * d + col];
                    let q = a[row * d + col] - apa;
                    gsum[row * d + col] += 0.5 * (r[row] * r[col] - q);
                }
            }
            for (kk, s) in stats.iter().enumerate() {
                if s.n == 0.0 {
                    continue;
                }
                let b = 2 * kk;
                let (ca, cb) = (c[b], c[b + 1]);
                let resid = s.syy - 2.0 * (ca * s.sy + cb * s.sty) + (ca * ca * s.n + 2.0 * ca * cb * s.st + cb * cb * s.stt);
                let tr_pz = p[b * d + b] * s.n + 2.0 * p[b * d + b + 1] * s.st + p[(b + 1) * d + b + 1] * s.stt;
                let inv = 1.0 / s2[kk];
                gs2[kk] += 0.5 * ((resid + tr_pz) * inv * inv - s.n * inv);
            }
        }
        let scale = -1.0 / self.n_obs;
        let mut q = 0;
        for i in 0..d {
            for j in 0..=i {
                // (G L)_{ij}
                let gl: f64 = (j..d).map(|mm| gsum[i * d + mm] * l[mm * d + j]).sum();
                let mut v = 2.0 * gl;
                if i == j {
                    v *= l[i * d + i];
                }
                grad[q] = scale * v;
                q += 1;
            }
        }
        for kk in 0..k {
            grad[q + kk] = scale * gs2[kk] * (s2[kk] - ERROR_VAR_FLOOR);
        }
        scale * ll
    }
}

fn cholesky_in_place(m: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut diag = m[j * n + j];
        for q in 0..j {
            diag -= m[j * n + q] * m[j * n + q];
        }
        if !(diag > 0.0) {
            return false;
        }
        let ljj = diag.sqrt();
        m[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut v = m[i * n + j];
            for q in 0..j {
                v -= m[i * n + q] * m[j * n + q];
            }
            m[i * n + j] = v / ljj;
        }
    }
    true
}

/// Solves `(C Cᵀ) x = b` with `C` the lower factor stored in `c`.
fn chol_solve(c: &[f64], n: usize, b: &[f64], x: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for q in 0..i {
            v -= c[i * n + q] * x[q];
        }
        x[i] = v / c[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for q in (i + 1)..n {
            v -= c[q * n + i] * x[q];
        }
        x[i] = v / c[i * n + i];
    }
}

fn chol_inverse(c: &[f64], n: usize, out: &mut [f64]) {
    let mut e = vec![0.0; n];
    let mut x = vec![0.0; n];
    for col in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[col] = 1.0;
        chol_solve(c, n, &e, &mut x);
        for row in 0..n {
            out[row * n + col] = x[row];
        }
    }
}

/// Projects a symmetric matrix onto matrices with eigenvalues ≥ `floor`, then
/// returns its log-Cholesky packing.
fn pack_cov(cov: &DMatrix<f64>, floor: f64) -> Vec<f64> {
    let (values, vectors) = sym_eigen(cov);
    let clipped = crate::linalg::sym_spectral_map(&values, &vectors, |v| v.max(floor));
    let d = clipped.nrows();
    let l = clipped
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_diagonal_element(d, d, floor.sqrt()));
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].max(1e-150).ln() } else { l[(i, j)] });
        }
    }
    out
}

fn pack_error_var(v: f64) -> f64 {
    (v - ERROR_VAR_FLOOR).max(1e-12).ln()
}

fn unpack_cov(theta: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    let mut p = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[p].exp() } else { theta[p] };
            p += 1;
        }
    }
    &l * l.transpose()
}

/// Method-of-moments start for one outcome: regress the pair products
/// `Ỹ_j Ỹ_j′` (j ≠ j′) on `(1, t + t′, t t′)`, then match the diagonal.
fn moment_start(panel: &Panel) -> (DMatrix<f64>, f64, f64) {
    let mut xtx = DMatrix::<f64>::zeros(3, 3);
    let mut xty = nalgebra::DVector::<f64>::zeros(3);
    let mut sum_sq = 0.0;
    for (t, y) in panel.curves() {
        for j in 0..t.len() {
            sum_sq += y[j] * y[j];
            for jj in (j + 1)..t.len() {
                let x = [1.0, t[j] + t[jj], t[j] * t[jj]];
                let prod = y[j] * y[jj];
                for r in 0..3 {
                    xty[r] += x[r] * prod;
                    for c in 0..3 {
                        xtx[(r, c)] += x[r] * x[c];
                    }
                }
            }
        }
    }
    let v = (sum_sq / panel.n_points().max(1) as f64).max(1e-6);
    let fallback = (DMatrix::from_diagonal_element(2, 2, 0.5 * v), 0.5 * v, v);
    let Some(chol) = xtx.cholesky() else {
        return fallback;
    };
    let c = chol.solve(&xty);
    let d = DMatrix::from_row_slice(2, 2, &[c[0], c[1], c[1], c[2]]);
    if !d.iter().all(|x| x.is_finite()) {
        return fallback;
    }
    let diag_c: f64 = panel
        .times
        .iter()
        .map(|&t| c[0] + 2.0 * c[1] * t + c[2] * t * t)
        .sum::<f64>()
        / panel.n_points() as f64;
    let s2 = (v - diag_c).max(0.1 * v);
    (d, s2, v)
}

struct StartResult {
    theta: Vec<f64>,
    f: f64,
    grad_inf: f64,
    converged: bool,
}

fn run_starts(lik: &LmmLikelihood, starts: &[Vec<f64>], opts: &NullFitOptions) -> (StartResult, usize) {
    let bfgs = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
    };
    let mut best: Option<StartResult> = None;
    let mut run = 0;
    for x0 in starts.iter().take(opts.starts.max(1)) {
        run += 1;
        let m = optim::minimize(|x, g| lik.objective(x, g), x0, &bfgs);
        let cand = StartResult {
            theta: m.x,
            f: m.f,
            grad_inf: m.grad_inf,
            converged: m.converged,
        };
        let agrees = best.as_ref().is_some_and(|b| {
            b.converged && cand.converged && (b.f - cand.f).abs() <= 1e-9 * b.f.abs().max(1.0)
        });
        let better = match &best {
            None => true,
            Some(b) => (cand.converged && !b.converged) || (cand.converged == b.converged && cand.f < b.f),
        };
        if better {
            best = Some(cand);
        }
        // two converged starts at the same optimum settle it
        if agrees {
            break;
        }
    }
    (best.expect("at least one start"), run)
}

/// ML fit of `(σ0², σ01, σ1², σ²)` to demeaned data of one outcome.
pub fn fit_null_univariate(residuals: &Panel, opts: &NullFitOptions) -> Result<NullFitUnivariate> {
    if residuals.n_curves() < 2 {
        return Err(Error::Degenerate(
            "null model needs at least two subjects with observations".to_string(),
        ));
    }
    let lik = LmmLikelihood::new(&[residuals], residuals.subjects.iter().max().map_or(0, |m| m + 1));
    let (d0, s20, v) = moment_start(residuals);
    let floor = 1e-3 * v;
    let mut starts = Vec::new();
    let mut push = |d: &DMatrix<f64>, s2: f64| {
        let mut th = pack_cov(d, floor);
        th.push(pack_error_var(s2));
        starts.push(th);
    };
    push(&d0, s20);
    push(&DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[0.5 * v, 0.5 * v])), 0.5 * v);
    push(&(&d0 * 2.0), 0.5 * s20);
    let (best, starts_run) = run_starts(&lik, &starts, opts);
    let cov = unpack_cov(&best.theta, 2);
    let error_var = ERROR_VAR_FLOOR + best.theta[3].exp();
    Ok(NullFitUnivariate {
        sigma0_sq: cov[(0, 0)],
        sigma01: cov[(0, 1)],
        sigma1_sq: cov[(1, 1)],
        error_var,
        log_likelihood: -best.f * lik.n_obs,
        converged: best.converged,
        grad_inf: best.grad_inf,
        error_var_at_floor: error_var < 2.0 * ERROR_VAR_FLOOR,
        starts_run,
    })
}

/// Cross-outcome moment start: regress `Ỹ_{jk} Ỹ_{j′k′}` on `(1, t′, t, t t′)`.
fn cross_moment(a: &Panel, b: &Panel) -> Option<[f64; 4]> {
    let mut xtx = DMatrix::<f64>::zeros(4, 4);
    let mut xty = nalgebra::DVector::<f64>::zeros(4);
    let mut bi = 0;
    for ai in 0..a.n_curves() {
        while bi < b.n_curves() && b.subjects[bi] < a.subjects[ai] {
            bi += 1;
        }
        if bi >= b.n_curves() || b.subjects[bi] != a.subjects[ai] {
            continue;
        }
        let (ta, ya) = a.curve(ai);
        let (tb, yb) = b.curve(bi);
        for (&t, &y) in ta.iter().zip(ya) {
            for (&s, &z) in tb.iter().zip(yb) {
                let x = [1.0, s, t, t * s];
                for r in 0..4 {
                    xty[r] += x[r] * y * z;
                    for c in 0..4 {
                        xtx[(r, c)] += x[r] * x[c];
                    }
                }
            }
        }
    }
    let c = xtx.cholesky()?.solve(&xty);
    Some([c[0], c[1], c[2], c[3]])
}

/// Joint ML fit of the `2K × 2K` random-effects covariance and the `K`
/// error variances. Panels must index subjects consistently.
pub fn fit_null_multivariate(
    residuals: &[Panel],
    n_subjects: usize,
    opts: &NullFitOptions,
) -> Result<NullFitMultivariate> {
    let k = residuals.len();
    if k < 2 {
        return Err(invalid!(
            "multivariate null fit needs K ≥ 2 outcomes; use the univariate fit for K = 1"
        ));
    }
    if n_subjects < 2 * k + 1 {
        return Err(Error::Degenerate(alloc::format!(
            "{n_subjects} subjects cannot identify a {}x{} covariance",
            2 * k,
            2 * k
        )));
    }
    let d = 2 * k;
    let refs: Vec<&Panel> = residuals.iter().collect();
    let lik = LmmLikelihood::new(&refs, n_subjects);

    let mut sigma = DMatrix::zeros(d, d);
    let mut s2 = vec![0.0; k];
    let mut min_v = f64::INFINITY;
    for (kk, p) in residuals.iter().enumerate() {
        let (dk, s2k, v) = moment_start(p);
        sigma.view_mut((2 * kk, 2 * kk), (2, 2)).copy_from(&dk);
        s2[kk] = s2k;
        min_v = min_v.min(v);
    }
    let block_diag = sigma.clone();
    for a in 0..k {
        for b in (a + 1)..k {
            if let Some(c) = cross_moment(&residuals[a], &residuals[b]) {
                let (i, j) = (2 * a, 2 * b);
                sigma[(i, j)] = c[0];
                sigma[(i, j + 1)] = c[1];
                sigma[(i + 1, j)] = c[2];
                sigma[(i + 1, j + 1)] = c[3];
                sigma[(j, i)] = c[0];
                sigma[(j + 1, i)] = c[1];
                sigma[(j, i + 1)] = c[2];
                sigma[(j + 1, i + 1)] = c[3];
            }
        }
    }
    let floor = 1e-3 * min_v;
    let pack = |cov: &DMatrix<f64>, scale_err: f64| {
        let mut th = pack_cov(cov, floor);
        th.extend(s2.iter().map(|&v| pack_error_var(v * scale_err)));
        th
    };
    let starts = vec![pack(&sigma, 1.0), pack(&block_diag, 1.0), pack(&(&sigma * 2.0), 0.5)];
    let (best, starts_run) = run_starts(&lik, &starts, opts);
    let cov = unpack_cov(&best.theta, d);
    let q = d * (d + 1) / 2;
    let error_vars: Vec<f64> = (0..k).map(|kk| ERROR_VAR_FLOOR + best.theta[q + kk].exp()).collect();
    let min_eigenvalue = crate::linalg::min_eigenvalue(&cov);
    if min_eigenvalue < -1e-8 {
        return Err(Error::Internal(alloc::format!(
            "log-Cholesky covariance has eigenvalue {min_eigenvalue:e}"
        )));
    }
    Ok(NullFitMultivariate {
        sigma: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        error_vars,
        log_likelihood: -best.f * lik.n_obs,
        converged: best.converged,
        grad_inf: best.grad_inf,
        min_eigenvalue,
        near_singular: min_eigenvalue < 1e-8,
        starts_run,
    })
}

/// Packs a univariate fit's parameters (for gradient checks).
#[cfg(test)]
pub(crate) fn pack_univariate(fit: &NullFitUnivariate) -> Vec<f64> {
    let d = DMatrix::from_row_slice(2, 2, &[fit.sigma0_sq, fit.sigma01, fit.sigma01, fit.sigma1_sq]);
    let mut th = pack_cov(&d, 0.0);
    th.push(pack_error_var(fit.error_var));
    th
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn simulate(n: usize, j: usize, d: [[f64; 2]; 2], s2: f64, seed: u64) -> Panel {
        let mut rng = stream(seed, Domain::Simulation, 0);
        let l11 = d[0][0].sqrt();
        let l21 = d[0][1] / l11;
        let l22 = (d[1][1] - l21 * l21).max(0.0).sqrt();
        let mut p = Panel::default();
        for i in 0..n {
            p.start_curve(i);
            let (z0, z1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let (b0, b1) = (l11 * z0, l21 * z0 + l22 * z1);
            for _ in 0..j {
                let t: f64 = rng.random();
                let e: f64 = rng.sample(StandardNormal);
                p.push(t, b0 + b1 * t + s2.sqrt() * e);
            }
        }
        p
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = simulate(40, 4, [[1.0, -0.3], [-0.3, 0.8]], 0.5, 1);
        let lik = LmmLikelihood::new(&[&p], 40);
        let theta = [0.1, -0.2, -0.3, -0.5];
        let mut g = [0.0; 4];
        lik.objective(&theta, &mut g);
        for i in 0..4 {
            let h = 1e-6;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let mut scratch = [0.0; 4];
            let fd = (lik.objective(&tp, &mut scratch) - lik.objective(&tm, &mut scratch)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn general_path_agrees_with_univariate_path() {
        let p = simulate(30, 5, [[1.0, 0.2], [0.2, 0.5]], 0.7, 2);
        let a = LmmLikelihood::new(&[&p], 30);
        // two outcomes: the same panel twice, cross block zero
        let b = LmmLikelihood::new(&[&p, &p], 30);
        let th1 = [0.2, 0.1, -0.4, -0.2];
        let mut g1 = [0.0; 4];
        let f1 = a.objective(&th1, &mut g1);
        // build a block-diagonal L for the general path
        let mut th2 = vec![0.0; 14];
        // row-major lower triangle of 4x4: (0,0),(1,0),(1,1),(2,0),(2,1),(2,2),(3,0),(3,1),(3,2),(3,3)
        th2[0] = th1[0];
        th2[1] = th1[1];
        th2[2] = th1[2];
        th2[5] = th1[0];
        th2[8] = th1[1];
        th2[9] = th1[2];
        th2[10] = th1[3];
        th2[11] = th1[3];
        let mut g2 = vec![0.0; 14];
        let f2 = b.objective(&th2, &mut g2);
        // per-observation averages agree; each block carries half the observations
        assert!((f1 - f2).abs() < 1e-12, "{f1} vs {f2}");
        for (i, j) in [(0, 0), (1, 1), (2, 2), (0, 5), (1, 8), (2, 9), (3, 10), (3, 11)] {
            assert!((g1[i] - 2.0 * g2[j]).abs() < 1e-10, "{i} vs {j}");
        }
    }

    #[test]
    fn general_gradient_matches_finite_differences() {
        let p1 = simulate(25, 3, [[1.0, 0.2], [0.2, 0.5]], 0.7, 3);
        let p2 = simulate(25, 4, [[0.5, 0.0], [0.0, 0.3]], 0.4, 4);
        let lik = LmmLikelihood::new(&[&p1, &p2], 25);
        let theta: Vec<f64> = (0..lik.n_params()).map(|i| 0.1 * ((i as f64) * 0.7).sin()).collect();
        let mut g = vec![0.0; theta.len()];
        lik.objective(&theta, &mut g);
        let mut scratch = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (lik.objective(&tp, &mut scratch) - lik.objective(&tm, &mut scratch)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn single_subject_is_unidentifiable() {
        let mut p = Panel::default();
        p.start_curve(0);
        p.push(0.1, 1.0);
        p.push(0.5, 2.0);
        assert!(fit_null_univariate(&p, &NullFitOptions::default()).is_err());
    }

    #[test]
    fn multivariate_rejects_single_outcome() {
        let p = simulate(30, 3, [[1.0, 0.0], [0.0, 1.0]], 1.0, 5);
        assert!(matches!(
            fit_null_multivariate(&[p], 30, &NullFitOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn recovers_parameters() {
        let p = simulate(800, 6, [[1.0, -0.3], [-0.3, 0.6]], 0.5, 6);
        let fit = fit_null_univariate(&p, &NullFitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.sigma0_sq - 1.0).abs() < 0.15, "{fit:?}");
        assert!((fit.sigma01 + 0.3).abs() < 0.15, "{fit:?}");
        assert!((fit.sigma1_sq - 0.6).abs() < 0.2, "{fit:?}");
        assert!((fit.error_var - 0.5).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn likelihood_is_stationary_at_the_optimum() {
        let p = simulate(300, 5, [[1.0, -0.5], [-0.5, 0.5]], 1.0, 9);
        let fit = fit_null_univariate(&p, &NullFitOptions::default()).unwrap();
        let lik = LmmLikelihood::new(&[&p], p.n_curves());
        let th = pack_univariate(&fit);
        assert!((lik.log_likelihood(&th) - fit.log_likelihood).abs() < 1e-8 * fit.log_likelihood.abs());
        let h = 1e-5;
        for i in 0..th.len() {
            let (mut a, mut b) = (th.clone(), th.clone());
            a[i] += h;
            b[i] -= h;
            let d = (lik.log_likelihood(&a) - lik.log_likelihood(&b)) / (2.0 * h) / lik.n_obs;
            assert!(d.abs() < 1e-4, "component {i}: {d}");
        }
    }
}
