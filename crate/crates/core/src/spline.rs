//! Cubic B-splines on the unit interval.
//!
//! The basis is clamped (boundary knots repeated four times), so `b(0)` and
//! `b(1)` are unit vectors and the functions form a partition of unity on
//! `[0, 1]`. Inner products are exact: the Gram matrix integrates products
//! of cubics (degree 6) with four Gauss–Legendre nodes per knot span.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, symmetrize};

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Interior knot rule.
#[derive(Debug, Clone, PartialEq)]
pub enum KnotPlacement<'a> {
    /// Equally spaced interior knots.
    Equal,
    /// Interior knots at empirical quantiles of the supplied times.
    Quantile(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementTag {
    Equal,
    Quantile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    n_basis: usize,
    knots: Vec<f64>,
    placement: PlacementTag,
}

/// Linear-interpolation quantile (the "type 7" rule) of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

impl BSplineBasis {
    pub fn new(n_basis: usize, placement: KnotPlacement<'_>) -> Result<Self> {
        if n_basis < ORDER {
            return Err(invalid!("cubic basis needs at least 4 functions, got {n_basis}"));
        }
        let n_interior = n_basis - ORDER;
        let (interior, tag) = match placement {
            KnotPlacement::Equal => (
                (1..=n_interior)
                    .map(|i| i as f64 / (n_interior + 1) as f64)
                    .collect::<Vec<_>>(),
                PlacementTag::Equal,
            ),
            KnotPlacement::Quantile(times) => {
                let mut sorted: Vec<f64> = times.to_vec();
                if sorted.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(invalid!("quantile knots need times in [0, 1]"));
                }
                sorted.sort_by(f64::total_cmp);
                let mut distinct = sorted.clone();
                distinct.dedup();
                if distinct.len() < n_interior + 2 {
                    return Err(invalid!(
                        "{} distinct times cannot place {n_interior} interior knots",
                        distinct.len()
                    ));
                }
                let knots: Vec<f64> = (1..=n_interior)
                    .map(|i| quantile_sorted(&sorted, i as f64 / (n_interior + 1) as f64))
                    .collect();
                let strictly_inside = knots.iter().all(|&k| k > 0.0 && k < 1.0)
                    && knots.windows(2).all(|w| w[1] > w[0]);
                if !strictly_inside {
                    return Err(invalid!("quantile knots coincide or touch the boundary: {knots:?}"));
                }
                (knots, PlacementTag::Quantile)
            }
        };
        let mut knots = vec![0.0; ORDER];
        knots.extend(interior);
        knots.extend(core::iter::repeat_n(1.0, ORDER));
        Ok(Self {
            n_basis,
            knots,
            placement: tag,
        })
    }

    pub fn equal(n_basis: usize) -> Result<Self> {
        Self::new(n_basis, KnotPlacement::Equal)
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn placement(&self) -> PlacementTag {
        self.placement
    }

    fn span(&self, t: f64) -> usize {
        // knots[span] <= t < knots[span + 1], with t = 1 assigned to the last span.
        let last = self.n_basis - 1;
        if t >= 1.0 {
            return last;
        }
        let mut lo = DEGREE;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `t`: returns `(first, values)` with
    /// `B_{first + r}(t) = values[r]`. `t` must lie in `[0, 1]`.
    #[inline]
    pub fn eval_local(&self, t: f64) -> (usize, [f64; ORDER]) {
        let span = self.span(t);
        let k = &self.knots;
        let mut n = [0.0; ORDER];
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        n[0] = 1.0;
        for j in 1..=DEGREE {
            left[j] = t - k[span + 1 - j];
            right[j] = k[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span - DEGREE, n)
    }

    /// `b(t)` as a dense vector of length H.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid!("t = {t} outside [0, 1]"));
        }
        let mut out = vec![0.0; self.n_basis];
        let (first, vals) = self.eval_local(t);
        out[first..first + ORDER].copy_from_slice(&vals);
        Ok(out)
    }

    /// Second-order difference penalty `DᵀD`.
    pub fn difference_penalty(&self) -> DMatrix<f64> {
        let h = self.n_basis;
        let mut d = DMatrix::zeros(h - 2, h);
        for i in 0..h - 2 {
            d[(i, i)] = 1.0;
            d[(i, i + 1)] = -2.0;
            d[(i, i + 2)] = 1.0;
        }
        d.transpose() * d
    }

    /// Knot spans of positive length.
    pub fn spans(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.knots
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[0], w[1]))
    }
}

const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// `G = ∫ b(t) b(t)ᵀ dt` together with its symmetric square roots.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub g: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl GramMatrix {
    pub fn new(basis: &BSplineBasis) -> Result<Self> {
        let h = basis.n_basis();
        let mut g = DMatrix::zeros(h, h);
        for (a, b) in basis.spans() {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, w) in GL4_NODES.iter().zip(GL4_WEIGHTS.iter()) {
                let t = mid + half * x;
                let (first, vals) = basis.eval_local(t);
                for r in 0..ORDER {
                    for c in 0..ORDER {
                        g[(first + r, first + c)] += w * half * vals[r] * vals[c];
                    }
                }
            }
        }
        symmetrize(&mut g);
        let (sqrt, inv_sqrt) = linalg::symmetric_roots(&g)
            .map_err(|e| Error::Internal(format!("Gram matrix not positive definite: {e}")))?;
        Ok(Self { g, sqrt, inv_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }
}

/// Bivariate surface `b(t)ᵀ Θ b(t′)` with symmetric `Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefSurface {
    pub theta: DMatrix<f64>,
    pub basis: BSplineBasis,
}

impl CoefSurface {
    pub fn new(theta: DMatrix<f64>, basis: BSplineBasis) -> Result<Self> {
        let h = basis.n_basis();
        if theta.nrows() != h || theta.ncols() != h {
            return Err(invalid!(
                "coefficient matrix is {}x{}, basis has {h} functions",
                theta.nrows(),
                theta.ncols()
            ));
        }
        let scale = theta.amax().max(1.0);
        if (&theta - theta.transpose()).amax() > 1e-12 * scale {
            return Err(invalid!("coefficient matrix is not symmetric"));
        }
        Ok(Self { theta, basis })
    }

    pub fn zero(basis: BSplineBasis) -> Self {
        let h = basis.n_basis();
        Self {
            theta: DMatrix::zeros(h, h),
            basis,
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, t: f64, s: f64) -> f64 {
        let (fa, va) = self.basis.eval_local(t);
        let (fb, vb) = self.basis.eval_local(s);
        let mut acc = 0.0;
        for r in 0..ORDER {
            for c in 0..ORDER {
                acc += va[r] * self.theta[(fa + r, fb + c)] * vb[c];
            }
        }
        acc
    }

    /// `b(t)ᵀ Θ b(t′)`.
    pub fn eval(&self, t: f64, t_prime: f64) -> Result<f64> {
        for x in [t, t_prime] {
            if !(0.0..=1.0).contains(&x) {
                return Err(invalid!("surface argument {x} outside [0, 1]"));
            }
        }
        Ok(self.eval_unchecked(t, t_prime))
    }

    /// Values on an equispaced `n × n` grid over `[0, 1]²`, row-major in `t`.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let pts: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
        let mut out = Vec::with_capacity(n * n);
        for &t in &pts {
            for &s in &pts {
                out.push(self.eval_unchecked(t, s));
            }
        }
        out
    }
}
