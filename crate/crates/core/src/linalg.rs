//! Dense least-squares and projection kernels.
//!
//! Everything goes through a thin Householder QR. A matrix counts as
//! rank-deficient when the ratio of its smallest to largest singular value
//! falls below [`RANK_TOL`]; the singular values are read off the small
//! triangular factor, which has the same spectrum as the full matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{IvError, Result};

/// Scale-free rank tolerance on σ_min / σ_max.
pub const RANK_TOL: f64 = 1e-10;

/// Ratio of smallest to largest singular value (0 for empty or zero matrices,
/// and for matrices with more columns than rows).
pub fn singular_value_ratio(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 0 || m.nrows() == 0 || m.ncols() > m.nrows() {
        return 0.0;
    }
    let sv = if m.nrows() > m.ncols() {
        m.clone().qr().r().singular_values()
    } else {
        m.clone().singular_values()
    };
    ratio_of(sv.as_slice())
}

fn ratio_of(sv: &[f64]) -> f64 {
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 && max.is_finite() {
        min / max
    } else {
        0.0
    }
}

/// Number of singular values whose ratio to the largest is at least `RANK_TOL`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 || m.nrows() == 0 {
        return 0;
    }
    let sv = if m.nrows() > m.ncols() {
        m.clone().qr().r().singular_values()
    } else {
        m.clone().singular_values()
    };
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s / max >= RANK_TOL).count()
}

/// Columns that are (numerically) linear combinations of earlier columns.
pub fn collinear_columns(m: &DMatrix<f64>) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..m.ncols() {
        let mut trial = kept.clone();
        trial.push(j);
        let sub = m.select_columns(&trial);
        if singular_value_ratio(&sub) < RANK_TOL {
            bad.push(j);
        } else {
            kept = trial;
        }
    }
    bad
}

/// A factored full-column-rank design, reusable for many right-hand sides.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    ratio: f64,
}

impl LeastSquares {
    /// Factor `a`; fails when `a` is rank-deficient. `what` names the matrix
    /// in the error message.
    pub fn new(a: &DMatrix<f64>, what: &str) -> Result<Self> {
        let (n, k) = a.shape();
        if k == 0 {
            return Ok(LeastSquares {
                q: DMatrix::zeros(n, 0),
                r: DMatrix::zeros(0, 0),
                ratio: 1.0,
            });
        }
        if k > n {
            return Err(IvError::RankDeficient {
                what: what.to_string(),
                ratio: 0.0,
                detail: format!("{k} columns but only {n} rows"),
            });
        }
        let qr = a.clone().qr();
        let r = qr.r();
        let ratio = ratio_of(r.singular_values().as_slice());
        if ratio.is_nan() || ratio < RANK_TOL {
            let bad = collinear_columns(a);
            return Err(IvError::RankDeficient {
                what: what.to_string(),
                ratio,
                detail: format!(
                    "numerical rank {} of {k}; dependent columns {:?}",
                    k - bad.len().min(k),
                    bad
                ),
            });
        }
        Ok(LeastSquares {
            q: qr.q(),
            r,
            ratio,
        })
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    pub fn condition_ratio(&self) -> f64 {
        self.ratio
    }

    /// Orthonormal basis of the column space (n × k).
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.ncols() == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        let qtb = self.q.tr_mul(b);
        self.r
            .solve_upper_triangular(&qtb)
            .expect("triangular factor checked nonsingular")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.ncols() == 0 {
            return DVector::zeros(0);
        }
        let qtb = self.q.tr_mul(b);
        self.r
            .solve_upper_triangular(&qtb)
            .expect("triangular factor checked nonsingular")
    }

    /// P_A b.
    pub fn project(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.q * self.q.tr_mul(b)
    }

    pub fn project_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.q * self.q.tr_mul(b)
    }

    /// M_A b = b − P_A b.
    pub fn annihilate(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        b - self.project(b)
    }

    pub fn annihilate_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        b - self.project_vec(b)
    }

    /// ‖P_A b‖².
    pub fn projected_norm_sq(&self, b: &DVector<f64>) -> f64 {
        self.q.tr_mul(b).norm_squared()
    }

    /// (AᵀA)⁻¹ = R⁻¹R⁻ᵀ.
    pub fn inverse_gram(&self) -> DMatrix<f64> {
        let k = self.ncols();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("triangular factor checked nonsingular");
        &r_inv * r_inv.transpose()
    }
}

/// Least-squares coefficients minimising ‖A·C − B‖ column by column.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(a, b)?;
    Ok(LeastSquares::new(a, "design matrix")?.solve(b))
}

/// Vector right-hand side variant of [`lstsq`].
pub fn lstsq_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() {
        return Err(IvError::Invalid(format!(
            "row mismatch: design has {} rows, right-hand side {}",
            a.nrows(),
            b.len()
        )));
    }
    Ok(LeastSquares::new(a, "design matrix")?.solve_vec(b))
}

/// M − B·lstsq(B, M): the part of `m` orthogonal to the columns of `basis`.
pub fn annihilate(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(basis, m)?;
    Ok(LeastSquares::new(basis, "basis matrix")?.annihilate(m))
}

fn check_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(IvError::Invalid(format!(
            "row mismatch: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    Ok(())
}

/// Horizontal concatenation of column blocks with equal row counts.
pub(crate) fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let k: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, k);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(b);
        at += b.ncols();
    }
    out
}
