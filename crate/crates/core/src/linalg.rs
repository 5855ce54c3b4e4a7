//! Small dense linear-algebra helpers on top of nalgebra.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Outcome of a least-squares solve.
#[derive(Debug, Clone)]
pub struct LstsqSolution {
    pub x: DVector<f64>,
    /// Rough 2-norm condition estimate of the column-equilibrated matrix.
    pub cond_estimate: f64,
}

const CHOLESKY_COND_LIMIT: f64 = 1e4;
const RANK_TOL: f64 = 1e-13;

/// Solves `min ||A x - b||` for tall `A` with full column rank.
///
/// Columns are equilibrated first. Well-conditioned problems go through the
/// normal equations with one refinement sweep; the rest fall back to a
/// Householder QR of the scaled matrix.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<LstsqSolution> {
    let (m, n) = a.shape();
    if n == 0 {
        return Ok(LstsqSolution {
            x: DVector::zeros(0),
            cond_estimate: 1.0,
        });
    }
    if m < n {
        return Err(Error::rank(context, format!("{m} equations for {n} unknowns")));
    }
    let scale: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    if let Some(j) = scale.iter().position(|&c| c == 0.0 || !c.is_finite()) {
        return Err(Error::rank(context, format!("column {j} is zero or non-finite")));
    }
    let mut scaled = a.clone();
    for (j, c) in scale.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / c);
    }
    let normal = gram(&scaled);
    let rhs = scaled.tr_mul(b);
    // eigenvalues of the small Gram matrix give cond(A) reliably up to
    // ~1e8, enough to decide whether squaring it is safe
    let eig = normal.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    let mut sol = None;
    if cond < CHOLESKY_COND_LIMIT {
        if let Some(chol) = normal.cholesky() {
            let mut x = chol.solve(&rhs);
            let r = b - &scaled * &x;
            x += chol.solve(&scaled.tr_mul(&r));
            sol = Some((x, cond));
        }
    }
    let (xs, cond) = match sol {
        Some(s) => s,
        None => qr_solve(scaled, b, context)?,
    };
    let x = DVector::from_iterator(n, xs.iter().zip(&scale).map(|(v, c)| v / c));
    Ok(LstsqSolution { x, cond_estimate: cond })
}

fn qr_solve(a: DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<(DVector<f64>, f64)> {
    let n = a.ncols();
    let qr = a.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lo > RANK_TOL * hi) {
        return Err(Error::rank(context, format!("triangular factor ratio {:.3e}", lo / hi)));
    }
    let qtb = qr.q().tr_mul(b);
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::rank(context, "triangular solve failed"))?;
    Ok((x, hi / lo))
}

/// Rows per block in [`gram`].
const GRAM_BLOCK: usize = 1024;

/// `A^T A`, accumulated over fixed row blocks in index order so the result
/// is independent of the thread count.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let blocks = m.div_ceil(GRAM_BLOCK);
    let parts = crate::par::map_range(blocks, |b| {
        let r0 = b * GRAM_BLOCK;
        let rows = a.rows(r0, GRAM_BLOCK.min(m - r0));
        rows.transpose() * rows
    });
    let mut out = DMatrix::zeros(n, n);
    for p in parts {
        out += p;
    }
    out
}

/// 2-norm condition number from the singular values.
pub fn cond(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    hi / lo
}

/// Condition number after equilibrating columns to unit norm.
pub fn cond_scaled(a: &DMatrix<f64>) -> f64 {
    let mut s = a.clone();
    for j in 0..s.ncols() {
        let c = s.column(j).norm();
        if c > 0.0 {
            s.column_mut(j).scale_mut(1.0 / c);
        }
    }
    cond(&s)
}
