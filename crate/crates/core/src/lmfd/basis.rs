use crate::{Error, Result, C64};
use nalgebra::DMatrix;

/// Scalar polynomial basis `phi_0, phi_1, ...` in the normalized variable
/// `x = s / sigma`, stored as an upper-Hessenberg recurrence
///
/// ```text
/// phi_0 = c0
/// phi_{n+1} = (x phi_n - sum_{m<=n} h[m, n] phi_m) / h[n+1, n]
/// ```
///
/// All recurrence coefficients are real, so every `phi_n` has real
/// coefficients in `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis {
    sigma: f64,
    c0: f64,
    h: DMatrix<f64>,
    len: usize,
}

/// Real inner product `Re sum_k w_k a_k conj(b_k)`.
fn inner(w: &[f64], a: &[C64], b: &[C64]) -> f64 {
    w.iter()
        .zip(a.iter().zip(b))
        .map(|(w, (a, b))| w * (a.re * b.re + a.im * b.im))
        .sum()
}

impl OrthoBasis {
    /// Orthonormalizes `1, x, x^2, ...` (`len` functions) on the points
    /// `j omega_k` with respect to `Re sum_k w_k phi_a conj(phi_b)`, using
    /// Arnoldi with one reorthogonalization pass.
    pub fn orthonormal(omega: &[f64], weights: &[f64], len: usize, sigma: f64) -> Result<Self> {
        if omega.len() != weights.len() {
            return Err(Error::invalid("basis weights must match the grid"));
        }
        if omega.is_empty() {
            return Err(Error::invalid("basis grid is empty"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("basis frequency scale must be positive"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("basis weights must be finite and nonnegative"));
        }
        if len > 2 * omega.len() {
            return Err(Error::rank(
                "orthonormal basis",
                format!("{len} polynomials on {} frequency points", omega.len()),
            ));
        }
        let mut h = DMatrix::zeros(len.max(1), len.saturating_sub(1));
        if len == 0 {
            return Ok(Self { sigma, c0: 1.0, h, len });
        }
        let x: Vec<C64> = omega.iter().map(|w| C64::new(0.0, w / sigma)).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::rank("orthonormal basis", "all weights are zero"));
        }
        let c0 = 1.0 / total.sqrt();
        let mut phis: Vec<Vec<C64>> = vec![vec![C64::new(c0, 0.0); omega.len()]];
        for n in 0..len - 1 {
            let mut v: Vec<C64> = phis[n].iter().zip(&x).map(|(p, x)| p * x).collect();
            let start = inner(weights, &v, &v).sqrt();
            for _pass in 0..2 {
                for (m, phi) in phis.iter().enumerate() {
                    let c = inner(weights, &v, phi);
                    h[(m, n)] += c;
                    for (vk, pk) in v.iter_mut().zip(phi) {
                        *vk -= pk * c;
                    }
                }
            }
            let beta = inner(weights, &v, &v).sqrt();
            if !(beta > 1e-12 * start) {
                return Err(Error::rank(
                    "orthonormal basis",
                    format!("polynomial {} is numerically dependent on the grid", n + 1),
                ));
            }
            h[(n + 1, n)] = beta;
            for vk in v.iter_mut() {
                *vk /= beta;
            }
            phis.push(v);
        }
        Ok(Self { sigma, c0, h, len })
    }

    /// Plain monomials `(s / sigma)^n`, for comparison.
    pub fn monomial(len: usize, sigma: f64) -> Self {
        let mut h = DMatrix::zeros(len.max(1), len.saturating_sub(1));
        for n in 0..len.saturating_sub(1) {
            h[(n + 1, n)] = 1.0;
        }
        Self { sigma, c0: 1.0, h, len }
    }

    /// Rebuilds a basis from stored recurrence data.
    pub fn from_parts(len: usize, sigma: f64, c0: f64, h: DMatrix<f64>) -> Result<Self> {
        if h.shape() != (len.max(1), len.saturating_sub(1)) {
            return Err(Error::Parse(format!(
                "basis of length {len} needs a {}x{} recurrence, got {}x{}",
                len.max(1),
                len.saturating_sub(1),
                h.nrows(),
                h.ncols()
            )));
        }
        if !(sigma > 0.0) || c0 == 0.0 || (0..h.ncols()).any(|n| h[(n + 1, n)] == 0.0) {
            return Err(Error::Parse("degenerate basis recurrence".into()));
        }
        Ok(Self { sigma, c0, h, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// Recurrence coefficients, `len x (len - 1)`.
    pub fn recurrence(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// `phi_0(s) .. phi_{len-1}(s)`.
    pub fn eval(&self, s: C64) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.len];
        self.eval_into(s, &mut out);
        out
    }

    pub fn eval_into(&self, s: C64, out: &mut [C64]) {
        if self.len == 0 {
            return;
        }
        let x = s / self.sigma;
        out[0] = C64::new(self.c0, 0.0);
        for n in 0..self.len - 1 {
            let mut v = out[n] * x;
            for m in 0..=n {
                v -= out[m] * self.h[(m, n)];
            }
            out[n + 1] = v / self.h[(n + 1, n)];
        }
    }

    /// Coefficients of each `phi_n` in powers of `s` (row `n`, column = power).
    pub fn monomial_coefficients(&self) -> DMatrix<f64> {
        let n = self.len;
        let mut c = DMatrix::zeros(n, n.max(1));
        if n == 0 {
            return c;
        }
        // coefficients in x first
        c[(0, 0)] = self.c0;
        for k in 0..n - 1 {
            let mut next = vec![0.0; n];
            for p in 0..n - 1 {
                next[p + 1] += c[(k, p)];
            }
            for m in 0..=k {
                for (p, v) in next.iter_mut().enumerate() {
                    *v -= self.h[(m, k)] * c[(m, p)];
                }
            }
            for (p, v) in next.iter().enumerate() {
                c[(k + 1, p)] = v / self.h[(k + 1, k)];
            }
        }
        for p in 0..n {
            let f = self.sigma.powi(-(p as i32));
            c.column_mut(p).scale_mut(f);
        }
        c
    }
}
