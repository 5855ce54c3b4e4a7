//! Structured left matrix fraction descriptions.
//!
//! `G(s) = R_rb / s^2 + D(s)^-1 N(s)`, with `D` and `N` linear in the real
//! parameter vector `theta` through a scalar polynomial basis that is
//! orthonormal with respect to the data (see [`OrthoBasis`]).

mod basis;
mod structure;

pub use basis::OrthoBasis;
pub use structure::{build_structure, LmfdStructure, Slot};

use crate::textio::{matrix_from_rows, TomlWriter};
use crate::{par, CMatrix, Error, Result, C64};
use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub struct LmfdModel {
    structure: LmfdStructure,
    basis_d: OrthoBasis,
    basis_n: OrthoBasis,
    theta: Vec<f64>,
}

/// `D(s)`, `N(s)` and the basis values they were built from.
pub(crate) struct Evaluated {
    pub d: CMatrix,
    pub n: CMatrix,
    pub phi_d: Vec<C64>,
    pub phi_n: Vec<C64>,
}

impl LmfdModel {
    pub fn new(structure: LmfdStructure, basis_d: OrthoBasis, basis_n: OrthoBasis, theta: Vec<f64>) -> Result<Self> {
        if basis_d.len() < structure.d_basis_len() || basis_n.len() < structure.n_basis_len() {
            return Err(Error::invalid(format!(
                "bases of length {}/{} are too short for row degrees {:?}",
                basis_d.len(),
                basis_n.len(),
                structure.row_degrees()
            )));
        }
        check_theta(&structure, &theta)?;
        Ok(Self {
            structure,
            basis_d,
            basis_n,
            theta,
        })
    }

    pub fn structure(&self) -> &LmfdStructure {
        &self.structure
    }

    pub fn basis_d(&self) -> &OrthoBasis {
        &self.basis_d
    }

    pub fn basis_n(&self) -> &OrthoBasis {
        &self.basis_n
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Same structure and bases, different parameters.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        check_theta(&self.structure, &theta)?;
        Ok(Self { theta, ..self.clone() })
    }

    pub(crate) fn evaluate(&self, theta: &[f64], s: C64) -> Evaluated {
        let st = &self.structure;
        let (p, q) = (st.outputs(), st.inputs());
        let phi_d = self.basis_d.eval(s);
        let phi_n = self.basis_n.eval(s);
        let mut d = CMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                let slot = st.d_slot(i, j);
                let mut v = dot(&theta[slot.offset..slot.offset + slot.count], &phi_d);
                if i == j {
                    v += phi_d[st.row_degrees()[i]];
                }
                d[(i, j)] = v;
            }
        }
        let mut n = CMatrix::zeros(p, q);
        for i in 0..p {
            for k in 0..q {
                let slot = st.n_slot(i, k);
                n[(i, k)] = dot(&theta[slot.offset..slot.offset + slot.count], &phi_n);
            }
        }
        Evaluated { d, n, phi_d, phi_n }
    }

    /// Row-major rigid-body block `R_rb` (zero without rigid-body modes).
    pub fn rigid_block(&self) -> DMatrix<f64> {
        rigid_block(&self.structure, &self.theta)
    }

    pub fn d_matrix(&self, s: C64) -> CMatrix {
        self.evaluate(&self.theta, s).d
    }

    pub fn n_matrix(&self, s: C64) -> CMatrix {
        self.evaluate(&self.theta, s).n
    }

    /// `G(s)` for parameters `theta` (same structure and bases).
    pub fn response_with(&self, theta: &[f64], s: C64) -> Result<CMatrix> {
        check_theta(&self.structure, theta)?;
        let e = self.evaluate(theta, s);
        let mut g =
            e.d.lu()
                .solve(&e.n)
                .ok_or_else(|| Error::singular("LMFD denominator", format!("D(s) is singular at s = {s}")))?;
        if self.structure.n_rb() > 0 {
            if s == C64::new(0.0, 0.0) {
                return Err(Error::singular("LMFD rigid-body block", "evaluation at s = 0"));
            }
            let inv = (s * s).inv();
            let r = rigid_block(&self.structure, theta);
            g.zip_apply(&r.map(|v| C64::new(v, 0.0)), |a, b| *a += b * inv);
        }
        Ok(g)
    }

    pub fn response(&self, s: C64) -> Result<CMatrix> {
        self.response_with(&self.theta, s)
    }

    /// Frequency response on `omega` (rad/s), evaluated in parallel.
    pub fn frf(&self, omega: &[f64]) -> Result<Vec<CMatrix>> {
        par::try_map_range(omega.len(), |k| self.response(C64::new(0.0, omega[k])))
    }

    /// Real linearization whose eigenvalues, scaled by the basis frequency,
    /// are the roots of `det D`.
    ///
    /// Unknowns are `phi_n(x) w_j` for `n < nu_j` with `D(x) w = 0`. Lower
    /// slots follow the basis recurrence; the top slot of column `j` is
    /// closed through row `j` of `D`, where the pinned `phi_{nu_j}` lives.
    pub fn linearization(&self) -> DMatrix<f64> {
        let st = &self.structure;
        let nu = st.row_degrees();
        let p = st.outputs();
        let mut start = vec![0; p + 1];
        for j in 0..p {
            start[j + 1] = start[j] + nu[j];
        }
        let nf = start[p];
        let h = self.basis_d.recurrence();
        let mut m = DMatrix::zeros(nf, nf);
        for j in 0..p {
            for n in 0..nu[j] {
                let row = start[j] + n;
                for k in 0..=n {
                    m[(row, start[j] + k)] += h[(k, n)];
                }
                if n + 1 < nu[j] {
                    m[(row, row + 1)] += h[(n + 1, n)];
                } else {
                    let beta = h[(n + 1, n)];
                    for l in 0..p {
                        let slot = st.d_slot(j, l);
                        for c in 0..slot.count {
                            m[(row, start[l] + c)] -= beta * self.theta[slot.offset + c];
                        }
                    }
                }
            }
        }
        m
    }

    /// Roots of `det D` (flexible poles), `2 (n_m - n_rb)` values.
    pub fn flexible_poles(&self) -> Vec<C64> {
        let m = self.linearization();
        if m.nrows() == 0 {
            return Vec::new();
        }
        let sigma = self.basis_d.sigma();
        m.complex_eigenvalues().iter().map(|z| z * sigma).collect()
    }

    /// All `2 n_m` poles: flexible roots plus the rigid-body zeros.
    pub fn poles(&self) -> Result<Vec<C64>> {
        let mut p = self.flexible_poles();
        if p.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::singular(
                "LMFD pole computation",
                "non-finite eigenvalues; check the degree structure",
            ));
        }
        p.extend(std::iter::repeat_n(C64::new(0.0, 0.0), 2 * self.structure.n_rb()));
        Ok(p)
    }

    pub fn to_text(&self) -> Result<String> {
        let st = &self.structure;
        let mut w = TomlWriter::new();
        w.comment("LMFD model: G = R_rb / s^2 + D^-1 N");
        w.int("p", st.outputs() as i64);
        w.int("q", st.inputs() as i64);
        w.int("n_m", st.n_modes() as i64);
        w.int("n_rb", st.n_rb() as i64);
        w.ints("row_degrees", st.row_degrees());
        w.floats("theta", &self.theta)?;
        for (name, b) in [("basis_d", &self.basis_d), ("basis_n", &self.basis_n)] {
            w.table(name);
            w.int("len", b.len() as i64);
            w.float("sigma", b.sigma())?;
            w.float("c0", b.c0())?;
            w.matrix("h", b.recurrence())?;
        }
        Ok(w.finish())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: LmfdDoc = toml::from_str(text)?;
        let st = LmfdStructure::new(doc.p, doc.q, doc.n_m, doc.n_rb)?;
        if st.row_degrees() != doc.row_degrees.as_slice() {
            return Err(Error::Parse(format!(
                "row degrees {:?} do not match the structure {:?}",
                doc.row_degrees,
                st.row_degrees()
            )));
        }
        let basis = |b: BasisDoc| {
            let h = matrix_from_rows("h", &b.h, b.len.max(1), b.len.saturating_sub(1))?;
            OrthoBasis::from_parts(b.len, b.sigma, b.c0, h)
        };
        let (bd, bn) = (basis(doc.basis_d)?, basis(doc.basis_n)?);
        Self::new(st, bd, bn, doc.theta).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::textio::write_file(path, &self.to_text()?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LmfdDoc {
    p: usize,
    q: usize,
    n_m: usize,
    n_rb: usize,
    row_degrees: Vec<usize>,
    theta: Vec<f64>,
    basis_d: BasisDoc,
    basis_n: BasisDoc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisDoc {
    len: usize,
    sigma: f64,
    c0: f64,
    h: Vec<Vec<f64>>,
}

fn check_theta(structure: &LmfdStructure, theta: &[f64]) -> Result<()> {
    if theta.len() != structure.n_theta() {
        return Err(Error::invalid(format!(
            "parameter vector has length {}, structure needs {}",
            theta.len(),
            structure.n_theta()
        )));
    }
    Ok(())
}

fn dot(c: &[f64], phi: &[C64]) -> C64 {
    c.iter().zip(phi).map(|(c, p)| p * *c).sum()
}

pub(crate) fn rigid_block(st: &LmfdStructure, theta: &[f64]) -> DMatrix<f64> {
    let (p, q) = (st.outputs(), st.inputs());
    match st.r_offset() {
        Some(o) => DMatrix::from_fn(p, q, |i, k| theta[o + i * q + k]),
        None => DMatrix::zeros(p, q),
    }
}

pub fn eval_lmfd(model: &LmfdModel, s: C64) -> Result<CMatrix> {
    model.response(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(p: usize, q: usize, n_m: usize, n_rb: usize, seed: u64) -> LmfdModel {
        let st = build_structure(p, q, n_m, n_rb).unwrap();
        let omega: Vec<f64> = (1..=60).map(|k| k as f64 * 5.0).collect();
        let w = vec![1.0; omega.len()];
        let bd = OrthoBasis::orthonormal(&omega, &w, st.d_basis_len(), 300.0).unwrap();
        let bn = OrthoBasis::orthonormal(&omega, &w, st.n_basis_len(), 300.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..st.n_theta()).map(|_| rng.random_range(-1.0..1.0)).collect();
        LmfdModel::new(st, bd, bn, theta).unwrap()
    }

    /// Controller-form realization of the transposed (right) MFD, built from
    /// monomial coefficients; returns `G(s)` through the resolvent.
    fn realization_response(m: &LmfdModel, s: C64) -> CMatrix {
        let st = m.structure();
        let (p, q) = (st.outputs(), st.inputs());
        let nu = st.row_degrees();
        let cd = m.basis_d().monomial_coefficients();
        let cn = m.basis_n().monomial_coefficients();
        let th = m.theta();
        // monomial coefficient k of D_ij and N_ik
        let d_coef = |i: usize, j: usize, k: usize| {
            let slot = st.d_slot(i, j);
            let mut v: f64 = (0..slot.count).map(|n| th[slot.offset + n] * cd[(n, k)]).sum();
            if i == j {
                v += cd[(nu[i], k)];
            }
            v
        };
        let n_coef = |i: usize, kk: usize, k: usize| {
            let slot = st.n_slot(i, kk);
            if k >= slot.count {
                return 0.0;
            }
            (0..slot.count).map(|n| th[slot.offset + n] * cn[(n, k)]).sum::<f64>()
        };
        let nx: usize = nu.iter().sum();
        let mut start = vec![0; p + 1];
        for i in 0..p {
            start[i + 1] = start[i] + nu[i];
        }
        // D^T = Dhc S(s) + Dlc Psi(s), column degrees nu
        let dhc = DMatrix::from_fn(p, p, |a, b| d_coef(b, a, nu[b]));
        let dlc = DMatrix::from_fn(p, nx, |a, col| {
            let b = (0..p).find(|&b| col < start[b + 1]).unwrap();
            d_coef(b, a, col - start[b])
        });
        let nlc = DMatrix::from_fn(q, nx, |kk, col| {
            let b = (0..p).find(|&b| col < start[b + 1]).unwrap();
            n_coef(b, kk, col - start[b])
        });
        let mut a0 = DMatrix::<f64>::zeros(nx, nx);
        let mut b0 = DMatrix::<f64>::zeros(nx, p);
        for b in 0..p {
            for k in 0..nu[b] {
                if k + 1 < nu[b] {
                    a0[(start[b] + k, start[b] + k + 1)] = 1.0;
                } else {
                    b0[(start[b] + k, b)] = 1.0;
                }
            }
        }
        let dinv = dhc.try_inverse().unwrap();
        let a = &a0 - &b0 * &dinv * &dlc;
        let b = &b0 * &dinv;
        let c = nlc;
        // G^T = C (sI - A)^-1 B
        let to_c = |x: &DMatrix<f64>| x.map(|v| C64::new(v, 0.0));
        let res = (CMatrix::identity(nx, nx) * s - to_c(&a)).try_inverse().unwrap();
        let gt = to_c(&c) * res * to_c(&b);
        let mut g = gt.transpose();
        let r = m.rigid_block();
        g += r.map(|v| C64::new(v, 0.0)) / (s * s);
        g
    }

    #[test]
    fn matches_realization_oracle() {
        for (p, q, n_m, n_rb, seed) in [(1, 1, 3, 1, 1), (2, 3, 5, 1, 2), (3, 2, 6, 2, 3), (3, 4, 7, 0, 4)] {
            let m = random_model(p, q, n_m, n_rb, seed);
            for w in [3.0, 40.0, 170.0, 420.0] {
                let s = C64::new(0.0, w);
                let g = m.response(s).unwrap();
                let o = realization_response(&m, s);
                let rel = (&g - &o).norm() / o.norm();
                assert!(rel < 1e-9, "{p}x{q}: rel {rel:e}");
            }
        }
    }

    #[test]
    fn identity_denominator() {
        let st = build_structure(2, 2, 1, 1).unwrap(); // rigid only: D = phi_0 I
        let omega = [1.0, 2.0];
        let bd = OrthoBasis::monomial(1, 1.0);
        let bn = OrthoBasis::orthonormal(&omega, &[1.0, 1.0], 0, 1.0).unwrap();
        let theta = vec![1.0, 2.0, 3.0, 4.0];
        let m = LmfdModel::new(st, bd, bn, theta).unwrap();
        let g = m.response(C64::new(0.0, 2.0)).unwrap();
        assert!((g[(1, 0)] - C64::new(-0.75, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn siso_hand_evaluation() {
        // D = s^2 + s + 1, N = 1 in plain monomials
        let st = build_structure(1, 1, 1, 0).unwrap();
        let m = LmfdModel::new(
            st,
            OrthoBasis::monomial(3, 1.0),
            OrthoBasis::monomial(1, 1.0),
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        let g = m.response(C64::new(0.0, 1.0)).unwrap();
        assert!((g[(0, 0)] - C64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn scalar_poles() {
        let st = build_structure(1, 1, 1, 0).unwrap();
        let m = LmfdModel::new(
            st,
            OrthoBasis::monomial(3, 1.0),
            OrthoBasis::monomial(1, 1.0),
            vec![2.0, 3.0, 1.0],
        )
        .unwrap();
        let mut p: Vec<f64> = m.poles().unwrap().iter().map(|z| z.re).collect();
        p.sort_by(f64::total_cmp);
        assert!((p[0] + 2.0).abs() < 1e-12 && (p[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn poles_are_roots_of_det() {
        let m = random_model(3, 2, 7, 2, 9);
        let poles = m.poles().unwrap();
        assert_eq!(poles.len(), 14);
        assert_eq!(poles.iter().filter(|z| z.norm() == 0.0).count(), 4);
        for z in poles.iter().filter(|z| z.norm() > 0.0) {
            let d = m.d_matrix(*z);
            let scale = d.norm();
            let sv = d.singular_values();
            assert!(sv.min() < 1e-8 * scale, "{z}: {} vs {scale}", sv.min());
        }
    }

    #[test]
    fn relative_degree_two() {
        let m = random_model(2, 2, 4, 1, 5);
        let w = 3000.0;
        let g = m.response(C64::new(0.0, w)).unwrap();
        let g10 = m.response(C64::new(0.0, 10.0 * w)).unwrap();
        // |G| w^2 stays bounded: ratio between decades ~1
        let r = (g10.norm() * 100.0) / g.norm();
        assert!(r < 2.0, "{r}");
    }

    #[test]
    fn wrong_theta_length_rejected() {
        let m = random_model(2, 2, 3, 1, 6);
        assert!(m.with_theta(vec![0.0; 3]).is_err());
        assert!(m.response_with(&[0.0; 3], C64::new(0.0, 1.0)).is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let m = random_model(3, 2, 6, 2, 7);
        let back = LmfdModel::from_text(&m.to_text().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
