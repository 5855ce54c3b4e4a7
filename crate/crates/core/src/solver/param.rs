use crate::lmfd::LmfdModel;
use crate::modal::ModalModel;
use crate::{CMatrix, Coord, Error, Result, C64};
use nalgebra::DMatrix;

/// A real parameter vector mapped to a `p x q` transfer function.
pub trait Parametrization: Sync {
    fn n_params(&self) -> usize;

    /// `(outputs, inputs)`.
    fn shape(&self) -> (usize, usize);

    fn response(&self, theta: &[f64], s: C64) -> Result<CMatrix>;

    /// `G(s)` together with `d vec(G) / d theta` (`vec` column-major, so the
    /// Jacobian is `pq x n_params`).
    fn jacobian(&self, theta: &[f64], s: C64) -> Result<(CMatrix, DMatrix<C64>)>;
}

/// LMFD with fixed structure and bases; `theta` is the model's parameter
/// vector.
pub struct LmfdParam<'a> {
    model: &'a LmfdModel,
}

impl<'a> LmfdParam<'a> {
    pub fn new(model: &'a LmfdModel) -> Self {
        Self { model }
    }
}

impl Parametrization for LmfdParam<'_> {
    fn n_params(&self) -> usize {
        self.model.structure().n_theta()
    }

    fn shape(&self) -> (usize, usize) {
        let st = self.model.structure();
        (st.outputs(), st.inputs())
    }

    fn response(&self, theta: &[f64], s: C64) -> Result<CMatrix> {
        self.model.response_with(theta, s)
    }

    fn jacobian(&self, theta: &[f64], s: C64) -> Result<(CMatrix, DMatrix<C64>)> {
        let st = self.model.structure();
        if theta.len() != st.n_theta() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let (p, q) = (st.outputs(), st.inputs());
        let e = self.model.evaluate(theta, s);
        let lu = e.d.lu();
        let m = lu
            .try_inverse()
            .ok_or_else(|| Error::singular("LMFD denominator", format!("D(s) is singular at s = {s}")))?;
        let gf = &m * &e.n;
        let inv_s2 = (s * s).inv();
        let mut jac = DMatrix::zeros(p * q, st.n_theta());
        for i in 0..p {
            for j in 0..p {
                let slot = st.d_slot(i, j);
                for n in 0..slot.count {
                    let col = slot.offset + n;
                    let phi = e.phi_d[n];
                    for c in 0..q {
                        let gjc = gf[(j, c)] * phi;
                        for a in 0..p {
                            jac[(a + p * c, col)] = -m[(a, i)] * gjc;
                        }
                    }
                }
            }
            for k in 0..q {
                let slot = st.n_slot(i, k);
                for n in 0..slot.count {
                    let col = slot.offset + n;
                    let phi = e.phi_n[n];
                    for a in 0..p {
                        jac[(a + p * k, col)] = m[(a, i)] * phi;
                    }
                }
            }
        }
        let mut g = gf;
        if let Some(o) = st.r_offset() {
            for i in 0..p {
                for k in 0..q {
                    g[(i, k)] += inv_s2 * theta[o + i * q + k];
                    jac[(i + p * k, o + i * q + k)] = inv_s2;
                }
            }
        }
        Ok((g, jac))
    }
}

/// Modal parametrization. `theta` is `vec([L_s^T  R  omega2  zeta])`
/// (column-major over the `n_m x (p + q + 2)` block) with the fixed zero
/// stiffness and damping of rigid-body modes left out.
#[derive(Debug, Clone)]
pub struct ModalParam {
    p: usize,
    q: usize,
    rigid: Vec<bool>,
    flex: Vec<usize>,
}

impl ModalParam {
    pub fn new(p: usize, q: usize, rigid: Vec<bool>) -> Self {
        let flex = (0..rigid.len()).filter(|&i| !rigid[i]).collect();
        Self { p, q, rigid, flex }
    }

    pub fn for_model(model: &ModalModel) -> Self {
        let rigid = model.omega2().iter().map(|&w| w == 0.0).collect();
        Self::new(model.n_outputs(), model.n_inputs(), rigid)
    }

    pub fn n_modes(&self) -> usize {
        self.rigid.len()
    }

    pub fn to_theta(&self, model: &ModalModel) -> Vec<f64> {
        let n_m = self.n_modes();
        let mut t = Vec::with_capacity(self.n_params());
        let l = model.mode_shapes();
        for j in 0..self.p {
            t.extend((0..n_m).map(|i| l[(j, i)]));
        }
        let r = model.input_matrix();
        for k in 0..self.q {
            t.extend((0..n_m).map(|i| r[(i, k)]));
        }
        t.extend(self.flex.iter().map(|&i| model.omega2()[i]));
        t.extend(self.flex.iter().map(|&i| model.zeta()[i]));
        t
    }

    /// Splits `theta` into `(omega2, zeta, L_s, R)`.
    pub fn unpack(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n_m = self.n_modes();
        let l = DMatrix::from_fn(self.p, n_m, |j, i| theta[j * n_m + i]);
        let base = self.p * n_m;
        let r = DMatrix::from_fn(n_m, self.q, |i, k| theta[base + k * n_m + i]);
        let mut omega2 = vec![0.0; n_m];
        let mut zeta = vec![0.0; n_m];
        let nf = self.flex.len();
        let base = (self.p + self.q) * n_m;
        for (f, &i) in self.flex.iter().enumerate() {
            omega2[i] = theta[base + f];
            zeta[i] = theta[base + nf + f];
        }
        (omega2, zeta, l, r)
    }

    pub fn to_model(&self, theta: &[f64], coords: Vec<Coord>) -> Result<ModalModel> {
        let (omega2, zeta, l, r) = self.unpack(theta);
        ModalModel::new(omega2, zeta, l, r, coords)
    }
}

impl Parametrization for ModalParam {
    fn n_params(&self) -> usize {
        (self.p + self.q) * self.n_modes() + 2 * self.flex.len()
    }

    fn shape(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    fn response(&self, theta: &[f64], s: C64) -> Result<CMatrix> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let (omega2, zeta, l, r) = self.unpack(theta);
        crate::modal::modal_response(&omega2, &zeta, &l, &r, s)
    }

    fn jacobian(&self, theta: &[f64], s: C64) -> Result<(CMatrix, DMatrix<C64>)> {
        if theta.len() != self.n_params() {
            return Err(Error::invalid("parameter vector has the wrong length"));
        }
        let (p, q, n_m) = (self.p, self.q, self.n_modes());
        let (omega2, zeta, l, r) = self.unpack(theta);
        let mut g = CMatrix::zeros(p, q);
        let mut jac = DMatrix::zeros(p * q, self.n_params());
        let nf = self.flex.len();
        let base_w = (p + q) * n_m;
        let mut flex_idx = vec![usize::MAX; n_m];
        for (f, &i) in self.flex.iter().enumerate() {
            flex_idx[i] = f;
        }
        for i in 0..n_m {
            let d = s * s + s * zeta[i] + omega2[i];
            if d == C64::new(0.0, 0.0) {
                return Err(Error::singular(
                    "modal response",
                    format!("mode {i} has a pole at s = {s}"),
                ));
            }
            let inv = d.inv();
            let inv2 = -inv * inv;
            for k in 0..q {
                for j in 0..p {
                    let e = j + p * k;
                    let res = l[(j, i)] * r[(i, k)];
                    g[(j, k)] += inv * res;
                    jac[(e, j * n_m + i)] = inv * r[(i, k)];
                    jac[(e, p * n_m + k * n_m + i)] = inv * l[(j, i)];
                    if flex_idx[i] != usize::MAX {
                        let f = flex_idx[i];
                        jac[(e, base_w + f)] = inv2 * res;
                        jac[(e, base_w + nf + f)] = inv2 * s * res;
                    }
                }
            }
        }
        Ok((g, jac))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmfd::{build_structure, OrthoBasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check<P: Parametrization>(param: &P, theta: &[f64], s: C64) -> f64 {
        let (_, jac) = param.jacobian(theta, s).unwrap();
        let mut worst = 0.0f64;
        for c in 0..theta.len() {
            let h = 1e-6 * theta[c].abs().max(1e-3);
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[c] += h;
            tm[c] -= h;
            let gp = param.response(&tp, s).unwrap();
            let gm = param.response(&tm, s).unwrap();
            let fd = (gp - gm) / C64::new(2.0 * h, 0.0);
            let an = DMatrix::from_column_slice(fd.nrows(), fd.ncols(), jac.column(c).as_slice());
            let scale = an.norm().max(fd.norm()).max(1e-300);
            worst = worst.max((an - fd).norm() / scale);
        }
        worst
    }

    #[test]
    fn lmfd_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let st = build_structure(2, 3, 4, 1).unwrap();
        let omega: Vec<f64> = (1..=40).map(|k| k as f64 * 3.0).collect();
        let w = vec![1.0; omega.len()];
        let bd = OrthoBasis::orthonormal(&omega, &w, st.d_basis_len(), 120.0).unwrap();
        let bn = OrthoBasis::orthonormal(&omega, &w, st.n_basis_len(), 120.0).unwrap();
        let theta: Vec<f64> = (0..st.n_theta()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LmfdModel::new(st, bd, bn, theta.clone()).unwrap();
        let param = LmfdParam::new(&model);
        let err = fd_check(&param, &theta, C64::new(0.0, 37.0));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn modal_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let param = ModalParam::new(3, 2, vec![true, false, false]);
        let mut theta: Vec<f64> = (0..param.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = theta.len();
        theta[n - 4] = 900.0;
        theta[n - 3] = 2500.0;
        theta[n - 2] = 3.0;
        theta[n - 1] = 5.0;
        let err = fd_check(&param, &theta, C64::new(0.0, 40.0));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn modal_theta_round_trip() {
        let m = ModalModel::new(
            vec![0.0, 4.0, 9.0],
            vec![0.0, 0.1, 0.2],
            DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.2, 0.3, 2.0, 1.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            vec![[0.0, 0.0], [1.0, 0.0]],
        )
        .unwrap();
        let param = ModalParam::for_model(&m);
        assert_eq!(param.n_params(), 3 * 4 + 4);
        let t = param.to_theta(&m);
        let back = param.to_model(&t, m.sensor_coords().to_vec()).unwrap();
        assert_eq!(back, m);
        let s = C64::new(0.0, 1.7);
        assert!((param.response(&t, s).unwrap() - m.response(s).unwrap()).norm() < 1e-15);
    }
}
