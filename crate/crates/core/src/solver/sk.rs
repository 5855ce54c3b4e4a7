use super::{cost, LmfdParam, SolveReport, Termination, TraceEntry, WeightingSpec};
use crate::frf::FrfDataset;
use crate::linalg::lstsq;
use crate::lmfd::{LmfdModel, LmfdStructure, OrthoBasis};
use crate::{par, CMatrix, Error, Result, C64};
use nalgebra::{DMatrix, DVector};

/// Polynomial basis used for the linear SK subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Rebuilt on the data and the current SK weights each iteration.
    Orthonormal,
    /// `(s / sigma)^n`, mainly for comparison.
    Monomial,
}

#[derive(Debug, Clone)]
pub struct SkOptions {
    pub iterations: usize,
    pub basis: BasisKind,
    pub stage: String,
}

impl Default for SkOptions {
    fn default() -> Self {
        Self {
            iterations: 20,
            basis: BasisKind::Orthonormal,
            stage: "sk".into(),
        }
    }
}

/// One linearized LS problem `min |A theta - b|` plus the bases its columns
/// refer to.
pub struct Regression {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub basis_d: OrthoBasis,
    pub basis_n: OrthoBasis,
}

/// Builds the SK regression around `prev` (Levy's linearization if `None`).
///
/// For output `i`, input `c` the residual is
/// `W_ic [M (D Gb - N) - (R - R_prev) / s^2]_ic` with `M = D_prev^-1` and
/// `Gb = G - R_prev / s^2`; pinned coefficients and `R_prev` go to `b`.
pub fn sk_regression(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    prev: Option<&LmfdModel>,
    kind: BasisKind,
) -> Result<Regression> {
    w.check(frf)?;
    let (p, q) = (st.outputs(), st.inputs());
    if frf.shape() != (p, q) {
        return Err(Error::invalid(format!(
            "structure is {p}x{q} but the FRF is {}x{}",
            frf.shape().0,
            frf.shape().1
        )));
    }
    let omega = frf.omega();
    let m = frf.n_freq();
    let r_prev = prev.map_or_else(|| DMatrix::zeros(p, q), |mdl| mdl.rigid_block());
    let local = par::try_map_range(m, |k| -> Result<(CMatrix, CMatrix)> {
        let s = C64::new(0.0, omega[k]);
        let mk = match prev {
            Some(mdl) => mdl
                .d_matrix(s)
                .try_inverse()
                .ok_or_else(|| Error::singular("SK weighting", format!("previous D(s) is singular at s = {s}")))?,
            None => CMatrix::identity(p, p),
        };
        if mk.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::singular(
                "SK weighting",
                format!("previous D(s) is singular at s = {s}"),
            ));
        }
        let inv_s2 = (s * s).inv();
        let gb = CMatrix::from_fn(p, q, |i, c| frf.response()[k][(i, c)] - inv_s2 * r_prev[(i, c)]);
        Ok((mk, gb))
    })?;

    let mut wd = vec![0.0; m];
    let mut wn = vec![0.0; m];
    for k in 0..m {
        let (mk, gb) = &local[k];
        for i in 0..p {
            let rm: f64 = mk.row(i).iter().map(|v| v.norm_sqr()).sum();
            for c in 0..q {
                let wic = w.at(k)[(i, c)].powi(2);
                let cg: f64 = gb.column(c).iter().map(|v| v.norm_sqr()).sum();
                wd[k] += wic * rm * cg;
                wn[k] += wic * rm;
            }
        }
    }
    let sigma = omega.iter().copied().fold(0.0, f64::max);
    let (basis_d, basis_n) = match kind {
        BasisKind::Orthonormal => (
            OrthoBasis::orthonormal(omega, &wd, st.d_basis_len(), sigma)?,
            OrthoBasis::orthonormal(omega, &wn, st.n_basis_len(), sigma)?,
        ),
        BasisKind::Monomial => (
            OrthoBasis::monomial(st.d_basis_len(), sigma),
            OrthoBasis::monomial(st.n_basis_len(), sigma),
        ),
    };

    let n = st.n_theta();
    let pq = p * q;
    let nu = st.row_degrees();
    let blocks = par::map_range(m, |k| {
        let s = C64::new(0.0, omega[k]);
        let (mk, gb) = &local[k];
        let phi_d = basis_d.eval(s);
        let phi_n = basis_n.eval(s);
        let inv_s2 = (s * s).inv();
        let mut a = DMatrix::zeros(2 * pq, n);
        let mut b = DVector::zeros(2 * pq);
        let mut row = vec![C64::new(0.0, 0.0); n];
        for c in 0..q {
            for i in 0..p {
                let wic = w.at(k)[(i, c)];
                let e = i + p * c;
                row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                let mut rhs = inv_s2 * r_prev[(i, c)];
                for a_ in 0..p {
                    let mia = mk[(i, a_)];
                    if mia == C64::new(0.0, 0.0) {
                        continue;
                    }
                    rhs += mia * phi_d[nu[a_]] * gb[(a_, c)];
                    for b_ in 0..p {
                        let slot = st.d_slot(a_, b_);
                        let f = mia * gb[(b_, c)];
                        for t in 0..slot.count {
                            row[slot.offset + t] += f * phi_d[t];
                        }
                    }
                    let slot = st.n_slot(a_, c);
                    for t in 0..slot.count {
                        row[slot.offset + t] -= mia * phi_n[t];
                    }
                }
                if let Some(o) = st.r_offset() {
                    row[o + i * q + c] -= inv_s2;
                }
                for (col, v) in row.iter().enumerate() {
                    a[(2 * e, col)] = wic * v.re;
                    a[(2 * e + 1, col)] = wic * v.im;
                }
                b[2 * e] = -wic * rhs.re;
                b[2 * e + 1] = -wic * rhs.im;
            }
        }
        (a, b)
    });
    let (a, b) = stack(blocks, 2 * pq, n);
    Ok(Regression { a, b, basis_d, basis_n })
}

fn linear_step(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    prev: Option<&LmfdModel>,
    kind: BasisKind,
) -> Result<(LmfdModel, f64)> {
    let reg = sk_regression(st, frf, w, prev, kind)?;
    let sol = lstsq(&reg.a, &reg.b, "SK normal equations").map_err(|e| match e {
        Error::RankDeficient { context, detail } => Error::rank(
            context,
            format!(
                "{detail}; {} D and {} N basis functions, max row degree {}",
                reg.basis_d.len(),
                reg.basis_n.len(),
                st.max_row_degree()
            ),
        ),
        other => other,
    })?;
    let model = LmfdModel::new(st.clone(), reg.basis_d, reg.basis_n, sol.x.as_slice().to_vec())?;
    Ok((model, sol.cond_estimate))
}

/// Levy's estimate: the linearization with `D_prev = I`.
pub fn levy_estimate(st: &LmfdStructure, frf: &FrfDataset, w: &WeightingSpec, kind: BasisKind) -> Result<LmfdModel> {
    linear_step(st, frf, w, None, kind).map(|r| r.0)
}

/// One SK iteration around `prev`.
///
/// Without rigid-body modes this is the plain weighted linearization. With
/// them, the additive block makes `D G - N - R_rb / s^2` inexact, so `D` is
/// taken from `M (D G - N' / s^2)` with `N' = s^2 N + D R_rb` free, and `N`,
/// `R_rb` are then refitted in output-error form with `D` fixed.
pub fn sk_step(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    prev: &LmfdModel,
    kind: BasisKind,
) -> Result<(LmfdModel, f64)> {
    if st.n_rb() == 0 {
        return linear_step(st, frf, w, Some(prev), kind);
    }
    let (basis_d, theta_d, c1) = rigid_denominator(st, frf, w, prev, kind)?;
    let (model, c2) = refit_numerator(st, frf, w, &basis_d, &theta_d, kind)?;
    Ok((model, c1.max(c2)))
}

fn make_basis(kind: BasisKind, omega: &[f64], weights: &[f64], len: usize, sigma: f64) -> Result<OrthoBasis> {
    match kind {
        BasisKind::Orthonormal => OrthoBasis::orthonormal(omega, weights, len, sigma),
        BasisKind::Monomial => Ok(OrthoBasis::monomial(len, sigma)),
    }
}

/// Free `D` coefficients from `min |W M (D G - N' / s^2)|`, `M = D_prev^-1`,
/// with `N'` of the same row degrees as `D`.
fn rigid_denominator(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    prev: &LmfdModel,
    kind: BasisKind,
) -> Result<(OrthoBasis, Vec<f64>, f64)> {
    w.check(frf)?;
    let (p, q) = (st.outputs(), st.inputs());
    if frf.shape() != (p, q) {
        return Err(Error::invalid("structure and FRF shapes differ"));
    }
    let omega = frf.omega();
    let m = frf.n_freq();
    let nu = st.row_degrees();
    let len = st.d_basis_len();
    let inv = inverse_denominators(prev, omega, "SK weighting")?;
    let mut wd = vec![0.0; m];
    let mut wp = vec![0.0; m];
    for k in 0..m {
        let g = &frf.response()[k];
        for i in 0..p {
            let rm: f64 = inv[k].row(i).iter().map(|v| v.norm_sqr()).sum();
            for c in 0..q {
                let cg: f64 = g.column(c).iter().map(|v| v.norm_sqr()).sum();
                let wic = w.at(k)[(i, c)].powi(2) * rm;
                wd[k] += wic * cg;
                wp[k] += wic / omega[k].powi(4);
            }
        }
    }
    let sigma = omega.iter().copied().fold(0.0, f64::max);
    let basis_d = make_basis(kind, omega, &wd, len, sigma)?;
    let basis_p = make_basis(kind, omega, &wp, len, sigma)?;
    let nd = st.d_params();
    let mut offsets = vec![0; p * q];
    let mut n = nd;
    for i in 0..p {
        for c in 0..q {
            offsets[i * q + c] = n;
            n += nu[i] + 1;
        }
    }
    let pq = p * q;
    let blocks = par::map_range(m, |k| {
        let s = C64::new(0.0, omega[k]);
        let g = &frf.response()[k];
        let mk = &inv[k];
        let phi_d = basis_d.eval(s);
        let phi_p = basis_p.eval(s);
        let inv_s2 = (s * s).inv();
        let mut a = DMatrix::zeros(2 * pq, n);
        let mut b = DVector::zeros(2 * pq);
        let mut row = vec![C64::new(0.0, 0.0); n];
        for c in 0..q {
            for i in 0..p {
                let wic = w.at(k)[(i, c)];
                let e = i + p * c;
                row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                let mut rhs = C64::new(0.0, 0.0);
                for a_ in 0..p {
                    let mia = mk[(i, a_)];
                    rhs += mia * phi_d[nu[a_]] * g[(a_, c)];
                    for j in 0..p {
                        let slot = st.d_slot(a_, j);
                        let f = mia * g[(j, c)];
                        for t in 0..slot.count {
                            row[slot.offset + t] += f * phi_d[t];
                        }
                    }
                    let o = offsets[a_ * q + c];
                    let f = mia * inv_s2;
                    for t in 0..=nu[a_] {
                        row[o + t] -= f * phi_p[t];
                    }
                }
                for (col, v) in row.iter().enumerate() {
                    a[(2 * e, col)] = wic * v.re;
                    a[(2 * e + 1, col)] = wic * v.im;
                }
                b[2 * e] = -wic * rhs.re;
                b[2 * e + 1] = -wic * rhs.im;
            }
        }
        (a, b)
    });
    let (a, b) = stack(blocks, 2 * pq, n);
    let sol = lstsq(&a, &b, "rigid-body Levy denominator")?;
    Ok((basis_d, sol.x.as_slice()[..nd].to_vec(), sol.cond_estimate))
}

fn inverse_denominators(model: &LmfdModel, omega: &[f64], context: &str) -> Result<Vec<CMatrix>> {
    par::try_map_range(omega.len(), |k| -> Result<CMatrix> {
        let s = C64::new(0.0, omega[k]);
        match model.d_matrix(s).try_inverse() {
            Some(mk) if mk.iter().all(|v| v.re.is_finite() && v.im.is_finite()) => Ok(mk),
            _ => Err(Error::singular(context, format!("D(s) is singular at s = {s}"))),
        }
    })
}

fn stack(blocks: Vec<(DMatrix<f64>, DVector<f64>)>, rows: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let m = blocks.len();
    let mut a = DMatrix::zeros(rows * m, n);
    let mut b = DVector::zeros(rows * m);
    for (k, (ak, bk)) in blocks.into_iter().enumerate() {
        a.rows_mut(rows * k, rows).copy_from(&ak);
        b.rows_mut(rows * k, rows).copy_from(&bk);
    }
    (a, b)
}

/// Output-error LS for `N` and `R_rb` with the denominator fixed:
/// `min |W (G - R_rb / s^2 - D^-1 N)|`, which is linear once `D` is known.
pub fn refit_numerator(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    basis_d: &OrthoBasis,
    theta_d: &[f64],
    kind: BasisKind,
) -> Result<(LmfdModel, f64)> {
    w.check(frf)?;
    let (p, q) = (st.outputs(), st.inputs());
    let nd = st.d_params();
    if theta_d.len() != nd {
        return Err(Error::invalid(format!(
            "{} denominator parameters, expected {nd}",
            theta_d.len()
        )));
    }
    let omega = frf.omega();
    let m = frf.n_freq();
    let sigma = omega.iter().copied().fold(0.0, f64::max);
    let mut theta = theta_d.to_vec();
    theta.resize(st.n_theta(), 0.0);
    let tmp = LmfdModel::new(
        st.clone(),
        basis_d.clone(),
        OrthoBasis::monomial(st.n_basis_len(), sigma),
        theta.clone(),
    )?;
    let inv = inverse_denominators(&tmp, omega, "numerator refit")?;
    let mut wn = vec![0.0; m];
    for k in 0..m {
        for i in 0..p {
            let rm: f64 = inv[k].row(i).iter().map(|v| v.norm_sqr()).sum();
            for c in 0..q {
                wn[k] += w.at(k)[(i, c)].powi(2) * rm;
            }
        }
    }
    let basis_n = make_basis(kind, omega, &wn, st.n_basis_len(), sigma)?;
    let n = st.n_theta() - nd;
    let pq = p * q;
    let blocks = par::map_range(m, |k| {
        let s = C64::new(0.0, omega[k]);
        let mk = &inv[k];
        let phi_n = basis_n.eval(s);
        let inv_s2 = (s * s).inv();
        let mut a = DMatrix::zeros(2 * pq, n);
        let mut b = DVector::zeros(2 * pq);
        let mut row = vec![C64::new(0.0, 0.0); n];
        for c in 0..q {
            for i in 0..p {
                let wic = w.at(k)[(i, c)];
                let e = i + p * c;
                row.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                for a_ in 0..p {
                    let slot = st.n_slot(a_, c);
                    for t in 0..slot.count {
                        row[slot.offset - nd + t] += mk[(i, a_)] * phi_n[t];
                    }
                }
                if let Some(o) = st.r_offset() {
                    row[o - nd + i * q + c] += inv_s2;
                }
                for (col, v) in row.iter().enumerate() {
                    a[(2 * e, col)] = wic * v.re;
                    a[(2 * e + 1, col)] = wic * v.im;
                }
                let g = frf.response()[k][(i, c)] * wic;
                b[2 * e] = g.re;
                b[2 * e + 1] = g.im;
            }
        }
        (a, b)
    });
    let (a, b) = stack(blocks, 2 * pq, n);
    let sol = lstsq(&a, &b, "numerator refit")?;
    theta[nd..].copy_from_slice(sol.x.as_slice());
    Ok((
        LmfdModel::new(st.clone(), basis_d.clone(), basis_n, theta)?,
        sol.cond_estimate,
    ))
}

const ROUNDOFF: f64 = 1e-18;

/// Sanathanan-Koerner iterations from `initial` (Levy's estimate if
/// `None`). Every iterate's true cost is traced and the cheapest iterate
/// is returned.
pub fn sk_solve(
    st: &LmfdStructure,
    frf: &FrfDataset,
    w: &WeightingSpec,
    initial: Option<&LmfdModel>,
    opts: &SkOptions,
) -> Result<(LmfdModel, SolveReport)> {
    let mut condition = Vec::new();
    let start = match initial {
        Some(m) => {
            if m.structure() != st {
                return Err(Error::invalid("initial model has a different structure"));
            }
            m.clone()
        }
        None => {
            let (m, c) = linear_step(st, frf, w, None, opts.basis)?;
            condition.push(c);
            m
        }
    };
    let entry = |iteration, cost| TraceEntry {
        iteration,
        stage: opts.stage.clone(),
        cost,
        mu: 0.0,
        accepted: true,
    };
    let v0 = cost(&LmfdParam::new(&start), start.theta(), frf, w);
    // cost of the zero model; iterates below `ROUNDOFF * v_ref` are exact
    let v_ref: f64 = (0..frf.n_freq())
        .map(|k| {
            let g = &frf.response()[k];
            g.iter()
                .zip(w.at(k).iter())
                .map(|(a, b)| (a * b).norm_sqr())
                .sum::<f64>()
        })
        .sum();
    let mut trace = vec![entry(0, v0)];
    let mut best = start.clone();
    let mut best_index = 0;
    let mut current = start;
    let mut v_prev = v0;
    let mut oscillation = false;
    let mut warnings = Vec::new();
    let mut termination = if opts.iterations == 0 {
        Termination::NoIterations
    } else {
        Termination::MaxIterations
    };
    let mut iterations = 0;
    for it in 1..=opts.iterations {
        if v_prev <= ROUNDOFF * v_ref {
            termination = Termination::ZeroCost;
            break;
        }
        let (next, c) = match sk_step(st, frf, w, &current, opts.basis) {
            Ok(r) => r,
            Err(e) if e.is_numerical() && it > 1 => {
                warnings.push(format!("SK iteration {it} failed: {e}; keeping the best iterate"));
                log::warn!("{}", warnings.last().unwrap());
                break;
            }
            Err(e) => return Err(e),
        };
        iterations = it;
        condition.push(c);
        let v = cost(&LmfdParam::new(&next), next.theta(), frf, w);
        trace.push(entry(it, v));
        if v > v_prev {
            oscillation = true;
        }
        if v < trace[best_index].cost {
            best = next.clone();
            best_index = trace.len() - 1;
        }
        let settled = v.is_finite() && (v - v_prev).abs() <= 1e-12 * v_prev;
        current = next;
        v_prev = v;
        if v <= ROUNDOFF * v_ref {
            termination = Termination::ZeroCost;
            break;
        }
        if settled {
            termination = Termination::SmallDecrease;
            break;
        }
    }
    if oscillation {
        log::info!("SK cost trace is not monotone");
    }
    Ok((
        best,
        SolveReport {
            trace,
            best_index,
            termination,
            iterations,
            oscillation,
            condition,
            warnings,
        },
    ))
}
