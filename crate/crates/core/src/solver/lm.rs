use super::cost::entry_cost;
use super::{cost, Parametrization, SolveReport, Termination, TraceEntry, WeightingSpec};
use crate::frf::FrfDataset;
use crate::{par, Error, Result, C64};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    /// Label used in the trace.
    pub stage: String,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-10,
            stage: "lm".into(),
        }
    }
}

/// Frequencies per normal-equation block. Blocks are summed in a fixed
/// order, so the result does not depend on the thread count.
const CHUNK: usize = 8;

/// Gauss-Newton normal equations `J^T J`, `J^T e` and the cost `e^T e`
/// for `e = W . vec(G - G_model)`, `J = de/dtheta`.
pub fn normal_equations<P: Parametrization + ?Sized>(
    param: &P,
    theta: &[f64],
    frf: &FrfDataset,
    w: &WeightingSpec,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    w.check(frf)?;
    let n = param.n_params();
    let (p, q) = param.shape();
    let pq = p * q;
    let m = frf.n_freq();
    let chunks = m.div_ceil(CHUNK);
    let parts = par::try_map_range(chunks, |c| -> Result<_> {
        let ks = c * CHUNK..((c + 1) * CHUNK).min(m);
        let rows = 2 * pq * ks.len();
        let mut j = DMatrix::zeros(rows, n);
        let mut e = DVector::zeros(rows);
        let mut v = 0.0;
        for (b, k) in ks.enumerate() {
            let (g, jac) = param.jacobian(theta, C64::new(0.0, frf.omega()[k]))?;
            let wk = w.at(k);
            let data = &frf.response()[k];
            v += entry_cost(data, &g, wk);
            for idx in 0..pq {
                let wi = wk[idx];
                let r = 2 * (b * pq + idx);
                let res = (data[idx] - g[idx]) * wi;
                e[r] = res.re;
                e[r + 1] = res.im;
                if wi == 0.0 {
                    continue;
                }
                for col in 0..n {
                    let d = jac[(idx, col)];
                    j[(r, col)] = -wi * d.re;
                    j[(r + 1, col)] = -wi * d.im;
                }
            }
        }
        Ok((j.transpose() * &j, j.tr_mul(&e), v))
    })?;
    let mut a = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut v = 0.0;
    for (pa, pg, pv) in parts {
        a += pa;
        g += pg;
        v += pv;
    }
    Ok((a, g, v))
}

/// Levenberg-Marquardt on the weighted least-squares cost, starting from
/// `theta0`. Only strictly decreasing steps are accepted, so the accepted
/// part of the trace is monotone.
pub fn lm_refine<P: Parametrization + ?Sized>(
    param: &P,
    theta0: &[f64],
    frf: &FrfDataset,
    w: &WeightingSpec,
    opts: &LmOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    if theta0.len() != param.n_params() {
        return Err(Error::invalid("initial parameter vector has the wrong length"));
    }
    let v0 = cost(param, theta0, frf, w);
    if !v0.is_finite() {
        return Err(Error::invalid("initial estimate has infinite cost"));
    }
    let mut theta = theta0.to_vec();
    let mut v = v0;
    let mut trace = vec![TraceEntry {
        iteration: 0,
        stage: opts.stage.clone(),
        cost: v0,
        mu: 0.0,
        accepted: true,
    }];
    let mut best_index = 0;
    let mut warnings = Vec::new();
    let mut termination = if opts.max_iter == 0 {
        Termination::NoIterations
    } else {
        Termination::MaxIterations
    };
    let mut mu = 0.0;
    let mut mu0 = 0.0;
    let mut accepted_steps = 0;
    let mut attempt = 0;
    'outer: while accepted_steps < opts.max_iter {
        if v == 0.0 {
            termination = Termination::ZeroCost;
            break;
        }
        let (a, g, _) = normal_equations(param, &theta, frf, w)?;
        let n = a.nrows();
        let d: Vec<f64> = (0..n)
            .map(|i| {
                let s = a[(i, i)].sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let a_s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (d[i] * d[j]));
        let g_s = DVector::from_fn(n, |i, _| g[i] / d[i]);
        if g_s.amax() <= 1e-12 * v.sqrt() {
            termination = Termination::ZeroGradient;
            break;
        }
        if mu0 == 0.0 {
            mu0 = 1e-6 * (0..n).map(|i| a_s[(i, i)]).fold(0.0, f64::max);
            mu = mu0;
        }
        loop {
            attempt += 1;
            let mut lhs = a_s.clone();
            for i in 0..n {
                lhs[(i, i)] += mu;
            }
            let trial = lhs.cholesky().map(|c| c.solve(&(-&g_s))).map(|step| {
                theta
                    .iter()
                    .zip(step.iter().zip(&d))
                    .map(|(t, (s, d))| t + s / d)
                    .collect::<Vec<f64>>()
            });
            let (cand, vc) = match trial {
                Some(c) => {
                    let vc = cost(param, &c, frf, w);
                    (Some(c), vc)
                }
                None => (None, f64::INFINITY),
            };
            let ok = vc < v;
            trace.push(TraceEntry {
                iteration: attempt,
                stage: opts.stage.clone(),
                cost: vc,
                mu,
                accepted: ok,
            });
            if ok {
                let rel = (v - vc) / v;
                theta = cand.expect("accepted step has parameters");
                v = vc;
                best_index = trace.len() - 1;
                accepted_steps += 1;
                mu /= 3.0;
                if rel < opts.rel_tol {
                    termination = Termination::SmallDecrease;
                    break 'outer;
                }
                if accepted_steps >= opts.max_iter {
                    break 'outer;
                }
                continue 'outer;
            }
            mu *= 4.0;
            if mu > 1e12 * mu0 {
                termination = Termination::DampingLimit;
                warnings.push(format!(
                    "{}: no descent direction found at mu = {mu:.3e}; treating as converged",
                    opts.stage
                ));
                log::warn!("{}", warnings.last().unwrap());
                break 'outer;
            }
        }
    }
    Ok((
        theta,
        SolveReport {
            trace,
            best_index,
            termination,
            iterations: accepted_steps,
            oscillation: false,
            condition: Vec::new(),
            warnings,
        },
    ))
}
