use super::{Parametrization, WeightingSpec};
use crate::frf::FrfDataset;
use crate::{par, CMatrix, Result, C64};

/// `sum_k |W(k) . vec(G(s_k) - G_model(s_k))|^2`.
///
/// A model that cannot be evaluated somewhere on the grid has infinite cost;
/// use [`try_cost`] to get the reason.
pub fn cost<P: Parametrization + ?Sized>(param: &P, theta: &[f64], frf: &FrfDataset, w: &WeightingSpec) -> f64 {
    match try_cost(param, theta, frf, w) {
        Ok(v) => v,
        Err(e) => {
            log::debug!("cost evaluation failed: {e}");
            f64::INFINITY
        }
    }
}

pub fn try_cost<P: Parametrization + ?Sized>(
    param: &P,
    theta: &[f64],
    frf: &FrfDataset,
    w: &WeightingSpec,
) -> Result<f64> {
    w.check(frf)?;
    let parts = par::try_map_range(frf.n_freq(), |k| -> Result<f64> {
        let g = param.response(theta, C64::new(0.0, frf.omega()[k]))?;
        Ok(entry_cost(&frf.response()[k], &g, w.at(k)))
    })?;
    Ok(parts.iter().sum())
}

/// Cost of already evaluated model responses.
pub fn cost_of_responses(frf: &FrfDataset, w: &WeightingSpec, model: &[CMatrix]) -> f64 {
    frf.response()
        .iter()
        .zip(model)
        .zip(w.weights())
        .map(|((g, m), w)| entry_cost(g, m, w))
        .sum()
}

pub(crate) fn entry_cost(g: &CMatrix, m: &CMatrix, w: &nalgebra::DMatrix<f64>) -> f64 {
    g.iter()
        .zip(m.iter())
        .zip(w.iter())
        .map(|((a, b), w)| (w * (a - b)).norm_sqr())
        .sum()
}
