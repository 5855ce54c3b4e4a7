use super::WeightingSpec;
use crate::frf::FrfDataset;
use crate::linalg::lstsq;
use crate::modal::ModalModel;
use crate::{par, Coord, Error, Result, C64};
use nalgebra::{DMatrix, DVector};

/// Mode-shape rows fitted for additional outputs.
#[derive(Debug, Clone)]
pub struct Extension {
    /// `n_new x n_m`.
    pub rows: DMatrix<f64>,
    /// Weighted LS cost per new output.
    pub residual: Vec<f64>,
}

/// Fits `L_s` rows for the outputs of `frf` with all temporal parameters
/// and `R` of `model` held fixed: one linear LS problem per output.
pub fn extend_outputs(model: &ModalModel, frf: &FrfDataset, w: &WeightingSpec) -> Result<Extension> {
    w.check(frf)?;
    let (n_new, q) = frf.shape();
    if q != model.n_inputs() {
        return Err(Error::invalid(format!(
            "FRF has {q} inputs, the model {}",
            model.n_inputs()
        )));
    }
    let n_m = model.n_modes();
    let m = frf.n_freq();
    let inv_d: Vec<Vec<C64>> = frf
        .omega()
        .iter()
        .map(|&om| {
            let s = C64::new(0.0, om);
            (0..n_m)
                .map(|i| (s * s + s * model.zeta()[i] + model.omega2()[i]).inv())
                .collect()
        })
        .collect();
    if inv_d.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::singular("output extension", "model pole on the frequency grid"));
    }
    let r = model.input_matrix();
    let fits = par::try_map_range(n_new, |j| -> Result<(Vec<f64>, f64)> {
        let mut a = DMatrix::zeros(2 * m * q, n_m);
        let mut b = DVector::zeros(2 * m * q);
        for k in 0..m {
            for c in 0..q {
                let wjc = w.at(k)[(j, c)];
                let row = 2 * (k * q + c);
                for i in 0..n_m {
                    let v = inv_d[k][i] * (wjc * r[(i, c)]);
                    a[(row, i)] = v.re;
                    a[(row + 1, i)] = v.im;
                }
                let g = frf.response()[k][(j, c)] * wjc;
                b[row] = g.re;
                b[row + 1] = g.im;
            }
        }
        let sol = lstsq(&a, &b, &format!("mode-shape row for output {j}"))?;
        let res = (&a * &sol.x - &b).norm_squared();
        Ok((sol.x.as_slice().to_vec(), res))
    })?;
    let rows = DMatrix::from_fn(n_new, n_m, |j, i| fits[j].0[i]);
    Ok(Extension {
        rows,
        residual: fits.iter().map(|f| f.1).collect(),
    })
}

/// Model whose outputs are those of `model` followed by `rows`.
pub fn append_outputs(model: &ModalModel, rows: &DMatrix<f64>, coords: &[Coord]) -> Result<ModalModel> {
    if rows.ncols() != model.n_modes() || rows.nrows() != coords.len() {
        return Err(Error::invalid("extension rows do not match the model"));
    }
    let p = model.n_outputs();
    let l = DMatrix::from_fn(p + rows.nrows(), model.n_modes(), |j, i| {
        if j < p {
            model.mode_shapes()[(j, i)]
        } else {
            rows[(j - p, i)]
        }
    });
    let mut all = model.sensor_coords().to_vec();
    all.extend_from_slice(coords);
    ModalModel::new(
        model.omega2().to_vec(),
        model.zeta().to_vec(),
        l,
        model.input_matrix().clone(),
        all,
    )
}
