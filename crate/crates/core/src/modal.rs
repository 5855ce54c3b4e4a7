//! Modally damped gray-box models and their frequency responses.
//!
//! A mode `i` contributes `L_s[:, i] R[i, :] / (s^2 + zeta_i s + omega2_i)`.
//! `zeta_i` is the full coefficient of `s` (rad/s); the dimensionless
//! damping ratio is `zeta_i / (2 omega_i)`. Rigid-body modes are the
//! entries with `omega2 = zeta = 0`.

use crate::textio::{matrix_from_rows, TomlWriter};
use crate::tps::TpsSurface;
use crate::{par, CMatrix, Coord, Error, Result, C64};
use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalModel {
    omega2: Vec<f64>,
    zeta: Vec<f64>,
    mode_shapes: DMatrix<f64>,
    input_matrix: DMatrix<f64>,
    sensor_coords: Vec<Coord>,
    n_rb: usize,
}

impl ModalModel {
    /// Validates and canonicalizes a model.
    ///
    /// Modes are sorted by ascending `omega2` (ties by `zeta`, then original
    /// order) and every mode-shape column is signed so that its first
    /// largest-magnitude entry is positive, with the sign moved into `R`.
    pub fn new(
        omega2: Vec<f64>,
        zeta: Vec<f64>,
        mode_shapes: DMatrix<f64>,
        input_matrix: DMatrix<f64>,
        sensor_coords: Vec<Coord>,
    ) -> Result<Self> {
        let n_m = omega2.len();
        if n_m == 0 {
            return Err(Error::invalid("a modal model needs at least one mode"));
        }
        if zeta.len() != n_m || mode_shapes.ncols() != n_m || input_matrix.nrows() != n_m {
            return Err(Error::invalid(format!(
                "inconsistent mode counts: omega2 {n_m}, zeta {}, L_s columns {}, R rows {}",
                zeta.len(),
                mode_shapes.ncols(),
                input_matrix.nrows()
            )));
        }
        if mode_shapes.nrows() == 0 || input_matrix.ncols() == 0 {
            return Err(Error::invalid("model needs at least one output and input"));
        }
        if sensor_coords.len() != mode_shapes.nrows() {
            return Err(Error::invalid(format!(
                "{} sensor coordinates for {} outputs",
                sensor_coords.len(),
                mode_shapes.nrows()
            )));
        }
        let all_finite = omega2.iter().chain(&zeta).all(|v| v.is_finite())
            && mode_shapes.iter().all(|v| v.is_finite())
            && input_matrix.iter().all(|v| v.is_finite())
            && sensor_coords.iter().flatten().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("model contains non-finite values"));
        }
        let mut n_rb = 0;
        for i in 0..n_m {
            if omega2[i] < 0.0 || zeta[i] < 0.0 {
                return Err(Error::invalid(format!(
                    "mode {i}: omega2 = {}, zeta = {} must be nonnegative",
                    omega2[i], zeta[i]
                )));
            }
            if omega2[i] == 0.0 {
                if zeta[i] != 0.0 {
                    return Err(Error::invalid(format!(
                        "mode {i}: zero stiffness with nonzero damping is not a rigid-body mode"
                    )));
                }
                n_rb += 1;
            } else if mode_shapes.column(i).iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("flexible mode {i} has a zero mode shape")));
            }
        }
        let mut order: Vec<usize> = (0..n_m).collect();
        order.sort_by(|&a, &b| omega2[a].total_cmp(&omega2[b]).then(zeta[a].total_cmp(&zeta[b])));
        let omega2: Vec<f64> = order.iter().map(|&i| omega2[i]).collect();
        let zeta: Vec<f64> = order.iter().map(|&i| zeta[i]).collect();
        let mut l = mode_shapes.select_columns(order.iter());
        let mut r = input_matrix.select_rows(order.iter());
        for i in 0..n_m {
            if dominant_entry(l.column(i).iter()) < 0.0 {
                l.column_mut(i).neg_mut();
                r.row_mut(i).neg_mut();
            }
        }
        Ok(Self {
            omega2,
            zeta,
            mode_shapes: l,
            input_matrix: r,
            sensor_coords,
            n_rb,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.omega2.len()
    }

    pub fn n_rb(&self) -> usize {
        self.n_rb
    }

    pub fn n_outputs(&self) -> usize {
        self.mode_shapes.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.input_matrix.ncols()
    }

    pub fn omega2(&self) -> &[f64] {
        &self.omega2
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    /// Sampled mode shapes `L_s` (outputs x modes).
    pub fn mode_shapes(&self) -> &DMatrix<f64> {
        &self.mode_shapes
    }

    /// Modal input matrix `R` (modes x inputs).
    pub fn input_matrix(&self) -> &DMatrix<f64> {
        &self.input_matrix
    }

    pub fn sensor_coords(&self) -> &[Coord] {
        &self.sensor_coords
    }

    /// Undamped natural frequencies in rad/s.
    pub fn natural_frequencies(&self) -> Vec<f64> {
        self.omega2.iter().map(|w| w.sqrt()).collect()
    }

    /// Dimensionless damping ratios `zeta / (2 omega)`; zero for rigid modes.
    pub fn damping_ratios(&self) -> Vec<f64> {
        self.omega2
            .iter()
            .zip(&self.zeta)
            .map(|(&w2, &z)| if w2 > 0.0 { z / (2.0 * w2.sqrt()) } else { 0.0 })
            .collect()
    }

    /// Residue matrix `L_s[:, i] R[i, :]`.
    pub fn residue(&self, i: usize) -> DMatrix<f64> {
        self.mode_shapes.column(i) * self.input_matrix.row(i)
    }

    /// Response at a complex frequency `s`.
    pub fn response(&self, s: C64) -> Result<CMatrix> {
        modal_response(&self.omega2, &self.zeta, &self.mode_shapes, &self.input_matrix, s)
    }

    /// Frequency response on `omega` (rad/s), one `p x q` matrix per point.
    pub fn frf(&self, omega: &[f64]) -> Result<Vec<CMatrix>> {
        frf_eval(self, omega)
    }
}

fn dominant_entry<'a>(it: impl Iterator<Item = &'a f64>) -> f64 {
    let mut best = 0.0f64;
    for &v in it {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best
}

/// `sum_i L[:, i] R[i, :] / (s^2 + zeta_i s + omega2_i)`.
pub(crate) fn modal_response(
    omega2: &[f64],
    zeta: &[f64],
    l: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: C64,
) -> Result<CMatrix> {
    let (p, q) = (l.nrows(), r.ncols());
    let mut g = CMatrix::zeros(p, q);
    for i in 0..omega2.len() {
        let d = s * s + s * zeta[i] + omega2[i];
        if d == C64::new(0.0, 0.0) {
            return Err(Error::singular(
                "modal response",
                format!("mode {i} has a pole at s = {s}"),
            ));
        }
        let inv = d.inv();
        for k in 0..q {
            let rk = r[(i, k)];
            if rk == 0.0 {
                continue;
            }
            let c = inv * rk;
            for j in 0..p {
                g[(j, k)] += c * l[(j, i)];
            }
        }
    }
    Ok(g)
}

/// Evaluates the model on a frequency grid. Points are independent and
/// evaluated in parallel; the result does not depend on the thread count.
pub fn frf_eval(model: &ModalModel, omega: &[f64]) -> Result<Vec<CMatrix>> {
    par::try_map_range(omega.len(), |k| model.response(C64::new(0.0, omega[k])))
}

/// Temporal modal core plus one continuous mode-shape surface per mode.
#[derive(Debug, Clone)]
pub struct PositionDependentModel {
    omega2: Vec<f64>,
    zeta: Vec<f64>,
    input_matrix: DMatrix<f64>,
    surfaces: Vec<TpsSurface>,
    domain: [Coord; 2],
}

impl PositionDependentModel {
    /// Combines a modal model with its interpolated mode shapes. The
    /// domain defaults to the bounding box of the sensor coordinates.
    pub fn new(model: &ModalModel, surfaces: Vec<TpsSurface>) -> Result<Self> {
        if surfaces.len() != model.n_modes() {
            return Err(Error::invalid(format!(
                "{} surfaces for {} modes",
                surfaces.len(),
                model.n_modes()
            )));
        }
        let domain = bounding_box(model.sensor_coords());
        Ok(Self {
            omega2: model.omega2.clone(),
            zeta: model.zeta.clone(),
            input_matrix: model.input_matrix.clone(),
            surfaces,
            domain,
        })
    }

    pub fn with_domain(mut self, domain: [Coord; 2]) -> Self {
        self.domain = domain;
        self
    }

    pub fn domain(&self) -> [Coord; 2] {
        self.domain
    }

    pub fn surfaces(&self) -> &[TpsSurface] {
        &self.surfaces
    }

    pub fn n_modes(&self) -> usize {
        self.omega2.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.input_matrix.ncols()
    }

    pub fn in_domain(&self, p: Coord) -> bool {
        let [lo, hi] = self.domain;
        p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
    }

    /// Continuous mode-shape row `[L_1(p), ..., L_nm(p)]`.
    pub fn shape_row(&self, p: Coord) -> Vec<f64> {
        self.surfaces.iter().map(|s| s.eval(p)).collect()
    }

    /// Response from all inputs to the deflection at `p` (1 x n_u per
    /// frequency). Points outside the domain are evaluated with a warning.
    pub fn eval_at_position(&self, p: Coord, omega: &[f64]) -> Result<Vec<CMatrix>> {
        if !self.in_domain(p) {
            log::warn!(
                "extrapolating mode shapes outside the model domain at ({}, {})",
                p[0],
                p[1]
            );
        }
        let row = DMatrix::from_row_slice(1, self.n_modes(), &self.shape_row(p));
        par::try_map_range(omega.len(), |k| {
            modal_response(
                &self.omega2,
                &self.zeta,
                &row,
                &self.input_matrix,
                C64::new(0.0, omega[k]),
            )
        })
    }
}

/// Free-function form of [`PositionDependentModel::eval_at_position`].
pub fn eval_at_position(pdm: &PositionDependentModel, p: Coord, omega: &[f64]) -> Result<Vec<CMatrix>> {
    pdm.eval_at_position(p, omega)
}

pub fn bounding_box(points: &[Coord]) -> [Coord; 2] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    [lo, hi]
}

/// Affine map from stage position to the surface coordinate seen by each
/// output: `rho_y = offset_y + rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleMap {
    offsets: Vec<Coord>,
}

impl ScheduleMap {
    pub fn new(offsets: Vec<Coord>) -> Self {
        Self { offsets }
    }

    pub fn offsets(&self) -> &[Coord] {
        &self.offsets
    }

    /// Per-output coordinate trajectories for a stage trajectory.
    pub fn apply(&self, rho: &[Coord]) -> Vec<Vec<Coord>> {
        self.offsets
            .iter()
            .map(|o| rho.iter().map(|r| [o[0] + r[0], o[1] + r[1]]).collect())
            .collect()
    }
}

pub fn apply_schedule(map: &ScheduleMap, rho: &[Coord]) -> Vec<Vec<Coord>> {
    map.apply(rho)
}

/// Contents of a model file: the modal model, optionally with a domain and
/// interpolated mode-shape surfaces.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: ModalModel,
    pub domain: Option<[Coord; 2]>,
    pub surfaces: Vec<TpsSurface>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    n_m: usize,
    n_rb: usize,
    omega2: Vec<f64>,
    zeta: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    sensor_coords: Vec<Coord>,
    #[serde(rename = "L_s")]
    l_s: Vec<Vec<f64>>,
    domain: Option<[Coord; 2]>,
    #[serde(default)]
    surfaces: Vec<SurfaceDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceDoc {
    lambda: f64,
    origin: Coord,
    scale: f64,
    affine: [f64; 3],
    kernel: Vec<f64>,
    centers: Vec<Coord>,
    residuals: Vec<f64>,
    loocv_error: Option<f64>,
}

impl ModelFile {
    pub fn new(model: ModalModel) -> Self {
        Self {
            model,
            domain: None,
            surfaces: Vec::new(),
        }
    }

    /// Canonical text form: `n_m, n_rb, omega2, zeta, R, sensor_coords,
    /// L_s`, then the optional domain and surface blocks.
    pub fn to_text(&self) -> Result<String> {
        let m = &self.model;
        let mut w = TomlWriter::new();
        w.comment("modal model");
        w.int("n_m", m.n_modes() as i64);
        w.int("n_rb", m.n_rb() as i64);
        w.floats("omega2", m.omega2())?;
        w.floats("zeta", m.zeta())?;
        w.matrix("R", m.input_matrix())?;
        w.rows("sensor_coords", m.sensor_coords())?;
        w.matrix("L_s", m.mode_shapes())?;
        if let Some(d) = &self.domain {
            w.rows("domain", d)?;
        }
        for s in &self.surfaces {
            w.table_array("surfaces");
            w.float("lambda", s.lambda())?;
            w.floats("origin", &s.origin())?;
            w.float("scale", s.scale())?;
            w.floats("affine", &s.affine_normalized())?;
            w.floats("kernel", s.kernel())?;
            w.rows("centers", s.centers())?;
            w.floats("residuals", s.residuals())?;
            if let Some(e) = s.loocv_error() {
                w.float("loocv_error", e)?;
            }
        }
        Ok(w.finish())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: ModelDoc = toml::from_str(text)?;
        let n_out = doc.l_s.len();
        let n_in = doc.r.first().map_or(0, |r| r.len());
        let l = matrix_from_rows("L_s", &doc.l_s, n_out, doc.n_m)?;
        let r = matrix_from_rows("R", &doc.r, doc.n_m, n_in)?;
        let model = ModalModel::new(doc.omega2, doc.zeta, l, r, doc.sensor_coords)?;
        if model.n_modes() != doc.n_m || model.n_rb() != doc.n_rb {
            return Err(Error::Parse(format!(
                "header says n_m = {}, n_rb = {}, data has {} modes with {} rigid",
                doc.n_m,
                doc.n_rb,
                model.n_modes(),
                model.n_rb()
            )));
        }
        let surfaces = doc
            .surfaces
            .into_iter()
            .map(|s| {
                TpsSurface::from_parts(
                    s.centers,
                    s.origin,
                    s.scale,
                    s.affine,
                    s.kernel,
                    s.lambda,
                    s.residuals,
                    s.loocv_error,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if !surfaces.is_empty() && surfaces.len() != model.n_modes() {
            return Err(Error::Parse(format!(
                "{} surfaces for {} modes",
                surfaces.len(),
                model.n_modes()
            )));
        }
        Ok(Self {
            model,
            domain: doc.domain,
            surfaces,
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::textio::write_file(path, &self.to_text()?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Position-dependent model; requires surfaces.
    pub fn position_dependent(&self) -> Result<PositionDependentModel> {
        let pdm = PositionDependentModel::new(&self.model, self.surfaces.clone())?;
        Ok(match self.domain {
            Some(d) => pdm.with_domain(d),
            None => pdm,
        })
    }
}
