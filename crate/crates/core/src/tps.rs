//! Smoothed thin-plate-spline interpolation of sampled mode shapes.
//!
//! A surface is `t0 + x tx + y ty + sum_j t_j r_j^2 ln r_j` with the side
//! constraints `sum t_j = sum t_j x_j = sum t_j y_j = 0`. Coordinates are
//! mapped to the unit bounding box of the centers before the kernel is
//! evaluated, and the smoothing parameter is defined in those units.

use crate::modal::bounding_box;
use crate::{par, Coord, Error, Result};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;

/// Smoothing parameters tried by default: 25 points log-spaced in
/// `[1e-8, 1e2]` (normalized units).
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-8, 1e2, 25)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Normalization {
    origin: Coord,
    scale: f64,
}

impl Normalization {
    fn of(points: &[Coord]) -> Result<Self> {
        let [lo, hi] = bounding_box(points);
        let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("thin-plate spline centers are coincident"));
        }
        Ok(Self { origin: lo, scale })
    }

    fn apply(&self, p: Coord) -> Coord {
        [
            (p[0] - self.origin[0]) / self.scale,
            (p[1] - self.origin[1]) / self.scale,
        ]
    }
}

/// `r^2 ln r`, with the limit 0 at `r = 0`.
fn kernel_r2(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsSurface {
    centers: Vec<Coord>,
    norm: Normalization,
    affine: [f64; 3],
    kernel: Vec<f64>,
    lambda: f64,
    residuals: Vec<f64>,
    loocv_error: Option<f64>,
    // Cached normalized centers.
    unit_centers: Vec<Coord>,
}

impl TpsSurface {
    /// Rebuilds a surface from stored coefficients (normalized units).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        centers: Vec<Coord>,
        origin: Coord,
        scale: f64,
        affine: [f64; 3],
        kernel: Vec<f64>,
        lambda: f64,
        residuals: Vec<f64>,
        loocv_error: Option<f64>,
    ) -> Result<Self> {
        if kernel.len() != centers.len() || residuals.len() != centers.len() {
            return Err(Error::Parse(format!(
                "surface with {} centers has {} kernel weights and {} residuals",
                centers.len(),
                kernel.len(),
                residuals.len()
            )));
        }
        if !(scale > 0.0) || lambda < 0.0 {
            return Err(Error::Parse(
                "surface scale must be positive and lambda nonnegative".into(),
            ));
        }
        let norm = Normalization { origin, scale };
        let unit_centers = centers.iter().map(|&c| norm.apply(c)).collect();
        Ok(Self {
            centers,
            norm,
            affine,
            kernel,
            lambda,
            residuals,
            loocv_error,
            unit_centers,
        })
    }

    pub fn centers(&self) -> &[Coord] {
        &self.centers
    }

    pub fn origin(&self) -> Coord {
        self.norm.origin
    }

    pub fn scale(&self) -> f64 {
        self.norm.scale
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Kernel weights `t_j` (normalized units).
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// `(t0, tx, ty)` with respect to normalized coordinates.
    pub fn affine_normalized(&self) -> [f64; 3] {
        self.affine
    }

    /// Affine part `(t0, tx, ty)` expressed in physical coordinates.
    ///
    /// Because of the side constraints, the kernel sum carries no affine
    /// component, so this is exactly the plane part of the surface.
    pub fn affine_physical(&self) -> [f64; 3] {
        let [a, b, c] = self.affine;
        let h = self.norm.scale;
        let [x0, y0] = self.norm.origin;
        [a - (b * x0 + c * y0) / h, b / h, c / h]
    }

    /// Data minus surface at each center.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn loocv_error(&self) -> Option<f64> {
        self.loocv_error
    }

    pub fn eval(&self, p: Coord) -> f64 {
        let u = self.norm.apply(p);
        let mut v = self.affine[0] + u[0] * self.affine[1] + u[1] * self.affine[2];
        for (c, t) in self.unit_centers.iter().zip(&self.kernel) {
            let r2 = (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2);
            v += t * kernel_r2(r2);
        }
        v
    }

    /// Gradient with respect to physical coordinates.
    pub fn gradient(&self, p: Coord) -> [f64; 2] {
        let u = self.norm.apply(p);
        let mut g = [self.affine[1], self.affine[2]];
        for (c, t) in self.unit_centers.iter().zip(&self.kernel) {
            let (dx, dy) = (u[0] - c[0], u[1] - c[1]);
            let r2 = dx * dx + dy * dy;
            if r2 > 0.0 {
                // d/du (r^2 ln r) = du (2 ln r + 1)
                let f = r2.ln() + 1.0;
                g[0] += t * dx * f;
                g[1] += t * dy * f;
            }
        }
        [g[0] / self.norm.scale, g[1] / self.norm.scale]
    }
}

pub fn eval_tps(surface: &TpsSurface, p: Coord) -> f64 {
    surface.eval(p)
}

fn validate(points: &[Coord], values: &[f64], lambda: f64) -> Result<()> {
    if points.len() != values.len() {
        return Err(Error::invalid(format!(
            "{} points for {} values",
            points.len(),
            values.len()
        )));
    }
    if points.len() < 3 {
        return Err(Error::invalid("thin-plate spline needs at least 3 points"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "smoothing parameter {lambda} must be finite and >= 0"
        )));
    }
    if !values.iter().chain(points.iter().flatten()).all(|v| v.is_finite()) {
        return Err(Error::invalid("thin-plate spline data must be finite"));
    }
    Ok(())
}

/// Fits a smoothed thin-plate spline through `values` at `points`.
///
/// Solves `[[X0, XG + lambda I], [0, X0^T]] t = [z; 0]` for
/// `t = (t0, tx, ty, t_1..t_n)`.
pub fn fit_tps(points: &[Coord], values: &[f64], lambda: f64) -> Result<TpsSurface> {
    validate(points, values, lambda)?;
    let norm = Normalization::of(points)?;
    fit_with(points, values, lambda, norm)
}

fn fit_with(points: &[Coord], values: &[f64], lambda: f64, norm: Normalization) -> Result<TpsSurface> {
    let n = points.len();
    let unit: Vec<Coord> = points.iter().map(|&p| norm.apply(p)).collect();
    let x0 = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => unit[i][0],
        _ => unit[i][1],
    });
    let sv = x0.clone().singular_values();
    let smax = sv.max();
    if !(sv.min() > 1e-10 * smax) {
        return Err(Error::invalid("thin-plate spline centers are collinear"));
    }
    let mut x = DMatrix::zeros(n + 3, n + 3);
    x.view_mut((0, 0), (n, 3)).copy_from(&x0);
    for i in 0..n {
        for j in 0..n {
            let r2 = (unit[i][0] - unit[j][0]).powi(2) + (unit[i][1] - unit[j][1]).powi(2);
            x[(i, 3 + j)] = kernel_r2(r2);
        }
        x[(i, 3 + i)] += lambda;
    }
    x.view_mut((n, 3), (3, n)).copy_from(&x0.transpose());
    let mut rhs = DVector::zeros(n + 3);
    rhs.rows_mut(0, n).copy_from_slice(values);
    let lu = x.clone().lu();
    let theta = lu
        .solve(&rhs)
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .ok_or_else(|| {
            Error::singular(
                "thin-plate system",
                format!("condition number {:.3e}", crate::linalg::cond(&x)),
            )
        })?;
    let affine = [theta[0], theta[1], theta[2]];
    let kernel: Vec<f64> = theta.rows(3, n).iter().copied().collect();
    let mut s = TpsSurface {
        centers: points.to_vec(),
        norm,
        affine,
        kernel,
        lambda,
        residuals: Vec::new(),
        loocv_error: None,
        unit_centers: unit,
    };
    s.residuals = points.iter().zip(values).map(|(&p, &z)| z - s.eval(p)).collect();
    Ok(s)
}

/// One point of the cross-validation curve; `error` is `None` when some
/// leave-one-out subset was degenerate at this smoothing level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoocvPoint {
    pub lambda: f64,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvResult {
    pub lambda: f64,
    pub error: f64,
    pub curve: Vec<LoocvPoint>,
}

/// Leave-one-out error `(1/n) sum_k (z_k - W^(-k)(p_k))^2` for one lambda,
/// by explicit refits without point `k`.
fn loocv_error(points: &[Coord], values: &[f64], lambda: f64, norm: Normalization) -> Option<f64> {
    let n = points.len();
    let mut acc = 0.0;
    let mut pts = Vec::with_capacity(n - 1);
    let mut vals = Vec::with_capacity(n - 1);
    for k in 0..n {
        pts.clear();
        vals.clear();
        for j in (0..n).filter(|&j| j != k) {
            pts.push(points[j]);
            vals.push(values[j]);
        }
        let s = fit_with(&pts, &vals, lambda, norm).ok()?;
        acc += (values[k] - s.eval(points[k])).powi(2);
    }
    Some(acc / n as f64)
}

/// Picks the smoothing parameter with the lowest leave-one-out error; ties
/// go to the larger lambda.
pub fn loocv_select(points: &[Coord], values: &[f64], lambda_grid: &[f64]) -> Result<LoocvResult> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("empty smoothing grid"));
    }
    for &l in lambda_grid {
        validate(points, values, l)?;
    }
    if points.len() < 5 {
        return Err(Error::invalid("cross-validation needs at least 5 points"));
    }
    let norm = Normalization::of(points)?;
    let errors = par::map_slice(lambda_grid, |&l| loocv_error(points, values, l, norm));
    let curve: Vec<LoocvPoint> = lambda_grid
        .iter()
        .zip(&errors)
        .map(|(&lambda, &error)| LoocvPoint { lambda, error })
        .collect();
    let scale = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    let best = curve.iter().filter_map(|c| c.error).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::invalid(
            "every leave-one-out subset is degenerate for all smoothing values",
        ));
    }
    let tol = best * 1e-9 + 1e-14 * scale;
    let chosen = curve
        .iter()
        .filter(|c| c.error.is_some_and(|e| e <= best + tol))
        .max_by(|a, b| a.lambda.total_cmp(&b.lambda))
        .copied()
        .expect("at least one valid point");
    Ok(LoocvResult {
        lambda: chosen.lambda,
        error: chosen.error.unwrap_or(best),
        curve,
    })
}

/// Interpolates every column of `mode_shapes` independently, each with its
/// own cross-validated smoothing parameter.
pub fn interpolate_mode_shapes(
    mode_shapes: &DMatrix<f64>,
    coords: &[Coord],
    lambda_grid: &[f64],
) -> Result<Vec<TpsSurface>> {
    if mode_shapes.nrows() != coords.len() {
        return Err(Error::invalid(format!(
            "{} mode-shape rows for {} coordinates",
            mode_shapes.nrows(),
            coords.len()
        )));
    }
    par::try_map_range(mode_shapes.ncols(), |i| {
        let z: Vec<f64> = mode_shapes.column(i).iter().copied().collect();
        let sel = loocv_select(coords, &z, lambda_grid)?;
        let mut s = fit_tps(coords, &z, sel.lambda)?;
        s.loocv_error = Some(sel.error);
        Ok(s)
    })
}

/// Convex hull (counter-clockwise, no repeated endpoint).
pub fn convex_hull(points: &[Coord]) -> Vec<Coord> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Coord, a: Coord, b: Coord| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<Coord> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Coord>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn inside_hull(hull: &[Coord], p: Coord) -> bool {
    if hull.len() < 3 {
        return false;
    }
    let scale = hull.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-12 * scale * scale
    })
}

/// Columnar `x y z inside_hull` export of a surface on an `n x n` grid.
/// Points outside the convex hull of the centers are extrapolated and
/// flagged with 0.
pub fn export_grid(surface: &TpsSurface, bounds: [Coord; 2], n: usize, label: &str) -> String {
    let hull = convex_hull(surface.centers());
    let mut out = String::new();
    let _ = writeln!(out, "# surface = {label}");
    let _ = writeln!(out, "# lambda = {}", crate::textio::fmt_f64(surface.lambda()));
    let _ = writeln!(out, "x y z inside_hull");
    let [lo, hi] = bounds;
    let steps = n.max(2) - 1;
    for i in 0..=steps {
        let y = lo[1] + (hi[1] - lo[1]) * i as f64 / steps as f64;
        for j in 0..=steps {
            let x = lo[0] + (hi[0] - lo[0]) * j as f64 / steps as f64;
            let z = surface.eval([x, y]);
            let _ = writeln!(
                out,
                "{} {} {} {}",
                crate::textio::fmt_f64(x),
                crate::textio::fmt_f64(y),
                crate::textio::fmt_f64(z),
                u8::from(inside_hull(&hull, [x, y]))
            );
        }
    }
    out
}
