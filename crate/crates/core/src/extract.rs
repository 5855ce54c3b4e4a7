//! LMFD to modal-model conversion: poles, pole pairing, residue fit with
//! fixed denominators, pruning of computational modes and rank-1 residue
//! factorization.

use crate::frf::FrfDataset;
use crate::linalg::lstsq;
use crate::lmfd::LmfdModel;
use crate::modal::ModalModel;
use crate::solver::WeightingSpec;
use crate::textio::fmt_f64;
use crate::{par, Coord, Error, Result, C64};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::fmt::Write;

/// All `2 n_m` poles of an LMFD model. Warns if the set is not closed
/// under conjugation.
pub fn poles_of(lmfd: &LmfdModel) -> Result<Vec<C64>> {
    let poles = lmfd.poles()?;
    let scale = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let tol = 1e-8 * scale;
    for p in poles.iter().filter(|p| p.im.abs() > tol) {
        if !poles.iter().any(|q| (q - p.conj()).norm() <= tol) {
            log::warn!("pole {p} has no conjugate partner within {tol:.3e}");
        }
    }
    Ok(poles)
}

/// Two poles combined into `s^2 + zeta s + omega2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolePair {
    pub zeta: f64,
    pub omega2: f64,
    pub poles: [C64; 2],
}

impl PolePair {
    pub fn from_poles(a: C64, b: C64) -> Self {
        Self {
            zeta: -(a + b).re,
            omega2: (a * b).re,
            poles: [a, b],
        }
    }

    pub fn rigid() -> Self {
        Self {
            zeta: 0.0,
            omega2: 0.0,
            poles: [C64::new(0.0, 0.0); 2],
        }
    }

    pub fn is_rigid(&self) -> bool {
        self.omega2 == 0.0 && self.zeta == 0.0
    }

    /// A pair usable in a modal model: nonnegative stiffness and damping.
    pub fn is_valid(&self) -> bool {
        self.omega2 >= 0.0 && self.zeta >= 0.0 && self.omega2.is_finite() && self.zeta.is_finite()
    }

    pub fn frequency_hz(&self) -> f64 {
        self.omega2.max(0.0).sqrt() / (2.0 * PI)
    }

    pub fn damping_ratio(&self) -> f64 {
        if self.omega2 > 0.0 {
            self.zeta / (2.0 * self.omega2.sqrt())
        } else {
            f64::NAN
        }
    }

    fn denominator(&self, s: C64) -> C64 {
        s * s + s * self.zeta + self.omega2
    }
}

/// Pairs poles into real quadratics: exact zeros into rigid-body pairs,
/// complex poles with their conjugates, and leftover real poles greedily by
/// ascending magnitude. Returns the pairs (ascending `omega2`, then `zeta`)
/// and any warnings.
pub fn pair_poles(poles: &[C64]) -> Result<(Vec<PolePair>, Vec<String>)> {
    if !poles.len().is_multiple_of(2) {
        return Err(Error::invalid(format!("odd number of poles ({})", poles.len())));
    }
    let scale = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let tol = 1e-8 * scale;
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    let zeros = poles.iter().filter(|p| p.re == 0.0 && p.im == 0.0).count();
    pairs.extend(std::iter::repeat_n(PolePair::rigid(), zeros / 2));
    let mut real: Vec<C64> = Vec::new();
    if zeros % 2 == 1 {
        real.push(C64::new(0.0, 0.0));
    }
    let mut upper: Vec<C64> = Vec::new();
    let mut lower: Vec<C64> = Vec::new();
    for &p in poles.iter().filter(|p| !(p.re == 0.0 && p.im == 0.0)) {
        if p.im.abs() <= tol {
            real.push(C64::new(p.re, 0.0));
        } else if p.im > 0.0 {
            upper.push(p);
        } else {
            lower.push(p);
        }
    }
    if upper.len() != lower.len() {
        return Err(Error::invalid(format!(
            "{} poles in the upper and {} in the lower half plane cannot be conjugate-paired",
            upper.len(),
            lower.len()
        )));
    }
    upper.sort_by(|a, b| a.im.total_cmp(&b.im).then(a.re.total_cmp(&b.re)));
    let mut used = vec![false; lower.len()];
    for p in upper {
        let (j, _) = lower
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, q)| (j, (q - p.conj()).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("as many lower as upper poles");
        used[j] = true;
        let q = lower[j];
        if (q - p.conj()).norm() > 1e-6 * p.norm().max(tol) {
            warnings.push(format!("poles {p} and {q} are only approximately conjugate"));
        }
        let pair = PolePair::from_poles(p, q);
        pairs.push(pair);
    }
    let nonzero_real = real.iter().filter(|p| p.re != 0.0).count();
    if nonzero_real > 2 {
        warnings.push(format!(
            "{nonzero_real} real flexible poles paired by ascending magnitude"
        ));
    }
    real.sort_by(|a, b| a.re.abs().total_cmp(&b.re.abs()));
    for c in real.chunks(2) {
        pairs.push(PolePair::from_poles(c[0], c[1]));
    }
    pairs.sort_by(|a, b| a.omega2.total_cmp(&b.omega2).then(a.zeta.total_cmp(&b.zeta)));
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((pairs, warnings))
}

/// Residues fitted with fixed denominators.
#[derive(Debug, Clone)]
pub struct ResidueFit {
    /// One `p x q` residue per flexible pair, in the order of the pairs
    /// passed in (rigid-body pairs excluded).
    pub flexible: Vec<DMatrix<f64>>,
    /// Combined `1 / s^2` residue of all rigid-body pairs.
    pub rigid: DMatrix<f64>,
    pub n_rb: usize,
    pub cost: f64,
}

impl ResidueFit {
    /// Model response `R_rb / s^2 + sum_i R_i / d_i(s)`.
    pub fn response(&self, flex_pairs: &[PolePair], s: C64) -> crate::CMatrix {
        let mut g = self.rigid.map(|v| C64::new(v, 0.0)) * (s * s).inv();
        for (pair, r) in flex_pairs.iter().zip(&self.flexible) {
            let inv = pair.denominator(s).inv();
            g += r.map(|v| inv * v);
        }
        g
    }
}

/// Basis functions: `1 / s^2` first if there are rigid pairs, then one
/// `1 / d_i` per flexible pair.
fn basis_values(flex: &[PolePair], rigid: bool, s: C64) -> Vec<C64> {
    let mut v = Vec::with_capacity(flex.len() + 1);
    if rigid {
        v.push((s * s).inv());
    }
    v.extend(flex.iter().map(|p| p.denominator(s).inv()));
    v
}

const GRAM_COND_LIMIT: f64 = 1e12;

/// Weighted linear LS for real residues with the denominators fixed, one
/// independent problem per FRF entry.
pub fn fit_residues(frf: &FrfDataset, pairs: &[PolePair], w: &WeightingSpec) -> Result<ResidueFit> {
    if w.n_freq() != frf.n_freq() || w.shape() != frf.shape() {
        return Err(Error::invalid("weighting does not match the FRF"));
    }
    let n_rb = pairs.iter().filter(|p| p.is_rigid()).count();
    let flex: Vec<PolePair> = pairs.iter().copied().filter(|p| !p.is_rigid()).collect();
    let rigid = n_rb > 0;
    let nb = flex.len() + usize::from(rigid);
    let (p, q) = frf.shape();
    if nb == 0 {
        return Err(Error::invalid("no pole pairs to fit"));
    }
    let m = frf.n_freq();
    let phi: Vec<Vec<C64>> = frf
        .omega()
        .iter()
        .map(|&om| basis_values(&flex, rigid, C64::new(0.0, om)))
        .collect();
    if phi.iter().flatten().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::singular("residue fit", "a pole pair lies on the frequency grid"));
    }
    let fits = par::try_map_range(p * q, |e| -> Result<(DVector<f64>, f64)> {
        let (i, c) = (e % p, e / p);
        let mut a = DMatrix::zeros(2 * m, nb);
        let mut b = DVector::zeros(2 * m);
        for k in 0..m {
            let wk = w.at(k)[(i, c)];
            for j in 0..nb {
                let v = phi[k][j] * wk;
                a[(2 * k, j)] = v.re;
                a[(2 * k + 1, j)] = v.im;
            }
            let g = frf.response()[k][(i, c)] * wk;
            b[2 * k] = g.re;
            b[2 * k + 1] = g.im;
        }
        let gram_cond = scaled_gram_cond(&a);
        if !(gram_cond <= GRAM_COND_LIMIT) {
            return Err(Error::rank(
                "residue fit",
                format!(
                    "Gram condition {gram_cond:.3e} for entry ({i}, {c}); near-duplicate pairs: {}",
                    near_duplicates(&a, &flex, rigid)
                ),
            ));
        }
        let sol = lstsq(&a, &b, "residue fit")?;
        let res = (&a * &sol.x - &b).norm_squared();
        Ok((sol.x, res))
    })?;
    let off = usize::from(rigid);
    let flexible = (0..flex.len())
        .map(|j| DMatrix::from_fn(p, q, |i, c| fits[i + p * c].0[off + j]))
        .collect();
    let rigid_block = if rigid {
        DMatrix::from_fn(p, q, |i, c| fits[i + p * c].0[0])
    } else {
        DMatrix::zeros(p, q)
    };
    Ok(ResidueFit {
        flexible,
        rigid: rigid_block,
        n_rb,
        cost: fits.iter().map(|f| f.1).sum(),
    })
}

fn scaled_gram_cond(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols();
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    if norms.contains(&0.0) {
        return f64::INFINITY;
    }
    let g = DMatrix::from_fn(n, n, |i, j| a.column(i).dot(&a.column(j)) / (norms[i] * norms[j]));
    let ev = g.symmetric_eigenvalues();
    let hi = ev.iter().cloned().fold(0.0, f64::max);
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn near_duplicates(a: &DMatrix<f64>, flex: &[PolePair], rigid: bool) -> String {
    let n = a.ncols();
    let label = |j: usize| {
        if rigid && j == 0 {
            "rigid".to_string()
        } else {
            let p = flex[j - usize::from(rigid)];
            format!("{:.3} Hz/{:.4}", p.frequency_hz(), p.damping_ratio())
        }
    };
    let mut cands = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let c = a.column(i).dot(&a.column(j)).abs() / (a.column(i).norm() * a.column(j).norm());
            cands.push((c, i, j));
        }
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0));
    cands
        .iter()
        .take(3)
        .map(|(c, i, j)| format!("{} ~ {} (correlation {:.9})", label(*i), label(*j), c))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One row of the pruning diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRow {
    pub pair: PolePair,
    /// Relative cost increase when the pair is dropped (at the time it was
    /// evaluated); `NaN` for pairs that were not evaluated.
    pub contribution: f64,
    pub retained: bool,
    pub reason: &'static str,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub retained: Vec<PolePair>,
    /// Ascending frequency.
    pub table: Vec<PruneRow>,
    pub cost_all: f64,
    pub cost_retained: f64,
}

/// Per-entry normal equations of the residue LS over all candidate basis
/// functions; subsets are solved from these without revisiting the data.
struct EntryGram {
    g: DMatrix<f64>,
    h: DVector<f64>,
    bb: f64,
}

fn entry_grams(frf: &FrfDataset, flex: &[PolePair], rigid: bool, w: &WeightingSpec) -> Vec<EntryGram> {
    let (p, q) = frf.shape();
    let m = frf.n_freq();
    let nb = flex.len() + usize::from(rigid);
    let phi: Vec<Vec<C64>> = frf
        .omega()
        .iter()
        .map(|&om| basis_values(flex, rigid, C64::new(0.0, om)))
        .collect();
    par::map_range(p * q, |e| {
        let (i, c) = (e % p, e / p);
        let mut a = DMatrix::zeros(2 * m, nb);
        let mut b = DVector::zeros(2 * m);
        for k in 0..m {
            let wk = w.at(k)[(i, c)];
            for j in 0..nb {
                let v = phi[k][j] * wk;
                a[(2 * k, j)] = v.re;
                a[(2 * k + 1, j)] = v.im;
            }
            let g = frf.response()[k][(i, c)] * wk;
            b[2 * k] = g.re;
            b[2 * k + 1] = g.im;
        }
        EntryGram {
            g: a.transpose() * &a,
            h: a.tr_mul(&b),
            bb: b.norm_squared(),
        }
    })
}

/// LS cost using only the basis functions in `keep`.
fn subset_cost(grams: &[EntryGram], keep: &[usize]) -> f64 {
    grams
        .iter()
        .map(|eg| {
            if keep.is_empty() {
                return eg.bb;
            }
            let g = DMatrix::from_fn(keep.len(), keep.len(), |a, b| eg.g[(keep[a], keep[b])]);
            let h = DVector::from_fn(keep.len(), |a, _| eg.h[keep[a]]);
            // diagonal equilibration keeps the small solve well scaled
            let d: Vec<f64> = (0..keep.len()).map(|a| g[(a, a)].sqrt().max(1e-300)).collect();
            let gs = DMatrix::from_fn(keep.len(), keep.len(), |a, b| g[(a, b)] / (d[a] * d[b]));
            let hs = DVector::from_fn(keep.len(), |a, _| h[a] / d[a]);
            match gs.cholesky() {
                Some(ch) => (eg.bb - hs.dot(&ch.solve(&hs))).max(0.0),
                None => f64::INFINITY,
            }
        })
        .sum()
}

/// Greedy backward elimination of computational modes.
///
/// Invalid pairs (negative stiffness or damping) are dropped first. Then,
/// repeatedly, the flexible pair whose removal raises the refit cost the
/// least is dropped while that relative increase stays below `rho_keep`.
/// Relative increases are measured against `max(V, floor)` with `floor`
/// a `1e-12` fraction of the zero-model cost, so noiseless fits do not
/// divide by rounding noise. Rigid-body pairs are always kept.
pub fn prune_computational_modes(
    pairs: &[PolePair],
    frf: &FrfDataset,
    w: &WeightingSpec,
    rho_keep: f64,
) -> Result<PruneResult> {
    if !(rho_keep >= 0.0) {
        return Err(Error::invalid("rho_keep must be nonnegative"));
    }
    let mut table = Vec::new();
    let rigid: Vec<PolePair> = pairs.iter().copied().filter(|p| p.is_rigid()).collect();
    let mut flex = Vec::new();
    for p in pairs.iter().filter(|p| !p.is_rigid()) {
        if p.is_valid() {
            flex.push(*p);
        } else {
            table.push(PruneRow {
                pair: *p,
                contribution: f64::NAN,
                retained: false,
                reason: "invalid",
            });
        }
    }
    let has_rigid = !rigid.is_empty();
    let off = usize::from(has_rigid);
    let grams = entry_grams(frf, &flex, has_rigid, w);
    let zero_cost: f64 = grams.iter().map(|g| g.bb).sum();
    let floor = 1e-12 * zero_cost;
    let mut keep: Vec<usize> = (0..flex.len() + off).collect();
    let cost_all = subset_cost(&grams, &keep);
    let mut current = cost_all;
    let mut contributions = vec![f64::NAN; flex.len()];
    loop {
        let cands: Vec<usize> = keep.iter().copied().filter(|&j| j >= off).collect();
        if cands.is_empty() {
            break;
        }
        let costs = par::map_slice(&cands, |&j| {
            let sub: Vec<usize> = keep.iter().copied().filter(|&k| k != j).collect();
            subset_cost(&grams, &sub)
        });
        let base = current.max(floor);
        for (&j, &c) in cands.iter().zip(&costs) {
            contributions[j - off] = (c - current) / base;
        }
        let (best, &c) = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty candidates");
        let rel = (c - current) / base;
        if rel < rho_keep {
            let j = cands[best];
            table.push(PruneRow {
                pair: flex[j - off],
                contribution: rel,
                retained: false,
                reason: "below-threshold",
            });
            keep.retain(|&k| k != j);
            current = c;
        } else {
            break;
        }
    }
    let mut retained = rigid.clone();
    for &j in keep.iter().filter(|&&j| j >= off) {
        retained.push(flex[j - off]);
        table.push(PruneRow {
            pair: flex[j - off],
            contribution: contributions[j - off],
            retained: true,
            reason: "significant",
        });
    }
    for p in &rigid {
        table.push(PruneRow {
            pair: *p,
            contribution: f64::NAN,
            retained: true,
            reason: "rigid",
        });
    }
    table.sort_by(|a, b| {
        a.pair
            .omega2
            .total_cmp(&b.pair.omega2)
            .then(a.pair.zeta.total_cmp(&b.pair.zeta))
    });
    retained.sort_by(|a, b| a.omega2.total_cmp(&b.omega2).then(a.zeta.total_cmp(&b.zeta)));
    Ok(PruneResult {
        retained,
        table,
        cost_all,
        cost_retained: current,
    })
}

/// Columnar pruning table.
pub fn prune_table_text(result: &PruneResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# pruning table");
    let _ = writeln!(out, "# cost_all = {}", fmt_f64(result.cost_all));
    let _ = writeln!(out, "# cost_retained = {}", fmt_f64(result.cost_retained));
    let _ = writeln!(out, "freq_hz damping_ratio zeta omega2 contribution retained reason");
    for r in &result.table {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            fmt_f64(r.pair.frequency_hz()),
            fmt_f64(r.pair.damping_ratio()),
            fmt_f64(r.pair.zeta),
            fmt_f64(r.pair.omega2),
            fmt_f64(r.contribution),
            u8::from(r.retained),
            r.reason
        );
    }
    out
}

/// Best rank-1 approximation `l r^T` of a residue matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1 {
    /// Carries the leading singular value.
    pub l: DVector<f64>,
    pub r: DVector<f64>,
    /// `sigma_2 / sigma_1`.
    pub defect: f64,
    pub singular_values: Vec<f64>,
}

pub fn rank1_factor(residue: &DMatrix<f64>) -> Result<Rank1> {
    if residue.is_empty() || residue.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("cannot factor a zero residue matrix"));
    }
    if residue.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("residue matrix is not finite"));
    }
    let svd = residue.clone().svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = order[0];
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let s1 = svd.singular_values[k];
    // the SVD's vectors can be loose for nearly rank-1 input; power sweeps
    // converge at rate (sigma_2 / sigma_1)^2
    let mut r = vt.row(k).transpose();
    for _ in 0..2 {
        let t = residue.tr_mul(&(residue * &r));
        let n = t.norm();
        if !(n > 0.0) {
            break;
        }
        r = t / n;
    }
    if r.dot(&vt.row(k).transpose()) < 0.0 {
        r.neg_mut();
    }
    let mut l = residue * &r;
    if dominant(&l) < 0.0 {
        l.neg_mut();
        r.neg_mut();
    }
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok(Rank1 {
        l,
        r,
        defect: sv.get(1).map_or(0.0, |s2| s2 / s1),
        singular_values: sv,
    })
}

fn dominant(v: &DVector<f64>) -> f64 {
    let mut best = 0.0f64;
    for &x in v.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    best
}

/// Planar rigid-body shapes `[1, y, -x]` (piston, tilt about x, tilt about y).
pub fn rigid_shapes(coords: &[Coord]) -> DMatrix<f64> {
    DMatrix::from_fn(coords.len(), 3, |j, c| match c {
        0 => 1.0,
        1 => coords[j][1],
        _ => -coords[j][0],
    })
}

/// Re-expresses the rigid-body block `L_rb R_rb` in the basis closest to
/// `target` (columns of planar shapes): `L <- L T^-1`, `R <- T R` with
/// `T = pinv(target) L_rb`. The product, and hence the response, is
/// unchanged.
pub fn align_rigid(model: &ModalModel, target: &DMatrix<f64>) -> Result<ModalModel> {
    let n_rb = model.n_rb();
    if n_rb == 0 {
        return Ok(model.clone());
    }
    if target.nrows() != model.n_outputs() || target.ncols() != n_rb {
        return Err(Error::invalid(format!(
            "rigid target is {}x{}, expected {}x{n_rb}",
            target.nrows(),
            target.ncols(),
            model.n_outputs()
        )));
    }
    let rb: Vec<usize> = (0..model.n_modes()).filter(|&i| model.omega2()[i] == 0.0).collect();
    let l_rb = model.mode_shapes().select_columns(rb.iter());
    let r_rb = model.input_matrix().select_rows(rb.iter());
    let pinv = target
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::singular("rigid alignment", e.to_string()))?;
    let t = pinv * &l_rb;
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::singular("rigid alignment", "rigid-body shapes do not span the target"))?;
    let l_new = &l_rb * t_inv;
    let r_new = &t * &r_rb;
    let mut l = model.mode_shapes().clone();
    let mut r = model.input_matrix().clone();
    for (c, &i) in rb.iter().enumerate() {
        l.set_column(i, &l_new.column(c));
        r.set_row(i, &r_new.row(c));
    }
    ModalModel::new(
        model.omega2().to_vec(),
        model.zeta().to_vec(),
        l,
        r,
        model.sensor_coords().to_vec(),
    )
}

/// Result of converting an LMFD model into a modal model.
#[derive(Debug, Clone)]
pub struct Transform {
    pub model: ModalModel,
    pub pruning: PruneResult,
    pub residues: ResidueFit,
    /// Weighted cost of the rank-1 modal model on the fit data.
    pub modal_cost: f64,
    /// `modal_cost / residues.cost - 1`.
    pub delta: f64,
    /// Rank-1 defect per flexible mode (ascending frequency).
    pub defects: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Poles, pairing, pruning, residue fit and rank-1 factorization. Rigid-body
/// modes are aligned with the planar shapes at `coords`.
pub fn lmfd_to_modal(
    lmfd: &LmfdModel,
    frf: &FrfDataset,
    w: &WeightingSpec,
    coords: &[Coord],
    rho_keep: f64,
) -> Result<Transform> {
    let (p, q) = frf.shape();
    if coords.len() != p {
        return Err(Error::invalid(format!("{} coordinates for {p} outputs", coords.len())));
    }
    let poles = poles_of(lmfd)?;
    let (pairs, mut warnings) = pair_poles(&poles)?;
    let pruning = prune_computational_modes(&pairs, frf, w, rho_keep)?;
    let residues = fit_residues(frf, &pruning.retained, w)?;
    let flex: Vec<PolePair> = pruning.retained.iter().copied().filter(|p| !p.is_rigid()).collect();
    let n_rb = residues.n_rb;
    let n_m = n_rb + flex.len();
    let mut omega2 = vec![0.0; n_m];
    let mut zeta = vec![0.0; n_m];
    let mut l = DMatrix::zeros(p, n_m);
    let mut r = DMatrix::zeros(n_m, q);
    if n_rb > 0 {
        let svd = residues.rigid.clone().svd(false, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        if n_rb > order.len() {
            return Err(Error::invalid(format!(
                "{n_rb} rigid-body modes need at least {n_rb} outputs and inputs"
            )));
        }
        let vt = svd.v_t.as_ref().expect("requested V^T");
        if svd.singular_values[order[n_rb - 1]] == 0.0 {
            return Err(Error::singular(
                "rigid-body residue",
                "rank below the rigid-body mode count",
            ));
        }
        // dominant right subspace, tightened by subspace iteration; then
        // R_rb ~ (R_rb V) V^T
        let mut v = DMatrix::from_fn(q, n_rb, |j, c| vt[(order[c], j)]);
        for _ in 0..2 {
            let t = residues.rigid.tr_mul(&(&residues.rigid * &v));
            v = t.qr().q();
        }
        let lv = &residues.rigid * &v;
        for c in 0..n_rb {
            l.set_column(c, &lv.column(c));
            r.set_row(c, &v.column(c).transpose());
        }
        if let Some(&k) = order.get(n_rb) {
            let ratio = svd.singular_values[k] / svd.singular_values[order[0]];
            if ratio > 1e-3 {
                warnings.push(format!(
                    "rigid-body residue has rank above {n_rb} (next ratio {ratio:.3e})"
                ));
            }
        }
    }
    let mut defects = Vec::with_capacity(flex.len());
    for (i, (pair, res)) in flex.iter().zip(&residues.flexible).enumerate() {
        let f = rank1_factor(res)?;
        let c = n_rb + i;
        omega2[c] = pair.omega2;
        zeta[c] = pair.zeta;
        l.set_column(c, &f.l);
        r.set_row(c, &f.r.transpose());
        defects.push(f.defect);
    }
    let model = ModalModel::new(omega2, zeta, l, r, coords.to_vec())?;
    let model = if n_rb == 3 {
        align_rigid(&model, &rigid_shapes(coords))?
    } else {
        model
    };
    let modal = model.frf(frf.omega())?;
    let modal_cost = crate::solver::cost_of_responses(frf, w, &modal);
    let delta = if residues.cost > 0.0 {
        modal_cost / residues.cost - 1.0
    } else {
        0.0
    };
    for wmsg in &warnings {
        log::warn!("{wmsg}");
    }
    Ok(Transform {
        model,
        pruning,
        residues,
        modal_cost,
        delta,
        defects,
        warnings,
    })
}
