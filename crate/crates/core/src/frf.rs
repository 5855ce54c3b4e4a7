//! Nonparametric frequency-response estimation from periodic experiments.
//!
//! Random-phase multisines are applied to one input at a time. The robust
//! estimate averages DFT ratios over steady-state periods and then over
//! independent realizations; the spread across realizations gives the
//! variance of the averaged estimate.

use crate::synth::ExperimentRecord;
use crate::textio::{fmt_f64, header_kv, parse_finite};
use crate::{par, CMatrix, Error, Result, C64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

/// Partition tag of a channel in the closed-loop FRF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelTag {
    /// Measured, spatially sampled output.
    Zs,
    /// Control input (output of the feedback controller).
    Uc,
    /// Non-controlled, directly excited input.
    Unc,
    /// Reference injected into a control input.
    Ruc,
}

impl ChannelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelTag::Zs => "zs",
            ChannelTag::Uc => "uc",
            ChannelTag::Unc => "unc",
            ChannelTag::Ruc => "ruc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "zs" => ChannelTag::Zs,
            "uc" => ChannelTag::Uc,
            "unc" => ChannelTag::Unc,
            "ruc" => ChannelTag::Ruc,
            _ => return Err(Error::Parse(format!("unknown channel tag `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub label: String,
    pub tag: ChannelTag,
    /// In-plane channels are bookkeeping only and dropped from the model.
    pub in_plane: bool,
}

impl Channel {
    pub fn new(label: impl Into<String>, tag: ChannelTag) -> Self {
        Self {
            label: label.into(),
            tag,
            in_plane: false,
        }
    }

    pub fn in_plane(mut self) -> Self {
        self.in_plane = true;
        self
    }

    pub(crate) fn encode(&self) -> String {
        let mut s = format!("{}:{}", self.label, self.tag.as_str());
        if self.in_plane {
            s.push_str(":inplane");
        }
        s
    }

    pub(crate) fn decode(tok: &str) -> Result<Self> {
        let parts: Vec<&str> = tok.split(':').collect();
        match parts.as_slice() {
            [label, tag] => Ok(Channel::new(*label, ChannelTag::parse(tag)?)),
            [label, tag, "inplane"] => Ok(Channel::new(*label, ChannelTag::parse(tag)?).in_plane()),
            _ => Err(Error::Parse(format!("bad channel descriptor `{tok}`"))),
        }
    }
}

/// Complex `p x q` response samples on an ascending grid of excited
/// frequencies, with per-entry variances.
#[derive(Debug, Clone, PartialEq)]
pub struct FrfDataset {
    omega: Vec<f64>,
    response: Vec<CMatrix>,
    variance: Vec<DMatrix<f64>>,
    outputs: Vec<Channel>,
    inputs: Vec<Channel>,
    /// Set when the variance could not be estimated (single realization).
    variance_flagged: bool,
}

impl FrfDataset {
    pub fn new(
        omega: Vec<f64>,
        response: Vec<CMatrix>,
        variance: Vec<DMatrix<f64>>,
        outputs: Vec<Channel>,
        inputs: Vec<Channel>,
    ) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::invalid("FRF dataset has no frequencies"));
        }
        if response.len() != omega.len() || variance.len() != omega.len() {
            return Err(Error::invalid("FRF samples do not match the grid length"));
        }
        if omega.windows(2).any(|w| !(w[1] > w[0])) || !(omega[0] > 0.0) {
            return Err(Error::invalid("FRF grid must be positive and strictly ascending"));
        }
        let shape = (outputs.len(), inputs.len());
        for (g, v) in response.iter().zip(&variance) {
            if g.shape() != shape || v.shape() != shape {
                return Err(Error::invalid(format!(
                    "FRF sample is {:?}, channels give {shape:?}",
                    g.shape()
                )));
            }
            if !g.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::invalid("FRF contains non-finite values"));
            }
            if !v.iter().all(|x| x.is_finite() && *x >= 0.0) {
                return Err(Error::invalid("FRF variance must be finite and nonnegative"));
            }
        }
        Ok(Self {
            omega,
            response,
            variance,
            outputs,
            inputs,
            variance_flagged: false,
        })
    }

    /// Noise-free dataset from any evaluated response.
    pub fn noiseless(
        omega: Vec<f64>,
        response: Vec<CMatrix>,
        outputs: Vec<Channel>,
        inputs: Vec<Channel>,
    ) -> Result<Self> {
        let shape = (outputs.len(), inputs.len());
        let variance = vec![DMatrix::zeros(shape.0, shape.1); omega.len()];
        Self::new(omega, response, variance, outputs, inputs)
    }

    /// Generic channel labels `y0.., u0..` tagged as outputs/inputs.
    pub fn unlabeled(omega: Vec<f64>, response: Vec<CMatrix>) -> Result<Self> {
        let (p, q) = response.first().map_or((0, 0), |g| g.shape());
        let outputs = (0..p).map(|i| Channel::new(format!("y{i}"), ChannelTag::Zs)).collect();
        let inputs = (0..q).map(|i| Channel::new(format!("u{i}"), ChannelTag::Unc)).collect();
        Self::noiseless(omega, response, outputs, inputs)
    }

    pub fn with_flagged_variance(mut self, flagged: bool) -> Self {
        self.variance_flagged = flagged;
        self
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn response(&self) -> &[CMatrix] {
        &self.response
    }

    pub fn variance(&self) -> &[DMatrix<f64>] {
        &self.variance
    }

    pub fn outputs(&self) -> &[Channel] {
        &self.outputs
    }

    pub fn inputs(&self) -> &[Channel] {
        &self.inputs
    }

    pub fn variance_flagged(&self) -> bool {
        self.variance_flagged
    }

    pub fn n_freq(&self) -> usize {
        self.omega.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.outputs.len(), self.inputs.len())
    }

    /// Sub-block of the given rows and columns.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let (p, q) = self.shape();
        if rows.iter().any(|&r| r >= p) || cols.iter().any(|&c| c >= q) {
            return Err(Error::invalid(format!(
                "channel selection out of range for a {p}x{q} dataset"
            )));
        }
        let pick = |m: &CMatrix| CMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
        let pick_r = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
        Ok(Self {
            omega: self.omega.clone(),
            response: self.response.iter().map(pick).collect(),
            variance: self.variance.iter().map(pick_r).collect(),
            outputs: rows.iter().map(|&r| self.outputs[r].clone()).collect(),
            inputs: cols.iter().map(|&c| self.inputs[c].clone()).collect(),
            variance_flagged: self.variance_flagged,
        })
    }

    /// Drops the in-plane bookkeeping channels.
    pub fn out_of_plane(&self) -> Result<Self> {
        let rows: Vec<usize> = (0..self.outputs.len()).filter(|&i| !self.outputs[i].in_plane).collect();
        let cols: Vec<usize> = (0..self.inputs.len()).filter(|&i| !self.inputs[i].in_plane).collect();
        self.select(&rows, &cols)
    }

    /// Columnar text: one row per `(k, output, input)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let enc = |c: &[Channel]| c.iter().map(Channel::encode).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "# frf dataset");
        let _ = writeln!(out, "# outputs = {}", enc(&self.outputs));
        let _ = writeln!(out, "# inputs = {}", enc(&self.inputs));
        let _ = writeln!(out, "# variance_flagged = {}", self.variance_flagged);
        let _ = writeln!(out, "k output input omega re im variance");
        for (k, (g, v)) in self.response.iter().zip(&self.variance).enumerate() {
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let _ = writeln!(
                        out,
                        "{k} {i} {j} {} {} {} {}",
                        fmt_f64(self.omega[k]),
                        fmt_f64(g[(i, j)].re),
                        fmt_f64(g[(i, j)].im),
                        fmt_f64(v[(i, j)])
                    );
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut outputs = None;
        let mut inputs = None;
        let mut flagged = false;
        let mut rows: Vec<(usize, usize, usize, [f64; 4])> = Vec::new();
        let mut seen_header = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                if let Some((k, v)) = header_kv(line) {
                    let chans = || v.split_whitespace().map(Channel::decode).collect::<Result<Vec<_>>>();
                    match k {
                        "outputs" => outputs = Some(chans()?),
                        "inputs" => inputs = Some(chans()?),
                        "variance_flagged" => flagged = v == "true",
                        _ => {}
                    }
                }
                continue;
            }
            if !seen_header {
                if line.split_whitespace().next() != Some("k") {
                    return Err(Error::Parse("FRF file lacks the column header row".into()));
                }
                seen_header = true;
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 7 {
                return Err(Error::Parse(format!("line {}: expected 7 columns", ln + 1)));
            }
            let idx = |t: &str| {
                t.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("line {}: bad index `{t}`", ln + 1)))
            };
            let mut vals = [0.0; 4];
            for (v, t) in vals.iter_mut().zip(&toks[3..]) {
                *v = parse_finite(t, ln + 1)?;
            }
            rows.push((idx(toks[0])?, idx(toks[1])?, idx(toks[2])?, vals));
        }
        let outputs = outputs.ok_or_else(|| Error::Parse("missing `outputs` header".into()))?;
        let inputs = inputs.ok_or_else(|| Error::Parse("missing `inputs` header".into()))?;
        let (p, q) = (outputs.len(), inputs.len());
        if p * q == 0 || !rows.len().is_multiple_of(p * q) {
            return Err(Error::Parse(format!("{} rows do not tile a {p}x{q} grid", rows.len())));
        }
        let m = rows.len() / (p * q);
        let mut omega = vec![f64::NAN; m];
        let mut response = vec![CMatrix::zeros(p, q); m];
        let mut variance = vec![DMatrix::zeros(p, q); m];
        let mut filled = vec![false; rows.len()];
        for (k, i, j, [w, re, im, var]) in rows {
            if k >= m || i >= p || j >= q {
                return Err(Error::Parse(format!("entry ({k}, {i}, {j}) out of range")));
            }
            let slot = (k * p + i) * q + j;
            if std::mem::replace(&mut filled[slot], true) {
                return Err(Error::Parse(format!("duplicate entry ({k}, {i}, {j})")));
            }
            if omega[k].is_nan() {
                omega[k] = w;
            } else if omega[k] != w {
                return Err(Error::Parse(format!("inconsistent frequency for k = {k}")));
            }
            response[k][(i, j)] = C64::new(re, im);
            variance[k][(i, j)] = var;
        }
        Self::new(omega, response, variance, outputs, inputs)
            .map(|d| d.with_flagged_variance(flagged))
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::textio::write_file(path, &self.to_text())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Flat-amplitude random-phase multisine on a set of DFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisineSpec {
    pub bins: Vec<usize>,
    pub amplitude: f64,
    pub seed: u64,
    pub period_len: usize,
    pub sample_rate: f64,
}

impl MultisineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins.is_empty() {
            return Err(Error::invalid("multisine excites no bins"));
        }
        if self.bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("multisine bins must be strictly ascending"));
        }
        if self.bins[0] == 0 || 2 * self.bins[self.bins.len() - 1] >= self.period_len {
            return Err(Error::invalid(
                "multisine bins must lie strictly between DC and Nyquist",
            ));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid("multisine amplitude must be positive"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    /// Excited angular frequencies (rad/s).
    pub fn omega(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|&b| 2.0 * PI * b as f64 * self.sample_rate / self.period_len as f64)
            .collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One period `x[n] = sum_b A cos(2 pi b n / N + phi_b)` with uniform phases
/// drawn from the spec seed.
pub fn design_multisine(spec: &MultisineSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.period_len;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<f64> = spec.bins.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut x = vec![0.0; n];
    for (&b, &ph) in spec.bins.iter().zip(&phases) {
        for (t, v) in x.iter_mut().enumerate() {
            // reduce the argument exactly in integers before scaling
            let arg = ((b * t) % n) as f64 * (2.0 * PI / n as f64);
            *v += spec.amplitude * (arg + ph).cos();
        }
    }
    Ok(x)
}

pub fn crest_factor(x: &[f64]) -> f64 {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    peak / rms
}

fn dft_bins(fft: &Arc<dyn rustfft::Fft<f64>>, x: &[f64], bins: &[usize]) -> Vec<C64> {
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    bins.iter().map(|&b| buf[b]).collect()
}

/// Per-record estimate: mean over steady-state periods of `Y(b) / U(b)`,
/// shape `[channel][bin]`.
fn record_ratios(
    rec: &ExperimentRecord,
    spec: &MultisineSpec,
    fft: &Arc<dyn rustfft::Fft<f64>>,
) -> Result<Vec<Vec<C64>>> {
    let n = spec.period_len;
    if rec.period_len() != n {
        return Err(Error::invalid(format!(
            "record period {} does not match multisine period {n}",
            rec.period_len()
        )));
    }
    if rec.periods() < 2 {
        return Err(Error::invalid(
            "records need at least two periods; the first is discarded",
        ));
    }
    let steady = rec.periods() - 1;
    let mut acc = vec![vec![C64::new(0.0, 0.0); spec.bins.len()]; rec.channels().len()];
    for per in 1..rec.periods() {
        let range = per * n..(per + 1) * n;
        let full_u: Vec<C64> = {
            let mut buf: Vec<C64> = rec.injected()[range.clone()]
                .iter()
                .map(|&v| C64::new(v, 0.0))
                .collect();
            fft.process(&mut buf);
            buf
        };
        let u: Vec<C64> = spec.bins.iter().map(|&b| full_u[b]).collect();
        if per == 1 {
            check_excitation(&full_u, spec)?;
        }
        for (c, y) in rec.outputs().iter().enumerate() {
            let yb = dft_bins(fft, &y[range.clone()], &spec.bins);
            for (a, (yv, uv)) in acc[c].iter_mut().zip(yb.iter().zip(&u)) {
                *a += yv / uv;
            }
        }
    }
    for row in acc.iter_mut() {
        for v in row.iter_mut() {
            *v /= steady as f64;
        }
    }
    Ok(acc)
}

/// The injected signal must carry (almost) all its energy on the excited bins.
fn check_excitation(u: &[C64], spec: &MultisineSpec) -> Result<()> {
    let n = u.len();
    let mut on = 0.0;
    let mut excited = vec![false; n / 2 + 1];
    for &b in &spec.bins {
        excited[b] = true;
        on += u[b].norm_sqr();
    }
    let off: f64 = (0..=n / 2).filter(|&b| !excited[b]).map(|b| u[b].norm_sqr()).sum();
    let weakest = spec.bins.iter().map(|&b| u[b].norm()).fold(f64::INFINITY, f64::min);
    if !(off <= 1e-6 * on) || !(weakest > 0.0) {
        return Err(Error::invalid("injected signal does not match the multisine bin set"));
    }
    Ok(())
}

/// Robust-multisine ETFE. Records may come in any order; each must excite
/// exactly one input. Columns are ordered by the records' input index.
pub fn etfe_robust(records: &[ExperimentRecord], spec: &MultisineSpec) -> Result<FrfDataset> {
    spec.validate()?;
    let first = records.first().ok_or_else(|| Error::invalid("no experiment records"))?;
    let channels = first.channels().to_vec();
    for r in records {
        if r.channels() != channels.as_slice() {
            return Err(Error::invalid("records measure different channel sets"));
        }
        if r.sample_rate() != spec.sample_rate {
            return Err(Error::invalid("record sample rate does not match the multisine"));
        }
    }
    let mut inputs: Vec<(usize, Channel)> = Vec::new();
    for r in records {
        if !inputs.iter().any(|(i, _)| *i == r.input_index()) {
            inputs.push((r.input_index(), r.excited().clone()));
        }
    }
    inputs.sort_by_key(|(i, _)| *i);
    if inputs.iter().enumerate().any(|(j, (i, _))| j != *i) {
        return Err(Error::invalid("excited input indices must cover 0..q without gaps"));
    }
    let fft = FftPlanner::new().plan_fft_forward(spec.period_len);
    let ratios = par::try_map_slice(records, |r| record_ratios(r, spec, &fft))?;

    let (p, q, m) = (channels.len(), inputs.len(), spec.bins.len());
    let mut response = vec![CMatrix::zeros(p, q); m];
    let mut variance = vec![DMatrix::zeros(p, q); m];
    let mut flagged = false;
    for j in 0..q {
        let group: Vec<&Vec<Vec<C64>>> = records
            .iter()
            .zip(&ratios)
            .filter(|(r, _)| r.input_index() == j)
            .map(|(_, x)| x)
            .collect();
        let reps = group.len() as f64;
        flagged |= group.len() < 2;
        for c in 0..p {
            for k in 0..m {
                let mean = group.iter().map(|g| g[c][k]).sum::<C64>() / reps;
                response[k][(c, j)] = mean;
                if group.len() > 1 {
                    let s2 = group.iter().map(|g| (g[c][k] - mean).norm_sqr()).sum::<f64>() / (reps - 1.0);
                    variance[k][(c, j)] = s2 / reps;
                }
            }
        }
    }
    if flagged {
        log::warn!("single realization for some input: FRF variance set to zero");
    }
    let inputs = inputs.into_iter().map(|(_, c)| c).collect();
    Ok(FrfDataset::new(spec.omega(), response, variance, channels, inputs)?.with_flagged_variance(flagged))
}

/// Open-loop FRF from the closed-loop one:
/// `G = [P_zr, P_zunc] [[P_ucr, P_ucunc], [0, I]]^-1`.
///
/// Output rows are the `zs` channels, columns the `uc` channels followed by
/// the `unc` channels. Variances are propagated to first order assuming
/// independent entries.
pub fn closed_to_open(cl: &FrfDataset) -> Result<FrfDataset> {
    let idx = |chans: &[Channel], tag: ChannelTag| -> Vec<usize> {
        (0..chans.len()).filter(|&i| chans[i].tag == tag).collect()
    };
    let z = idx(cl.outputs(), ChannelTag::Zs);
    let uc = idx(cl.outputs(), ChannelTag::Uc);
    let r = idx(cl.inputs(), ChannelTag::Ruc);
    let unc = idx(cl.inputs(), ChannelTag::Unc);
    if z.is_empty() {
        return Err(Error::invalid("closed-loop FRF has no zs outputs"));
    }
    if uc.len() != r.len() {
        return Err(Error::invalid(format!(
            "{} control outputs but {} references",
            uc.len(),
            r.len()
        )));
    }
    if z.len() + uc.len() != cl.outputs().len() || r.len() + unc.len() != cl.inputs().len() {
        return Err(Error::invalid(
            "closed-loop FRF has channels outside the zs/uc/ruc/unc partition",
        ));
    }
    let cols: Vec<usize> = r.iter().chain(&unc).copied().collect();
    let (nz, nc, nn) = (z.len(), uc.len(), unc.len());
    let n = nc + nn;
    let blocks = par::try_map_range(cl.n_freq(), |k| {
        let g = &cl.response()[k];
        let v = &cl.variance()[k];
        let pz = CMatrix::from_fn(nz, n, |i, j| g[(z[i], cols[j])]);
        let vz = DMatrix::from_fn(nz, n, |i, j| v[(z[i], cols[j])]);
        let mut b = CMatrix::identity(n, n);
        let mut vb = DMatrix::zeros(n, n);
        for i in 0..nc {
            for j in 0..n {
                b[(i, j)] = g[(uc[i], cols[j])];
                vb[(i, j)] = v[(uc[i], cols[j])];
            }
        }
        let sv = b.clone().singular_values();
        let cond = sv.max() / sv.min();
        if !(cond <= 1e12) {
            return Err(Error::singular(
                "closed-loop input block",
                format!(
                    "at omega = {:.6e} rad/s (k = {k}), condition number {cond:.3e}",
                    cl.omega()[k]
                ),
            ));
        }
        let binv = b
            .try_inverse()
            .ok_or_else(|| Error::singular("closed-loop input block", format!("not invertible at k = {k}")))?;
        let go = &pz * &binv;
        let bi2 = binv.map(|x| x.norm_sqr());
        let go2 = go.map(|x| x.norm_sqr());
        // var(G) ~ var(Pz) |B^-1|^2 + sum |G_ac|^2 var(B_cd) |B^-1_db|^2
        let var = vz * &bi2 + go2 * (vb * &bi2);
        Ok((go, var))
    })?;
    let (response, variance): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
    let outputs = z.iter().map(|&i| cl.outputs()[i].clone()).collect();
    let mut inputs: Vec<Channel> = uc.iter().map(|&i| cl.outputs()[i].clone()).collect();
    inputs.extend(unc.iter().map(|&i| cl.inputs()[i].clone()));
    Ok(
        FrfDataset::new(cl.omega().to_vec(), response, variance, outputs, inputs)?
            .with_flagged_variance(cl.variance_flagged()),
    )
}

/// Multiplies every entry by `exp(j omega tau)`; variances are unchanged.
pub fn compensate_delay(frf: &FrfDataset, tau: f64) -> Result<FrfDataset> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("delay {tau} must be finite and >= 0")));
    }
    let mut out = frf.clone();
    for (g, &w) in out.response.iter_mut().zip(&frf.omega) {
        let rot = C64::from_polar(1.0, w * tau);
        g.apply(|z| *z *= rot);
    }
    Ok(out)
}

/// Phase of `z` unwrapped along the grid.
pub fn unwrap_phase(z: &[C64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for v in z {
        let a = v.arg();
        if let Some(p) = prev {
            let mut d = a + offset - p;
            while d > PI {
                offset -= 2.0 * PI;
                d -= 2.0 * PI;
            }
            while d < -PI {
                offset += 2.0 * PI;
                d += 2.0 * PI;
            }
        }
        let u = a + offset;
        out.push(u);
        prev = Some(u);
    }
    out
}

/// Least-squares slope of `y` against `x`.
pub fn phase_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Delay estimate from the unwrapped phase over the top decade of the grid,
/// on the entry with the lowest relative variance. Returns `(tau, (row, col))`.
pub fn estimate_delay(frf: &FrfDataset) -> Result<(f64, (usize, usize))> {
    let top = frf.omega()[frf.n_freq() - 1];
    let sel: Vec<usize> = (0..frf.n_freq()).filter(|&k| frf.omega()[k] >= top / 10.0).collect();
    if sel.len() < 3 {
        return Err(Error::invalid(
            "too few frequencies in the top decade to estimate a delay",
        ));
    }
    let (p, q) = frf.shape();
    let mut best = (f64::INFINITY, (0, 0));
    for i in 0..p {
        for j in 0..q {
            let score: f64 = sel
                .iter()
                .map(|&k| {
                    let g = frf.response()[k][(i, j)].norm_sqr();
                    if g > 0.0 {
                        frf.variance()[k][(i, j)] / g
                    } else {
                        f64::INFINITY
                    }
                })
                .sum();
            if score < best.0 {
                best = (score, (i, j));
            }
        }
    }
    let (i, j) = best.1;
    let z: Vec<C64> = sel.iter().map(|&k| frf.response()[k][(i, j)]).collect();
    let w: Vec<f64> = sel.iter().map(|&k| frf.omega()[k]).collect();
    let ph = unwrap_phase(&z);
    Ok(((-phase_slope(&w, &ph)).max(0.0), (i, j)))
}

/// Builds the closed-loop FRF in partitioned form from an open-loop plant and a
/// controller, for testing the conversion: plant `G` maps `[uc; unc]` to
/// `zs`, controller `K` maps `zs` to `uc`, and `uc = r - K zs`.
pub fn closed_loop_from(g: &CMatrix, k: &CMatrix, nc: usize) -> Result<CMatrix> {
    let (nz, n) = g.shape();
    if k.shape() != (nc, nz) || nc > n {
        return Err(Error::invalid("controller dimensions do not match the plant"));
    }
    // uc = r - K (G_c uc + G_n unc)  =>  (I + K G_c) uc = r - K G_n unc
    let gc = g.columns(0, nc).into_owned();
    let gn = g.columns(nc, n - nc).into_owned();
    let s = (CMatrix::identity(nc, nc) + k * &gc)
        .try_inverse()
        .ok_or_else(|| Error::singular("loop", "I + K G is singular"))?;
    let uc_r = s.clone();
    let uc_unc = -(&s * k * &gn);
    let z_r = &gc * &uc_r;
    let z_unc = &gc * &uc_unc + &gn;
    let mut p = CMatrix::zeros(nz + nc, n);
    p.view_mut((0, 0), (nz, nc)).copy_from(&z_r);
    p.view_mut((0, nc), (nz, n - nc)).copy_from(&z_unc);
    p.view_mut((nz, 0), (nc, nc)).copy_from(&uc_r);
    p.view_mut((nz, nc), (nc, n - nc)).copy_from(&uc_unc);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::{frf_eval, ModalModel};
    use crate::synth::{discrete_frf, simulate_open_loop};
    use rand_distr::{Distribution, StandardNormal};

    fn spec(bins: Vec<usize>, n: usize, seed: u64) -> MultisineSpec {
        MultisineSpec {
            bins,
            amplitude: 0.7,
            seed,
            period_len: n,
            sample_rate: 1000.0,
        }
    }

    fn full_dft(x: &[f64]) -> Vec<C64> {
        let fft = FftPlanner::new().plan_fft_forward(x.len());
        let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        buf
    }

    #[test]
    fn single_bin_is_a_sinusoid() {
        let x = design_multisine(&spec(vec![5], 64, 1)).unwrap();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.7).abs() < 2e-3);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!((rms - 0.7 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn flat_spectrum_on_excited_bins() {
        let bins: Vec<usize> = (3..90).step_by(2).collect();
        let x = design_multisine(&spec(bins.clone(), 256, 9)).unwrap();
        let d = full_dft(&x);
        let target = 0.7 * 256.0 / 2.0;
        for b in 1..128 {
            let expect = if bins.contains(&b) { target } else { 0.0 };
            assert!((d[b].norm() - expect).abs() < 1e-12 * target);
        }
    }

    #[test]
    fn crest_factor_typical_range() {
        let mut inside = 0;
        for seed in 0..40 {
            let x = design_multisine(&spec((1..=50).collect(), 1024, seed)).unwrap();
            let c = crest_factor(&x);
            if (2.5..=5.0).contains(&c) {
                inside += 1;
            }
        }
        assert!(inside >= 36, "{inside}");
    }

    fn record(input: &[f64], outputs: Vec<Vec<f64>>, n: usize, periods: usize, real: usize) -> ExperimentRecord {
        let channels = (0..outputs.len())
            .map(|i| Channel::new(format!("y{i}"), ChannelTag::Zs))
            .collect();
        ExperimentRecord::new(
            1000.0,
            n,
            periods,
            real,
            0,
            Channel::new("u0", ChannelTag::Unc),
            "test".into(),
            input.to_vec(),
            channels,
            outputs,
        )
        .unwrap()
    }

    fn periodic(ms: &MultisineSpec, periods: usize) -> Vec<f64> {
        let p = design_multisine(ms).unwrap();
        (0..periods * ms.period_len).map(|k| p[k % ms.period_len]).collect()
    }

    #[test]
    fn identity_plant_gives_unit_frf() {
        let ms = spec((1..40).collect(), 128, 2);
        let recs: Vec<_> = (0..3)
            .map(|r| {
                let u = periodic(&ms.with_seed(r), 3);
                record(&u, vec![u.clone()], 128, 3, r as usize)
            })
            .collect();
        let frf = etfe_robust(&recs, &ms).unwrap();
        for (g, v) in frf.response().iter().zip(frf.variance()) {
            assert!((g[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-12);
            assert!(v[(0, 0)] < 1e-24);
        }
        assert!(!frf.variance_flagged());
    }

    #[test]
    fn noiseless_mode_matches_discrete_response() {
        let w = 2.0 * PI * 60.0;
        let model = ModalModel::new(
            vec![w * w],
            vec![2.0 * 0.05 * w],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            vec![[0.0, 0.0]],
        )
        .unwrap();
        let ms = spec((1..200).collect(), 1000, 4);
        let u = periodic(&ms, 3);
        let y = simulate_open_loop(&model, &DMatrix::from_row_slice(1, u.len(), &u), 1000.0).unwrap();
        let rec = record(&u, vec![y.row(0).iter().copied().collect()], 1000, 3, 0);
        let frf = etfe_robust(&[rec], &ms).unwrap();
        assert!(frf.variance_flagged());
        let oracle = discrete_frf(&model, frf.omega(), 1000.0);
        for (g, o) in frf.response().iter().zip(&oracle) {
            let rel = (g[(0, 0)] - o[(0, 0)]).norm() / o[(0, 0)].norm();
            assert!(rel < 1e-6, "{rel}");
        }
        // and the continuous response after removing the hold delay, at low frequency
        let comp = compensate_delay(&frf, 0.5e-3).unwrap();
        let cont = frf_eval(&model, frf.omega()).unwrap();
        for k in 0..20 {
            let rel = (comp.response()[k][(0, 0)] - cont[k][(0, 0)]).norm() / cont[k][(0, 0)].norm();
            assert!(rel < 1e-3);
        }
    }

    /// Static gain 2 plus white output noise; returns the ETFE.
    fn noisy_gain(reals: usize, periods: usize, sigma: f64, seed: u64) -> FrfDataset {
        let ms = spec((1..60).collect(), 256, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let recs: Vec<_> = (0..reals)
            .map(|r| {
                let u = periodic(&ms.with_seed(seed * 100 + r as u64), periods);
                let y = u
                    .iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        2.0 * v + sigma * e
                    })
                    .collect();
                record(&u, vec![y], 256, periods, r)
            })
            .collect();
        etfe_robust(&recs, &ms).unwrap()
    }

    #[test]
    fn variance_estimate_matches_noise_level() {
        let (sigma, n, periods, reals) = (0.05, 256.0, 4, 8);
        let amp = 0.7 * n / 2.0;
        let truth = sigma * sigma * n / (amp * amp) / (periods - 1) as f64 / reals as f64;
        let mut within = 0;
        let mut total = 0;
        for seed in 0..100 {
            let frf = noisy_gain(reals, periods, sigma, seed);
            for v in frf.variance() {
                total += 1;
                let r = v[(0, 0)] / truth;
                if (1.0 / 3.0..=3.0).contains(&r) {
                    within += 1;
                }
            }
            let mean: f64 = frf.variance().iter().map(|v| v[(0, 0)]).sum::<f64>() / frf.n_freq() as f64;
            assert!((mean / truth - 1.0).abs() < 0.3);
        }
        assert!(within as f64 > 0.97 * total as f64, "{within}/{total}");
    }

    #[test]
    fn averaging_reduces_variance() {
        let spread = |reals: usize| {
            let ests: Vec<Vec<C64>> = (0..100)
                .map(|seed| {
                    noisy_gain(reals, 2, 0.05, 1000 + seed)
                        .response()
                        .iter()
                        .map(|g| g[(0, 0)])
                        .collect()
                })
                .collect();
            let m = ests[0].len();
            (0..m)
                .map(|k| ests.iter().map(|e| (e[k] - C64::new(2.0, 0.0)).norm_sqr()).sum::<f64>() / 100.0)
                .sum::<f64>()
                / m as f64
        };
        let ratio = spread(2) / spread(8);
        assert!((2.0..=8.0).contains(&ratio), "{ratio}");
    }

    fn random_c(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn paper_channels() -> (Vec<Channel>, Vec<Channel>) {
        let mut outs: Vec<Channel> = (0..16).map(|i| Channel::new(format!("z{i}"), ChannelTag::Zs)).collect();
        let mut ins = Vec::new();
        for i in 0..8 {
            let (mut o, mut r) = (
                Channel::new(format!("uc{i}"), ChannelTag::Uc),
                Channel::new(format!("r{i}"), ChannelTag::Ruc),
            );
            if i >= 4 {
                o = o.in_plane();
                r = r.in_plane();
            }
            outs.push(o);
            ins.push(r);
        }
        ins.extend((0..3).map(|i| Channel::new(format!("unc{i}"), ChannelTag::Unc)));
        (outs, ins)
    }

    #[test]
    fn closed_to_open_recovers_plant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (outs, ins) = paper_channels();
        let omega: Vec<f64> = (1..=30).map(|k| k as f64).collect();
        let mut plants = Vec::new();
        let mut cls = Vec::new();
        for _ in &omega {
            let mut g = random_c(&mut rng, 16, 11);
            // in-plane control inputs do not act out of plane
            for c in 4..8 {
                g.column_mut(c).fill(C64::new(0.0, 0.0));
            }
            let k = random_c(&mut rng, 8, 16).scale(0.3);
            cls.push(closed_loop_from(&g, &k, 8).unwrap());
            plants.push(g);
        }
        let cl = FrfDataset::noiseless(omega, cls, outs, ins).unwrap();
        assert_eq!(cl.shape(), (24, 11));
        let open = closed_to_open(&cl).unwrap();
        assert_eq!(open.shape(), (16, 11));
        for (g, t) in open.response().iter().zip(&plants) {
            assert!((g - t).norm() / t.norm() < 1e-10);
        }
        let oop = open.out_of_plane().unwrap();
        assert_eq!(oop.shape(), (16, 7));
    }

    #[test]
    fn no_feedback_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let outs = vec![
            Channel::new("z0", ChannelTag::Zs),
            Channel::new("z1", ChannelTag::Zs),
            Channel::new("uc0", ChannelTag::Uc),
        ];
        let ins = vec![
            Channel::new("r0", ChannelTag::Ruc),
            Channel::new("unc0", ChannelTag::Unc),
        ];
        let mut p = random_c(&mut rng, 3, 2);
        p[(2, 0)] = C64::new(1.0, 0.0);
        p[(2, 1)] = C64::new(0.0, 0.0);
        let cl = FrfDataset::noiseless(vec![1.0], vec![p.clone()], outs, ins).unwrap();
        let open = closed_to_open(&cl).unwrap();
        assert!((open.response()[0].clone() - p.rows(0, 2)).norm() < 1e-15);
    }

    #[test]
    fn singular_input_block_reported() {
        let outs = vec![Channel::new("z0", ChannelTag::Zs), Channel::new("uc0", ChannelTag::Uc)];
        let ins = vec![Channel::new("r0", ChannelTag::Ruc)];
        let p = CMatrix::from_element(2, 1, C64::new(0.0, 0.0));
        let cl = FrfDataset::noiseless(vec![1.0], vec![p], outs, ins).unwrap();
        let err = closed_to_open(&cl).unwrap_err();
        assert!(err.is_numerical());
    }

    fn delayed(tau: f64) -> FrfDataset {
        let omega: Vec<f64> = (1..=100).map(|k| k as f64 * 10.0).collect();
        let resp = omega
            .iter()
            .map(|w| CMatrix::from_element(1, 1, C64::from_polar(3.0 / (1.0 + w / 500.0), -w * tau)))
            .collect();
        FrfDataset::unlabeled(omega, resp).unwrap()
    }

    fn top_slope(d: &FrfDataset) -> f64 {
        let ph = unwrap_phase(&d.response().iter().map(|g| g[(0, 0)]).collect::<Vec<_>>());
        phase_slope(&d.omega()[90..], &ph[90..])
    }

    #[test]
    fn delay_compensation() {
        let tau = 1e-3;
        let d = delayed(tau);
        assert_eq!(compensate_delay(&d, 0.0).unwrap(), d);
        let c = compensate_delay(&d, tau).unwrap();
        let reference = delayed(0.0);
        for (g, r) in c.response().iter().zip(reference.response()) {
            assert!((g[(0, 0)] - r[(0, 0)]).norm() < 1e-12);
        }
        let (est, entry) = estimate_delay(&d).unwrap();
        assert_eq!(entry, (0, 0));
        let before = top_slope(&d);
        let after = top_slope(&compensate_delay(&d, est).unwrap());
        assert!(after.abs() < 0.01 * before.abs(), "{est} {before} {after}");
    }

    #[test]
    fn frf_text_round_trip_and_rejects_nan() {
        let (outs, ins) = paper_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let resp = (0..3).map(|_| random_c(&mut rng, 24, 11)).collect();
        let d = FrfDataset::noiseless(vec![1.0, 2.0, 4.0], resp, outs, ins).unwrap();
        let text = d.to_text();
        assert_eq!(FrfDataset::from_text(&text).unwrap(), d);
        let bad = text.replacen("\n0 0 0 1.0000000000000000e0 ", "\n0 0 0 NaN ", 1);
        assert_ne!(bad, text);
        assert!(FrfDataset::from_text(&bad).is_err());
    }
}
