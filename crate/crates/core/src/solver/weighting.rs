use crate::frf::FrfDataset;
use crate::{Error, Result};
use nalgebra::DMatrix;

/// Where a weighting came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    InverseFrf,
    Uniform,
    User,
}

impl WeightSource {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightSource::InverseFrf => "inverse-frf",
            WeightSource::Uniform => "uniform",
            WeightSource::User => "user",
        }
    }
}

/// Element-wise (diagonal) weights, one real `p x q` matrix per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingSpec {
    weights: Vec<DMatrix<f64>>,
    w_max: f64,
    source: WeightSource,
}

impl WeightingSpec {
    /// User-supplied weights, clipped at `w_max` (may be infinite).
    pub fn user(weights: Vec<DMatrix<f64>>, w_max: f64) -> Result<Self> {
        Self::build(weights, w_max, WeightSource::User)
    }

    pub fn uniform(n_freq: usize, p: usize, q: usize) -> Self {
        Self {
            weights: vec![DMatrix::from_element(p, q, 1.0); n_freq],
            w_max: f64::INFINITY,
            source: WeightSource::Uniform,
        }
    }

    fn build(mut weights: Vec<DMatrix<f64>>, w_max: f64, source: WeightSource) -> Result<Self> {
        if !(w_max > 0.0) {
            return Err(Error::invalid(format!("w_max must be positive, got {w_max}")));
        }
        if let Some(first) = weights.first() {
            let shape = first.shape();
            if weights.iter().any(|w| w.shape() != shape) {
                return Err(Error::invalid("weight matrices differ in shape"));
            }
        }
        for w in weights.iter_mut() {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid("weights must be finite and nonnegative"));
            }
            w.apply(|v| *v = v.min(w_max));
        }
        Ok(Self { weights, w_max, source })
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.weights[k]
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    pub fn n_freq(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.first().map_or((0, 0), |w| w.shape())
    }

    /// Sub-block for the given outputs and inputs.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let (p, q) = self.shape();
        if rows.iter().any(|&r| r >= p) || cols.iter().any(|&c| c >= q) {
            return Err(Error::invalid("weight selection out of range"));
        }
        Ok(Self {
            weights: self
                .weights
                .iter()
                .map(|w| DMatrix::from_fn(rows.len(), cols.len(), |i, j| w[(rows[i], cols[j])]))
                .collect(),
            ..self.clone()
        })
    }

    pub(crate) fn check(&self, frf: &FrfDataset) -> Result<()> {
        if self.n_freq() != frf.n_freq() || self.shape() != frf.shape() {
            return Err(Error::invalid(format!(
                "weighting {}x{} on {} points does not match FRF {}x{} on {} points",
                self.shape().0,
                self.shape().1,
                self.n_freq(),
                frf.shape().0,
                frf.shape().1,
                frf.n_freq()
            )));
        }
        Ok(())
    }
}

/// `W(k) = min(|1 / G(s_k)|, w_max)` element-wise.
pub fn weighting_inv_truncated(frf: &FrfDataset, w_max: f64) -> Result<WeightingSpec> {
    let mut weights = Vec::with_capacity(frf.n_freq());
    for (k, g) in frf.response().iter().enumerate() {
        if let Some(idx) = g.iter().position(|v| v.norm() == 0.0) {
            let (i, j) = (idx % g.nrows(), idx / g.nrows());
            return Err(Error::invalid(format!(
                "zero FRF entry {} <- {} at omega = {}",
                channel_name(frf, true, i),
                channel_name(frf, false, j),
                frf.omega()[k]
            )));
        }
        weights.push(g.map(|v| 1.0 / v.norm()));
    }
    WeightingSpec::build(weights, w_max, WeightSource::InverseFrf)
}

pub fn uniform_weighting(frf: &FrfDataset) -> WeightingSpec {
    let (p, q) = frf.shape();
    WeightingSpec::uniform(frf.n_freq(), p, q)
}

/// Default clipping level: the 95th percentile of the inverse-FRF weights
/// on the bins below `omega_limit` (typically the first flexible resonance).
pub fn w_max_heuristic(frf: &FrfDataset, omega_limit: f64) -> Result<f64> {
    let mut w: Vec<f64> = frf
        .omega()
        .iter()
        .zip(frf.response())
        .filter(|(om, _)| **om < omega_limit)
        .flat_map(|(_, g)| g.iter().map(|v| 1.0 / v.norm()).collect::<Vec<_>>())
        .filter(|v| v.is_finite())
        .collect();
    if w.is_empty() {
        return Err(Error::invalid(format!("no FRF bins below omega = {omega_limit}")));
    }
    w.sort_by(f64::total_cmp);
    let idx = ((w.len() - 1) as f64 * 0.95).round() as usize;
    Ok(w[idx])
}

fn channel_name(frf: &FrfDataset, output: bool, i: usize) -> String {
    let list = if output { frf.outputs() } else { frf.inputs() };
    list.get(i).map_or_else(|| i.to_string(), |c| c.label.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{CMatrix, C64};

    fn flat(mag: f64) -> FrfDataset {
        let resp = (0..5)
            .map(|k| CMatrix::from_element(2, 3, C64::from_polar(mag, k as f64)))
            .collect();
        FrfDataset::unlabeled((1..=5).map(|k| k as f64).collect(), resp).unwrap()
    }

    #[test]
    fn reciprocal_and_clip() {
        let w = weighting_inv_truncated(&flat(0.5), 10.0).unwrap();
        assert!(w.weights().iter().flatten().all(|&v| (v - 2.0).abs() < 1e-15));
        let w = weighting_inv_truncated(&flat(0.01), 10.0).unwrap();
        assert!(w.weights().iter().flatten().all(|&v| v == 10.0));
        assert_eq!(w.source(), WeightSource::InverseFrf);
    }

    #[test]
    fn zero_entry_named() {
        let mut d = flat(1.0);
        let mut resp = d.response().to_vec();
        resp[2][(1, 2)] = C64::new(0.0, 0.0);
        d = FrfDataset::unlabeled(d.omega().to_vec(), resp).unwrap();
        let msg = weighting_inv_truncated(&d, 10.0).unwrap_err().to_string();
        assert!(msg.contains("y1 <- u2"), "{msg}");
    }

    #[test]
    fn heuristic_percentile() {
        let resp = (1..=100)
            .map(|k| CMatrix::from_element(1, 1, C64::new(1.0 / k as f64, 0.0)))
            .collect();
        let d = FrfDataset::unlabeled((1..=100).map(|k| k as f64).collect(), resp).unwrap();
        let w = w_max_heuristic(&d, 50.5).unwrap();
        assert!((w - 48.0).abs() < 1e-9, "{w}");
        assert!(w_max_heuristic(&d, 0.5).is_err());
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(WeightingSpec::user(vec![DMatrix::from_element(1, 1, -1.0)], 1.0).is_err());
        assert!(WeightingSpec::user(vec![DMatrix::from_element(1, 1, 1.0)], 0.0).is_err());
    }
}
