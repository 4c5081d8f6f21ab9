//! Reliable/unreliable partition of teacher predictions.
//!
//! Entropy is measured in nats. A pixel is reliable when its entropy is
//! strictly below the threshold `gamma`, which is the `(1 - alpha)` quantile
//! of the entropies in scope; `alpha = 0` maps to `gamma = +inf`.

use crate::error::{Error, Result};
use crate::tensor::{GridDims, LabelMap, ProbBatch, IGNORE};

/// Per-pixel entropy, shape `[B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    dims: GridDims,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(dims: GridDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.pixels() {
            return Err(Error::Shape(format!(
                "expected {} entropies, got {}",
                dims.pixels(),
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Shannon entropy of one distribution with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    // rounding can push a one-hot pixel to -0.0 or a uniform one past ln C
    h.clamp(0.0, (p.len() as f64).ln())
}

pub fn compute_entropy(p: &ProbBatch) -> EntropyMap {
    EntropyMap {
        dims: p.dims(),
        values: p.iter_pixels().map(entropy).collect(),
    }
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
///
/// For sorted `x[0..n]` the position is `h = (n - 1) q` and the result is
/// `x[floor h] + (h - floor h) (x[ceil h] - x[floor h])`.
pub fn quantile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of empty data".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Entropy threshold `gamma` marking the top `alpha` fraction as unreliable.
pub fn entropy_threshold(entropies: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if entropies.is_empty() {
        return Err(Error::InvalidArgument("entropy map has no pixels".into()));
    }
    if alpha == 0.0 {
        return Ok(f64::INFINITY);
    }
    quantile_linear(entropies, 1.0 - alpha)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Argmax label where `H < gamma`, otherwise [`IGNORE`].
pub fn assign_pseudo_labels(p: &ProbBatch, gamma: f64) -> LabelMap {
    assign_pseudo_labels_with(p, &compute_entropy(p), gamma)
}

/// Same as [`assign_pseudo_labels`] with a precomputed entropy map.
pub fn assign_pseudo_labels_with(p: &ProbBatch, e: &EntropyMap, gamma: f64) -> LabelMap {
    let labels = p
        .iter_pixels()
        .zip(e.as_slice())
        .map(|(px, &h)| if h < gamma { argmax(px) as i32 } else { IGNORE })
        .collect();
    LabelMap::new(p.dims(), p.classes(), labels).expect("argmax is always in range")
}

/// Linearly decayed unreliable fraction: `alpha0 (1 - t / total)`.
pub fn dpa_alpha(alpha0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("total epochs must be positive".into()));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!("epoch {t} beyond total {total}")));
    }
    if !(0.0..=1.0).contains(&alpha0) {
        return Err(Error::InvalidArgument(format!("alpha0 {alpha0} outside [0, 1]")));
    }
    Ok(alpha0 * (1.0 - t as f64 / total as f64))
}

/// Unreliable-fraction schedule plus the most recent threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSchedule {
    pub alpha0: f64,
    pub total_epochs: usize,
    pub gamma: f64,
}

impl PartitionSchedule {
    pub fn new(alpha0: f64, total_epochs: usize) -> Result<Self> {
        dpa_alpha(alpha0, 0, total_epochs)?;
        Ok(Self {
            alpha0,
            total_epochs,
            gamma: f64::INFINITY,
        })
    }

    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        dpa_alpha(self.alpha0, epoch, self.total_epochs)
    }

    /// Recomputes `gamma` for `epoch` from the given entropies.
    pub fn update(&mut self, epoch: usize, entropies: &[f64]) -> Result<f64> {
        self.gamma = entropy_threshold(entropies, self.alpha_at(epoch)?)?;
        Ok(self.gamma)
    }
}

/// Adaptive unsupervised weight `eta * total / reliable`, or 0 with no reliable pixel.
pub fn adaptive_weight(pseudo: &LabelMap, eta: f64) -> f64 {
    let reliable = pseudo.labeled_count();
    if reliable == 0 {
        return 0.0;
    }
    eta * pseudo.as_slice().len() as f64 / reliable as f64
}

/// Fraction of pixels carrying a pseudo-label.
pub fn reliable_fraction(pseudo: &LabelMap) -> f64 {
    let n = pseudo.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    pseudo.labeled_count() as f64 / n as f64
}
