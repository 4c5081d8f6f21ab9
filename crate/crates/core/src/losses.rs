//! Loss terms with closed-form gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its single differentiable input: logits for cross-entropy, anchor vectors
//! for the contrastive losses. Positives and negatives are constants.

use crate::error::{Error, Result};
use crate::tensor::IGNORE;

/// Below this norm a vector has no direction and cosine similarity is undefined.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Same layout as the differentiable input.
    pub grad: Vec<f64>,
}

impl LossOutput {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub eta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_c: 0.1,
            eta: 1.0,
            tau: 0.5,
        }
    }
}

/// `L_s + lambda_u L_u + lambda_c L_c`.
pub fn total_loss(l_s: f64, l_u: f64, l_c: f64, w: &LossWeights) -> f64 {
    l_s + w.lambda_u * l_u + w.lambda_c * l_c
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over non-IGNORE rows of `[P, C]` logits.
///
/// The gradient is `(softmax - onehot) / count` on counted rows and zero on
/// IGNORE rows. An all-IGNORE batch yields zero loss and zero gradient.
pub fn cross_entropy(logits: &[f64], classes: usize, targets: &[i32]) -> Result<LossOutput> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits do not match {} targets x {classes} classes",
            logits.len(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut out = LossOutput::zero(logits.len());
    if count == 0 {
        return Ok(out);
    }
    let inv = 1.0 / count as f64;
    for (row, (&t, g)) in logits
        .chunks_exact(classes)
        .zip(targets.iter().zip(out.grad.chunks_exact_mut(classes)))
    {
        if t == IGNORE {
            continue;
        }
        if t < 0 || t as usize >= classes {
            return Err(Error::InvalidArgument(format!("target {t} outside [0, {classes})")));
        }
        let lse = log_sum_exp(row);
        out.value += (lse - row[t as usize]) * inv;
        for (gk, &z) in g.iter_mut().zip(row) {
            *gk = (z - lse).exp() * inv;
        }
        g[t as usize] -= inv;
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of `a` and `b` and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - s * x / (na * na))
        .collect();
    Ok((s, grad))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Contrastive inputs for one class: sampled anchors, their shared positive
/// center, and the negatives drawn for each anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveClass<V = Vec<f64>> {
    pub anchors: Vec<V>,
    pub positive: Vec<f64>,
    /// `negatives[i]` belongs to `anchors[i]`.
    pub negatives: Vec<Vec<V>>,
}

impl<V: AsRef<[f64]>> ContrastiveClass<V> {
    fn check(&self, dim: usize) -> Result<()> {
        if self.negatives.len() != self.anchors.len() {
            return Err(Error::Shape(format!(
                "{} anchors but {} negative lists",
                self.anchors.len(),
                self.negatives.len()
            )));
        }
        let bad = self.positive.len() != dim
            || self.anchors.iter().any(|a| a.as_ref().len() != dim)
            || self.negatives.iter().flatten().any(|n| n.as_ref().len() != dim);
        if bad {
            return Err(Error::Shape(format!("all vectors must have dimension {dim}")));
        }
        Ok(())
    }
}

fn anchor_layout<V: AsRef<[f64]>>(classes: &[ContrastiveClass<V>]) -> Result<(usize, usize)> {
    let dim = classes
        .iter()
        .find(|c| !c.anchors.is_empty())
        .map(|c| c.positive.len())
        .unwrap_or(0);
    let mut count = 0;
    for c in classes {
        if c.anchors.is_empty() {
            continue;
        }
        c.check(dim)?;
        count += c.anchors.len();
    }
    Ok((dim, count))
}

/// Cosine of a fixed anchor against other vectors, keeping what the
/// gradient pass needs.
struct AnchorSims<'a> {
    anchor: &'a [f64],
    norm: f64,
}

impl<'a> AnchorSims<'a> {
    fn new(anchor: &'a [f64]) -> Result<Self> {
        let norm = norm(anchor);
        if norm < MIN_NORM {
            return Err(Error::Degenerate("zero-norm anchor in cosine similarity".into()));
        }
        Ok(Self { anchor, norm })
    }

    /// `(cos, |other|)`.
    fn sim(&self, other: &[f64]) -> Result<(f64, f64)> {
        let nb = norm(other);
        if nb < MIN_NORM {
            return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
        }
        let dot: f64 = self.anchor.iter().zip(other).map(|(x, y)| x * y).sum();
        Ok((dot / (self.norm * nb), nb))
    }

    /// `grad += w * d cos(anchor, other) / d anchor`.
    fn accumulate(&self, grad: &mut [f64], w: f64, other: &[f64], cos: f64, other_norm: f64) {
        let a = w / (self.norm * other_norm);
        let b = w * cos / (self.norm * self.norm);
        for ((g, &x), &y) in grad.iter_mut().zip(self.anchor).zip(other) {
            *g += a * y - b * x;
        }
    }
}

/// Pixel-level InfoNCE averaged over the (class, anchor) pairs present.
///
/// The gradient lists one `D`-vector per anchor, classes in order.
pub fn info_nce<V: AsRef<[f64]>>(classes: &[ContrastiveClass<V>], tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (dim, count) = anchor_layout(classes)?;
    let mut out = LossOutput::zero(count * dim);
    if count == 0 {
        return Ok(out);
    }
    let inv = 1.0 / count as f64;
    let mut slot = 0;
    // (logit, norm) per candidate, positive first
    let mut cache: Vec<(f64, f64)> = Vec::new();
    for class in classes {
        for (anchor, negs) in class.anchors.iter().zip(&class.negatives) {
            let sims = AnchorSims::new(anchor.as_ref())?;
            cache.clear();
            let (sp, np) = sims.sim(&class.positive)?;
            cache.push((sp / tau, np));
            for n in negs {
                let (s, nn) = sims.sim(n.as_ref())?;
                cache.push((s / tau, nn));
            }
            let max = cache.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + cache.iter().map(|c| (c.0 - max).exp()).sum::<f64>().ln();
            out.value += (lse - cache[0].0) * inv;

            let g = &mut out.grad[slot * dim..(slot + 1) * dim];
            let others = std::iter::once(class.positive.as_slice()).chain(negs.iter().map(AsRef::as_ref));
            for (k, (other, &(l, nb))) in others.zip(&cache).enumerate() {
                let w = ((l - lse).exp() - if k == 0 { 1.0 } else { 0.0 }) * inv / tau;
                sims.accumulate(g, w, other, l * tau, nb);
            }
            slot += 1;
        }
    }
    Ok(out)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary alternative: each negative competes with the positive alone,
/// averaged over every (class, anchor, negative) triple present.
pub fn bce_alternative<V: AsRef<[f64]>>(classes: &[ContrastiveClass<V>], tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let (dim, count) = anchor_layout(classes)?;
    let mut out = LossOutput::zero(count * dim);
    let triples: usize = classes
        .iter()
        .flat_map(|c| c.negatives.iter())
        .map(Vec::len)
        .sum();
    if triples == 0 {
        return Ok(out);
    }
    let inv = 1.0 / triples as f64;
    let mut slot = 0;
    for class in classes {
        for (anchor, negs) in class.anchors.iter().zip(&class.negatives) {
            let sims = AnchorSims::new(anchor.as_ref())?;
            let (sp, np) = sims.sim(&class.positive)?;
            let g = &mut out.grad[slot * dim..(slot + 1) * dim];
            let mut w_pos = 0.0;
            for n in negs {
                let n = n.as_ref();
                let (sn, nn) = sims.sim(n)?;
                let x = (sn - sp) / tau;
                out.value += softplus(x) * inv;
                let w = sigmoid(x) * inv / tau;
                sims.accumulate(g, w, n, sn, nn);
                w_pos -= w;
            }
            sims.accumulate(g, w_pos, &class.positive, sp, np);
            slot += 1;
        }
    }
    Ok(out)
}
