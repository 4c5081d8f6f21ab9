//! Anchor, positive and negative selection for the pixel contrastive loss.
//!
//! Pixels are addressed by their flat index into a `[B, H, W]` grid. Vectors
//! are gathered from a [`ReprBatch`] on demand so the caller decides which
//! network (student or teacher) supplies them.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::partition::EntropyMap;
use crate::tensor::{LabelMap, ProbBatch, ReprBatch};

/// Norm below which a positive center is treated as degenerate.
pub const MIN_CENTER_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Positive threshold: anchors need `p(c) > delta_p`.
    pub delta_p: f64,
    /// Low rank threshold.
    pub r_l: usize,
    /// High rank threshold, clamped to the class count.
    pub r_h: usize,
    /// Anchors sampled per class.
    pub anchors_per_class: usize,
    /// Negatives sampled per anchor.
    pub negatives_per_anchor: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.3,
            r_l: 3,
            r_h: 20,
            anchors_per_class: 50,
            negatives_per_anchor: 256,
        }
    }
}

impl SamplingConfig {
    pub fn effective_r_h(&self, classes: usize) -> usize {
        self.r_h.min(classes)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta_p) {
            return Err(Error::InvalidArgument(format!(
                "delta_p {} outside [0, 1)",
                self.delta_p
            )));
        }
        if self.r_l >= self.effective_r_h(classes) {
            return Err(Error::InvalidArgument(format!(
                "need r_l < r_h after clamping to {classes} classes, got r_l={} r_h={}",
                self.r_l,
                self.effective_r_h(classes)
            )));
        }
        if self.anchors_per_class == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::InvalidArgument(
                "anchors_per_class and negatives_per_anchor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Which entropy test qualifies an unlabeled pixel as a negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeFilter {
    /// `H > gamma`: only unreliable pixels.
    Unreliable,
    /// `H <= gamma`: only reliable pixels.
    Reliable,
    /// No entropy test.
    All,
}

impl NegativeFilter {
    pub fn admits(self, entropy: f64, gamma: f64) -> bool {
        match self {
            NegativeFilter::Unreliable => entropy > gamma,
            NegativeFilter::Reliable => entropy <= gamma,
            NegativeFilter::All => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NegativeFilter::Unreliable => "unreliable",
            NegativeFilter::Reliable => "reliable",
            NegativeFilter::All => "all",
        }
    }
}

impl std::str::FromStr for NegativeFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unreliable" => Ok(NegativeFilter::Unreliable),
            "reliable" => Ok(NegativeFilter::Reliable),
            "all" => Ok(NegativeFilter::All),
            other => Err(Error::InvalidArgument(format!("unknown negative filter {other:?}"))),
        }
    }
}

/// Rank of every class at every pixel by descending probability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryOrder {
    classes: usize,
    ranks: Vec<u32>,
}

impl CategoryOrder {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.ranks.len() / self.classes
    }

    pub fn rank(&self, pixel: usize, class: usize) -> usize {
        self.ranks[pixel * self.classes + class] as usize
    }

    pub fn pixel_ranks(&self, pixel: usize) -> &[u32] {
        &self.ranks[pixel * self.classes..(pixel + 1) * self.classes]
    }
}

/// Descending argsort per pixel; equal probabilities keep ascending class order.
pub fn category_order(p: &ProbBatch) -> CategoryOrder {
    let c = p.classes();
    let mut ranks = vec![0u32; p.pixels() * c];
    let mut idx: Vec<usize> = Vec::with_capacity(c);
    for (px, probs) in p.iter_pixels().enumerate() {
        idx.clear();
        idx.extend(0..c);
        // stable sort keeps ascending class index among ties
        idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let out = &mut ranks[px * c..(px + 1) * c];
        for (rank, &class) in idx.iter().enumerate() {
            out[class] = rank as u32;
        }
    }
    CategoryOrder { classes: c, ranks }
}

/// Pixels labeled `c` (ground truth or pseudo-label) with `p(c) > delta_p`.
///
/// IGNORE pixels never qualify, so the same predicate serves labeled and
/// pseudo-labeled images.
pub fn anchor_pixels(labels: &LabelMap, p: &ProbBatch, class: usize, delta_p: f64) -> Vec<usize> {
    labels
        .as_slice()
        .iter()
        .enumerate()
        .filter(|&(px, &l)| l == class as i32 && p.pixel(px)[class] > delta_p)
        .map(|(px, _)| px)
        .collect()
}

pub fn gather(reprs: &ReprBatch, pixels: &[usize]) -> Vec<Vec<f64>> {
    pixels.iter().map(|&px| reprs.pixel(px).to_vec()).collect()
}

/// Candidate anchors of class `c` on a labeled batch.
pub fn labeled_anchors(
    reprs: &ReprBatch,
    y: &LabelMap,
    p: &ProbBatch,
    class: usize,
    cfg: &SamplingConfig,
) -> Vec<Vec<f64>> {
    gather(reprs, &anchor_pixels(y, p, class, cfg.delta_p))
}

/// Candidate anchors of class `c` on a pseudo-labeled batch.
pub fn unlabeled_anchors(
    reprs: &ReprBatch,
    pseudo: &LabelMap,
    p: &ProbBatch,
    class: usize,
    cfg: &SamplingConfig,
) -> Vec<Vec<f64>> {
    gather(reprs, &anchor_pixels(pseudo, p, class, cfg.delta_p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRef {
    pub source: Source,
    pub pixel: usize,
}

/// Per-class anchor candidates, tagged by source batch and pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    pub per_class: Vec<Vec<PixelRef>>,
}

impl AnchorSet {
    /// Union of labeled and pseudo-labeled candidates for every class.
    pub fn build(
        labeled: Option<(&LabelMap, &ProbBatch)>,
        unlabeled: Option<(&LabelMap, &ProbBatch)>,
        classes: usize,
        delta_p: f64,
    ) -> Self {
        let per_class = (0..classes)
            .map(|c| {
                let mut out = Vec::new();
                if let Some((y, p)) = labeled {
                    out.extend(anchor_pixels(y, p, c, delta_p).into_iter().map(|pixel| PixelRef {
                        source: Source::Labeled,
                        pixel,
                    }));
                }
                if let Some((y, p)) = unlabeled {
                    out.extend(anchor_pixels(y, p, c, delta_p).into_iter().map(|pixel| PixelRef {
                        source: Source::Unlabeled,
                        pixel,
                    }));
                }
                out
            })
            .collect();
        Self { per_class }
    }
}

/// Why a class produced no contrastive term this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    NoAnchors,
    DegenerateCenter,
    EmptyBank,
}

/// Mean of the anchor representations.
pub fn positive_center<V: AsRef<[f64]>>(anchors: &[V]) -> std::result::Result<Vec<f64>, Skip> {
    let first = anchors.first().ok_or(Skip::NoAnchors)?;
    let mut center = vec![0.0; first.as_ref().len()];
    for a in anchors {
        for (s, &v) in center.iter_mut().zip(a.as_ref()) {
            *s += v;
        }
    }
    let n = anchors.len() as f64;
    center.iter_mut().for_each(|s| *s /= n);
    let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_CENTER_NORM {
        return Err(Skip::DegenerateCenter);
    }
    Ok(center)
}

/// Labeled negative indicator: `y != c` and `rank(c) < r_l`.
pub fn negative_indicator_labeled(
    y: &LabelMap,
    order: &CategoryOrder,
    class: usize,
    cfg: &SamplingConfig,
) -> Vec<bool> {
    y.as_slice()
        .iter()
        .enumerate()
        .map(|(px, &l)| l != class as i32 && order.rank(px, class) < cfg.r_l)
        .collect()
}

/// Unlabeled negative indicator: `H > gamma` and `r_l <= rank(c) < r_h`.
pub fn negative_indicator_unlabeled(
    e: &EntropyMap,
    gamma: f64,
    order: &CategoryOrder,
    class: usize,
    cfg: &SamplingConfig,
) -> Vec<bool> {
    negative_indicator_unlabeled_with(NegativeFilter::Unreliable, e, gamma, order, class, cfg)
}

/// Unlabeled negative indicator with a configurable entropy test.
pub fn negative_indicator_unlabeled_with(
    filter: NegativeFilter,
    e: &EntropyMap,
    gamma: f64,
    order: &CategoryOrder,
    class: usize,
    cfg: &SamplingConfig,
) -> Vec<bool> {
    let r_h = cfg.effective_r_h(order.classes());
    e.as_slice()
        .iter()
        .enumerate()
        .map(|(px, &h)| {
            let r = order.rank(px, class);
            filter.admits(h, gamma) && cfg.r_l <= r && r < r_h
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Negative {
    pub at: PixelRef,
    pub vector: Vec<f64>,
}

/// Per-class negatives in pixel order, labeled batch first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub per_class: Vec<Vec<Negative>>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_from(&self, source: Source) -> usize {
        self.per_class
            .iter()
            .flatten()
            .filter(|n| n.at.source == source)
            .count()
    }
}

/// Masks for one source batch: one indicator vector per class.
pub struct NegativeMasks<'a> {
    pub masks: &'a [Vec<bool>],
    pub reprs: &'a ReprBatch,
}

/// Gathers the representations selected by the per-class indicators.
pub fn collect_negatives(
    labeled: Option<NegativeMasks<'_>>,
    unlabeled: Option<NegativeMasks<'_>>,
    classes: usize,
) -> Result<NegativeSet> {
    let mut per_class: Vec<Vec<Negative>> = vec![Vec::new(); classes];
    for (source, batch) in [(Source::Labeled, labeled), (Source::Unlabeled, unlabeled)] {
        let Some(batch) = batch else { continue };
        if batch.masks.len() != classes {
            return Err(Error::Shape(format!(
                "expected {classes} class masks, got {}",
                batch.masks.len()
            )));
        }
        for (c, mask) in batch.masks.iter().enumerate() {
            if mask.len() != batch.reprs.dims().pixels() {
                return Err(Error::Shape(format!(
                    "mask for class {c} has {} pixels, representations have {}",
                    mask.len(),
                    batch.reprs.dims().pixels()
                )));
            }
            per_class[c].extend(mask.iter().enumerate().filter(|(_, &m)| m).map(|(pixel, _)| {
                Negative {
                    at: PixelRef { source, pixel },
                    vector: batch.reprs.pixel(pixel).to_vec(),
                }
            }));
        }
    }
    Ok(NegativeSet { per_class })
}

/// Up to `m` candidates drawn uniformly without replacement.
pub fn sample_anchors<T: Clone, R: Rng + ?Sized>(candidates: &[T], m: usize, rng: &mut R) -> Vec<T> {
    if candidates.len() <= m {
        return candidates.to_vec();
    }
    index::sample(rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}
