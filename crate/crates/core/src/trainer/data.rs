//! Seeded synthetic dense-labeling task.
//!
//! Each image is a Voronoi partition of the grid into regions, each region
//! painted with one class. A pixel's feature is its class mean plus noise
//! scaled by `overlap`; part of the noise is shared by the whole region
//! (appearance variation), the rest is per pixel. With `overlap = 0` the
//! classes are separable by their means.

use std::f64::consts::SQRT_2;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{GridDims, LabelMap};

const SPLIT_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub overlap: f64,
    pub regions: usize,
    pub region_share: f64,
}

impl DataConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            height: cfg.height,
            width: cfg.width,
            classes: cfg.classes,
            feature_dim: cfg.feature_dim,
            overlap: cfg.overlap,
            regions: cfg.regions,
            region_share: cfg.region_share,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dims: GridDims,
    pub feature_dim: usize,
    /// `[n, H, W, D_in]` row-major.
    pub features: Vec<f64>,
    pub labels: LabelMap,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Class means, shared with the validation set.
    pub class_means: Vec<Vec<f64>>,
}

impl SyntheticDataset {
    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn images(&self) -> usize {
        self.dims.images
    }

    pub fn image_features(&self, image: usize) -> &[f64] {
        let n = self.dims.pixels_per_image() * self.feature_dim;
        &self.features[image * n..(image + 1) * n]
    }

    pub fn image_labels(&self, image: usize) -> &[i32] {
        let n = self.dims.pixels_per_image();
        &self.labels.as_slice()[image * n..(image + 1) * n]
    }

    /// Features of several images stacked into one `[k * H * W, D_in]` block.
    pub fn gather_features(&self, images: &[usize]) -> Vec<f64> {
        images
            .iter()
            .flat_map(|&i| self.image_features(i).iter().copied())
            .collect()
    }

    pub fn gather_labels(&self, images: &[usize]) -> LabelMap {
        let labels = images
            .iter()
            .flat_map(|&i| self.image_labels(i).iter().copied())
            .collect();
        LabelMap::new(self.batch_dims(images.len()), self.classes(), labels)
            .expect("labels come from a validated map")
    }

    pub fn batch_dims(&self, images: usize) -> GridDims {
        GridDims::new(images, self.dims.height, self.dims.width)
    }
}

/// Class means at pairwise distance 2: orthonormal directions scaled by
/// `sqrt(2)` when `classes <= dim`, random directions otherwise.
fn class_means<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while means.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if means.len() < dim {
            for m in &means {
                let dot: f64 = m.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / 2.0;
                v.iter_mut().zip(m).for_each(|(x, a)| *x -= dot * a);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let v: Vec<f64> = v.into_iter().map(|x| x * SQRT_2 / n).collect();
        // distinct means keep overlap = 0 separable
        if means.iter().any(|m| m.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-9)) {
            continue;
        }
        means.push(v);
    }
    means
}

fn paint_images<R: Rng>(
    cfg: &DataConfig,
    n: usize,
    means: &[Vec<f64>],
    rng: &mut R,
) -> (Vec<f64>, Vec<i32>) {
    let (h, w, d) = (cfg.height, cfg.width, cfg.feature_dim);
    let region_sd = cfg.overlap * cfg.region_share.sqrt();
    let pixel_sd = cfg.overlap * (1.0 - cfg.region_share).sqrt();
    let mut features = Vec::with_capacity(n * h * w * d);
    let mut labels = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        let sites: Vec<(f64, f64, usize, Vec<f64>)> = (0..cfg.regions)
            .map(|_| {
                let r = rng.gen::<f64>() * h as f64;
                let c = rng.gen::<f64>() * w as f64;
                let class = rng.gen_range(0..cfg.classes);
                let offset = (0..d)
                    .map(|_| region_sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (r, c, class, offset)
            })
            .collect();
        for row in 0..h {
            for col in 0..w {
                let (pr, pc) = (row as f64 + 0.5, col as f64 + 0.5);
                let nearest = sites
                    .iter()
                    .map(|(r, c, _, _)| (r - pr).powi(2) + (c - pc).powi(2))
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("at least one region");
                let (_, _, class, offset) = &sites[nearest];
                labels.push(*class as i32);
                for k in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push(means[*class][k] + offset[k] + pixel_sd * noise);
                }
            }
        }
    }
    (features, labels)
}

fn validate(cfg: &DataConfig, n: usize) -> Result<()> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if n == 0 || cfg.height == 0 || cfg.width == 0 || cfg.feature_dim == 0 || cfg.regions == 0 {
        return Err(Error::InvalidArgument("dataset extents must be positive".into()));
    }
    if !(cfg.overlap >= 0.0 && cfg.overlap.is_finite()) {
        return Err(Error::InvalidArgument(format!("overlap {} must be finite and >= 0", cfg.overlap)));
    }
    if !(0.0..=1.0).contains(&cfg.region_share) {
        return Err(Error::InvalidArgument(format!("region_share {} outside [0, 1]", cfg.region_share)));
    }
    Ok(())
}

/// Training images with a labeled/unlabeled split. Deterministic in `seed`.
pub fn generate_synthetic(
    cfg: &DataConfig,
    n: usize,
    label_fraction: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    validate(cfg, n)?;
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label_fraction {label_fraction} outside (0, 1]"
        )));
    }
    let mut rng = stream(seed, Stream::Data);
    let means = class_means(cfg.classes, cfg.feature_dim, &mut rng);
    let (features, labels) = paint_images(cfg, n, &means, &mut rng);
    let dims = GridDims::new(n, cfg.height, cfg.width);
    let labels = LabelMap::new(dims, cfg.classes, labels)?;

    let n_labeled = ((n as f64 * label_fraction).round() as usize).clamp(1, n);
    let per_image = dims.pixels_per_image();
    let mut split_rng = stream(seed, Stream::Split);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..SPLIT_RETRIES {
        order.shuffle(&mut split_rng);
        let mut present = vec![false; cfg.classes];
        for &i in &order[..n_labeled] {
            for &l in &labels.as_slice()[i * per_image..(i + 1) * per_image] {
                present[l as usize] = true;
            }
        }
        if present.iter().all(|&p| p) {
            let mut labeled = order[..n_labeled].to_vec();
            let mut unlabeled = order[n_labeled..].to_vec();
            labeled.sort_unstable();
            unlabeled.sort_unstable();
            return Ok(SyntheticDataset {
                dims,
                feature_dim: cfg.feature_dim,
                features,
                labels,
                labeled,
                unlabeled,
                class_means: means,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "no labeled split of {n_labeled} images covers all {} classes after {SPLIT_RETRIES} tries",
        cfg.classes
    )))
}

/// Held-out images drawn with the training set's class means; all labeled.
pub fn generate_validation(
    cfg: &DataConfig,
    train: &SyntheticDataset,
    n: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    validate(cfg, n)?;
    let mut rng = stream(seed, Stream::Validation);
    let (features, labels) = paint_images(cfg, n, &train.class_means, &mut rng);
    let dims = GridDims::new(n, cfg.height, cfg.width);
    Ok(SyntheticDataset {
        dims,
        feature_dim: cfg.feature_dim,
        features,
        labels: LabelMap::new(dims, cfg.classes, labels)?,
        labeled: (0..n).collect(),
        unlabeled: Vec::new(),
        class_means: train.class_means.clone(),
    })
}

/// Training and validation sets for a run configuration.
pub fn generate_for_run(cfg: &RunConfig) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let dc = DataConfig::from_run(cfg);
    let train = generate_synthetic(&dc, cfg.images, cfg.label_fraction, cfg.seed)?;
    let val = generate_validation(&dc, &train, cfg.val_images, cfg.seed)?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            height: 8,
            width: 8,
            classes: 3,
            feature_dim: 4,
            overlap: 0.5,
            regions: 5,
            region_share: 0.5,
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small(), 10, 0.5, 3).unwrap();
        let b = generate_synthetic(&small(), 10, 0.5, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 10, 0.5, 4).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn full_label_fraction_leaves_no_unlabeled() {
        let d = generate_synthetic(&small(), 6, 1.0, 0).unwrap();
        assert_eq!(d.labeled.len(), 6);
        assert!(d.unlabeled.is_empty());
    }

    #[test]
    fn split_is_disjoint_and_covers_classes() {
        let d = generate_synthetic(&small(), 16, 0.25, 11).unwrap();
        assert_eq!(d.labeled.len(), 4);
        assert!(d.labeled.iter().all(|i| !d.unlabeled.contains(i)));
        let y = d.gather_labels(&d.labeled);
        for c in 0..3 {
            assert!(y.as_slice().contains(&c));
        }
    }

    #[test]
    fn impossible_split_errors() {
        let cfg = DataConfig {
            classes: 40,
            regions: 2,
            ..small()
        };
        assert!(generate_synthetic(&cfg, 4, 0.25, 0).is_err());
    }

    #[test]
    fn zero_overlap_features_equal_means() {
        let cfg = DataConfig {
            overlap: 0.0,
            ..small()
        };
        let d = generate_synthetic(&cfg, 2, 0.5, 1).unwrap();
        for (px, &l) in d.labels.as_slice().iter().enumerate() {
            let f = &d.features[px * 4..(px + 1) * 4];
            assert_eq!(f, d.class_means[l as usize].as_slice());
        }
    }
}
