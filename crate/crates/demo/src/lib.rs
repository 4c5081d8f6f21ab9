//! Browser demo: entropy partition of a synthetic image, the training
//! schedules, and a short training run. Build with `wasm-pack build --target web`
//! and serve `www/` next to the generated `pkg/`.

use u2pl::partition::{assign_pseudo_labels_with, compute_entropy, dpa_alpha, entropy_threshold, reliable_fraction};
use u2pl::tensor::GridDims;
use u2pl::trainer::ablation::AblationMode;
use u2pl::trainer::data::{generate_synthetic, DataConfig};
use u2pl::trainer::schedule::poly_lr;
use u2pl::{ProbBatch, RunConfig};
use wasm_bindgen::prelude::*;

const SIDE: usize = 32;
const CLASSES: usize = 5;

/// One image, its teacher-like probabilities and the reliable/unreliable split.
#[wasm_bindgen]
pub struct PartitionView {
    gamma: f64,
    reliable: f64,
    entropy: Vec<f64>,
    pseudo: Vec<i32>,
    truth: Vec<i32>,
}

#[wasm_bindgen]
impl PartitionView {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        SIDE
    }

    #[wasm_bindgen(getter)]
    pub fn classes(&self) -> usize {
        CLASSES
    }

    #[wasm_bindgen(getter)]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[wasm_bindgen(getter)]
    pub fn reliable_fraction(&self) -> f64 {
        self.reliable
    }

    /// Entropy per pixel in nats, row-major.
    pub fn entropy(&self) -> Vec<f64> {
        self.entropy.clone()
    }

    /// Pseudo-label per pixel, `-1` where unreliable.
    pub fn pseudo_labels(&self) -> Vec<i32> {
        self.pseudo.clone()
    }

    pub fn truth(&self) -> Vec<i32> {
        self.truth.clone()
    }
}

/// Partitions a synthetic image at drop fraction `alpha`. Probabilities are a
/// softmax over negative squared distances to the class means.
#[wasm_bindgen]
pub fn partition(overlap: f64, alpha: f64, seed: u64) -> Result<PartitionView, String> {
    let cfg = DataConfig {
        height: SIDE,
        width: SIDE,
        classes: CLASSES,
        feature_dim: 8,
        overlap,
        regions: 10,
        region_share: 0.5,
    };
    let data = generate_synthetic(&cfg, 4, 1.0, seed).map_err(|e| e.to_string())?;
    let mut probs = Vec::with_capacity(SIDE * SIDE * CLASSES);
    for x in data.image_features(0).chunks(cfg.feature_dim) {
        let logits: Vec<f64> = data
            .class_means
            .iter()
            .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let s: f64 = w.iter().sum();
        probs.extend(w.iter().map(|v| v / s));
    }
    let p = ProbBatch::new(GridDims::new(1, SIDE, SIDE), CLASSES, probs).map_err(|e| e.to_string())?;
    let e = compute_entropy(&p);
    let gamma = entropy_threshold(e.as_slice(), alpha).map_err(|e| e.to_string())?;
    let pseudo = assign_pseudo_labels_with(&p, &e, gamma);
    Ok(PartitionView {
        gamma,
        reliable: reliable_fraction(&pseudo),
        entropy: e.as_slice().to_vec(),
        pseudo: pseudo.as_slice().to_vec(),
        truth: data.image_labels(0).to_vec(),
    })
}

/// `epochs` drop fractions followed by `epochs` learning rates, one per epoch
/// with a single iteration each.
#[wasm_bindgen]
pub fn schedules(alpha0: f64, base_lr: f64, epochs: usize) -> Result<Vec<f64>, String> {
    let mut out: Vec<f64> = (0..epochs)
        .map(|t| dpa_alpha(alpha0, t, epochs))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for t in 0..epochs {
        out.push(poly_lr(base_lr, t, epochs).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Trains a small model and returns its metrics CSV. `mode` is one of
/// `unreliable`, `reliable`, `all` or `supervised`.
#[wasm_bindgen]
pub fn train(mode: &str, overlap: f64, epochs: usize, seed: u64) -> Result<String, String> {
    let mode: AblationMode = mode.parse().map_err(|e: u2pl::Error| e.to_string())?;
    let base = RunConfig {
        images: 16,
        val_images: 8,
        label_fraction: 0.25,
        overlap,
        epochs,
        anchors_per_class: 20,
        negatives_per_anchor: 64,
        bank_background: 1000,
        bank_foreground: 600,
        ..RunConfig::default()
    };
    let cfg = mode.apply(&base, seed);
    cfg.validate().map_err(|e| e.to_string())?;
    u2pl::trainer::run(&cfg).map(|o| o.metrics_csv()).map_err(|e| e.to_string())
}
