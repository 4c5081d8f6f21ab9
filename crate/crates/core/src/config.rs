//! Run configuration.
//!
//! A flat TOML file of typed `key = value` pairs. Unknown keys are rejected
//! and every field is range-checked after parsing. Defaults for the
//! contrastive and partition hyper-parameters are `(M, N) = (50, 256)`,
//! `delta_p = 0.3`, `(lambda_c, eta) = (0.1, 1)`, `tau = 0.5`,
//! `alpha0 = 0.2`, `(r_l, r_h) = (3, 20)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::sampling::{NegativeFilter, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaScope {
    /// Threshold from the current unlabeled mini-batch.
    Batch,
    /// Threshold from all unlabeled images at the start of each epoch.
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveLoss {
    Infonce,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // synthetic data
    pub images: usize,
    pub val_images: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub overlap: f64,
    pub label_fraction: f64,
    pub regions: usize,
    pub region_share: f64,

    // model
    pub hidden: usize,
    pub repr_dim: usize,

    // optimisation
    pub epochs: usize,
    pub warm_start: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub seed: u64,

    // pseudo-labeling and contrastive terms
    pub anchors_per_class: usize,
    pub negatives_per_anchor: usize,
    pub delta_p: f64,
    pub lambda_c: f64,
    pub eta: f64,
    pub tau: f64,
    pub alpha0: f64,
    pub r_l: usize,
    pub r_h: usize,
    pub bank_background: usize,
    pub bank_foreground: usize,
    pub background_class: usize,
    pub negative_filter: NegativeFilter,
    pub gamma_scope: GammaScope,
    pub contrastive_loss: ContrastiveLoss,
    pub eval_model: EvalModel,
    pub check_invariants: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            images: 64,
            val_images: 32,
            height: 16,
            width: 16,
            classes: 6,
            feature_dim: 8,
            overlap: 0.6,
            label_fraction: 0.0625,
            regions: 8,
            region_share: 0.5,

            hidden: 32,
            repr_dim: 16,

            epochs: 30,
            warm_start: 1,
            base_lr: 0.5,
            sgd_momentum: 0.0,
            weight_decay: 0.0,
            ema_momentum: 0.99,
            batch_size: 4,
            seed: 0,

            anchors_per_class: 50,
            negatives_per_anchor: 256,
            delta_p: 0.3,
            lambda_c: 0.1,
            eta: 1.0,
            tau: 0.5,
            alpha0: 0.2,
            r_l: 3,
            r_h: 20,
            bank_background: 5000,
            bank_foreground: 3000,
            background_class: 0,
            negative_filter: NegativeFilter::Unreliable,
            gamma_scope: GammaScope::Batch,
            contrastive_loss: ContrastiveLoss::Infonce,
            eval_model: EvalModel::Student,
            check_invariants: false,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    check((0.0..=1.0).contains(&v), || format!("{name} = {v} outside [0, 1]"))
}

fn positive(name: &str, v: usize) -> Result<()> {
    check(v > 0, || format!("{name} must be positive"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are plain scalars")
    }

    pub fn validate(&self) -> Result<()> {
        positive("images", self.images)?;
        positive("val_images", self.val_images)?;
        positive("height", self.height)?;
        positive("width", self.width)?;
        check(self.classes >= 2, || "classes must be >= 2".into())?;
        positive("feature_dim", self.feature_dim)?;
        check(self.overlap >= 0.0 && self.overlap.is_finite(), || {
            format!("overlap = {} must be finite and >= 0", self.overlap)
        })?;
        check(self.label_fraction > 0.0 && self.label_fraction <= 1.0, || {
            format!("label_fraction = {} outside (0, 1]", self.label_fraction)
        })?;
        positive("regions", self.regions)?;
        unit("region_share", self.region_share)?;
        check(self.repr_dim >= 2, || "repr_dim must be >= 2".into())?;

        positive("epochs", self.epochs)?;
        check(self.warm_start <= self.epochs, || {
            format!("warm_start = {} exceeds epochs = {}", self.warm_start, self.epochs)
        })?;
        check(self.base_lr > 0.0 && self.base_lr.is_finite(), || {
            format!("base_lr = {} must be positive", self.base_lr)
        })?;
        check((0.0..1.0).contains(&self.sgd_momentum), || {
            format!("sgd_momentum = {} outside [0, 1)", self.sgd_momentum)
        })?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), || {
            format!("weight_decay = {} must be >= 0", self.weight_decay)
        })?;
        check((0.0..1.0).contains(&self.ema_momentum), || {
            format!("ema_momentum = {} outside [0, 1)", self.ema_momentum)
        })?;
        positive("batch_size", self.batch_size)?;

        unit("alpha0", self.alpha0)?;
        check(self.lambda_c >= 0.0 && self.lambda_c.is_finite(), || {
            format!("lambda_c = {} must be >= 0", self.lambda_c)
        })?;
        check(self.eta >= 0.0 && self.eta.is_finite(), || {
            format!("eta = {} must be >= 0", self.eta)
        })?;
        check(self.tau > 0.0 && self.tau.is_finite(), || {
            format!("tau = {} must be positive", self.tau)
        })?;
        positive("bank_background", self.bank_background)?;
        positive("bank_foreground", self.bank_foreground)?;
        check(self.background_class < self.classes, || {
            format!("background_class = {} not a class", self.background_class)
        })?;
        self.sampling()
            .validate(self.classes)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            delta_p: self.delta_p,
            r_l: self.r_l,
            r_h: self.r_h,
            anchors_per_class: self.anchors_per_class,
            negatives_per_anchor: self.negatives_per_anchor,
        }
    }

    /// Weights with `lambda_u` left at `eta`; the trainer replaces it per batch.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_u: self.eta,
            lambda_c: self.lambda_c,
            eta: self.eta,
            tau: self.tau,
        }
    }

    /// Whether any unlabeled or contrastive term can be non-zero.
    pub fn semi_supervised(&self) -> bool {
        self.eta > 0.0 || self.lambda_c > 0.0
    }

    pub fn labeled_count(&self) -> usize {
        ((self.images as f64 * self.label_fraction).round() as usize).clamp(1, self.images)
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n_l = self.labeled_count();
        let n_u = self.images - n_l;
        n_l.max(n_u).div_ceil(self.batch_size)
    }
}
