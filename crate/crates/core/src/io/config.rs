use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_json_atomic};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::KrmConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Flat run configuration read from a JSON object. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub image_depth: usize,
    pub max_len: usize,
    pub text_depth: usize,
    /// Shared width of both encoders and the KRM.
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub krm_layers: usize,
    pub init_std: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,

    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_peak: f64,
    pub lr_warmup_start: f64,
    pub alpha: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub symmetric_itc: bool,
    pub freeze_text: bool,
    pub max_steps: Option<usize>,

    /// Size of the entity set drawn from the training reports.
    pub entity_set_size: usize,
    /// Decision threshold for F1, ACC and MCC.
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::default(), &TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_parts(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            image_size: model.image.image_size,
            patch_size: model.image.patch_size,
            image_depth: model.image.depth,
            max_len: model.text.max_len,
            text_depth: model.text.depth,
            d: model.image.d,
            heads: model.image.heads,
            mlp_ratio: model.image.mlp_ratio,
            krm_layers: model.krm.layers,
            init_std: model.init_std,
            tau_init: model.tau_init,
            tau_min: model.tau_min,
            tau_max: model.tau_max,
            batch_size: train.batch_size,
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            lr_peak: train.lr_peak,
            lr_warmup_start: train.lr_warmup_start,
            alpha: train.alpha,
            seed: train.seed,
            deterministic: train.deterministic,
            weight_decay: train.weight_decay,
            grad_clip: train.grad_clip,
            symmetric_itc: train.symmetric_itc,
            freeze_text: train.freeze_text,
            max_steps: train.max_steps,
            entity_set_size: 16,
            threshold: 0.5,
        }
    }

    /// Model configuration; the text vocabulary size is filled in when the
    /// model is built.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image: ImageEncoderConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                depth: self.image_depth,
                d: self.d,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            text: TextEncoderConfig {
                vocab_size: TextEncoderConfig::default().vocab_size,
                max_len: self.max_len,
                depth: self.text_depth,
                d: self.d,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            krm: KrmConfig {
                layers: self.krm_layers,
                d: self.d,
                heads: self.heads,
            },
            init_std: self.init_std,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            lr_peak: self.lr_peak,
            lr_warmup_start: self.lr_warmup_start,
            alpha: self.alpha,
            seed: self.seed,
            deterministic: self.deterministic,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            symmetric_itc: self.symmetric_itc,
            freeze_text: self.freeze_text,
            max_steps: self.max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.entity_set_size == 0 {
            return Err(Error::InvalidArgument("entity_set_size must be >= 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate().map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_parts() {
        let c = RunConfig::default();
        assert_eq!(c.model_config(), ModelConfig::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.lr_peak, 5e-5);
        assert_eq!(c.lr_warmup_start, 1e-6);
        assert_eq!(c.alpha, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"batch_size": 4, "d": 16, "alpha": 0.5}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.model_config().krm.d, 16);
        assert_eq!(c.train_config().alpha, 0.5);
        assert_eq!(c.epochs, 100);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"bacth_size": 4}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"batch_size": 1}"#).unwrap();
        let err = RunConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("run.json"), "{err}");
    }

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let c = RunConfig {
            seed: 7,
            max_steps: Some(3),
            ..RunConfig::default()
        };
        c.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), c);
    }
}
