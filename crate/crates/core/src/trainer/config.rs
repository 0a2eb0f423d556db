use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::error::{format_err, Error, Result};
use crate::fusion::FusionMode;
use crate::head::{HeadConfig, Selection};
use crate::losses::{LossConfig, P2pForm};
use crate::sparse3d::UNetConfig;
use crate::textenc::TextEncoderConfig;

/// Every knob of a training run, as one flat key-value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    /// Receives `metrics.jsonl` and checkpoints.
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Stop after this many optimizer steps, finishing the epoch record.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub text_lr: f64,
    /// Multiplier applied to both rates after every epoch.
    pub decay: f64,
    /// Every `holdout_every`-th scene (by corpus position) is held out for
    /// validation; 0 trains on everything.
    pub holdout_every: usize,
    /// Use only the first N training samples.
    pub train_limit: Option<usize>,
    /// Use only the first N held-out samples.
    pub eval_limit: Option<usize>,
    pub eval_train: bool,
    /// Also write `epoch-NNN.ckpt` for every epoch.
    pub keep_epoch_checkpoints: bool,

    pub voxel_size: f64,
    pub channels: Vec<usize>,
    /// Width of fused point features and of the text encoder.
    pub feature_dim: usize,
    pub max_len: usize,
    pub fusion: FusionMode,

    pub queries: usize,
    pub qmp_layers: usize,
    pub selection: Selection,
    pub zero_queries: bool,

    pub lambda_seg: f64,
    pub lambda_area: f64,
    pub lambda_p2p: f64,
    pub tau: f64,
    pub p2p_form: P2pForm,
    pub max_negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        Self {
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("run"),
            seed: 0,
            epochs: 20,
            batch_size: 2,
            max_steps: None,
            lr: 1e-4,
            text_lr: 2e-5,
            decay: 0.95,
            holdout_every: 5,
            train_limit: None,
            eval_limit: None,
            eval_train: true,
            keep_epoch_checkpoints: false,
            voxel_size: model.voxel_size,
            channels: model.unet.channels,
            feature_dim: model.unet.out_dim,
            max_len: model.text.max_len,
            fusion: model.fusion,
            queries: model.head.queries,
            qmp_layers: model.head.layers,
            selection: model.head.selection,
            zero_queries: model.head.zero_queries,
            lambda_seg: loss.lambda_seg,
            lambda_area: loss.lambda_area,
            lambda_p2p: loss.lambda_p2p,
            tau: loss.tau,
            p2p_form: loss.p2p_form,
            max_negatives: loss.max_negatives,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| format_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| format_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if !(self.lr > 0.0 && self.text_lr > 0.0) {
            return fail(format!("learning rates must be positive: {} {}", self.lr, self.text_lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        self.model().validate()?;
        self.loss().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            voxel_size: self.voxel_size,
            unet: UNetConfig {
                channels: self.channels.clone(),
                out_dim: self.feature_dim,
            },
            text: TextEncoderConfig {
                dim: self.feature_dim,
                max_len: self.max_len,
            },
            head: HeadConfig {
                queries: self.queries,
                layers: self.qmp_layers,
                selection: self.selection,
                zero_queries: self.zero_queries,
            },
            fusion: self.fusion,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_seg: self.lambda_seg,
            lambda_area: self.lambda_area,
            lambda_p2p: self.lambda_p2p,
            tau: self.tau,
            p2p_form: self.p2p_form,
            max_negatives: self.max_negatives,
        }
    }

    /// Base and text rates during epoch `epoch` (0-based).
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        let f = self.decay.powi(epoch as i32);
        (self.lr * f, self.text_lr * f)
    }
}
