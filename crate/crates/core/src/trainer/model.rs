//! The assembled network: text encoder, sparse U-Net with per-stage fusion,
//! and the query head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode};
use crate::head::{HeadConfig, HeadOutput, Prediction, QueryHead};
use crate::losses::{area_loss, p2p_loss, seg_loss, total_loss, LossConfig, LossReport};
use crate::params::{Bindings, Init, ParamStore};
use crate::sparse3d::{devoxelize, voxelize, Hierarchy, PointCloud, SparseUNet, UNetConfig, VoxelPointMap};
use crate::tensor::{Tape, Tensor, Var};
use crate::textenc::{TextEncoder, TextEncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub voxel_size: f64,
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub head: HeadConfig,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            unet: UNetConfig::default(),
            text: TextEncoderConfig::default(),
            head: HeadConfig::default(),
            fusion: FusionMode::Pwca,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::Contract(format!("voxel size must be positive, got {}", self.voxel_size)));
        }
        if self.text.dim != self.unet.out_dim {
            return Err(Error::Contract(format!(
                "text width {} must equal the fused feature width {}",
                self.text.dim, self.unet.out_dim
            )));
        }
        Ok(())
    }
}

/// Coordinate-only preprocessing of one cloud, reusable across epochs.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub input: Tensor,
    pub map: VoxelPointMap,
    pub hierarchy: Arc<Hierarchy>,
}

impl PreparedScene {
    pub fn new(cloud: &PointCloud, voxel_size: f64, stages: usize) -> Result<Self> {
        let (voxels, map) = voxelize(cloud, voxel_size)?;
        let hierarchy = Hierarchy::build(voxels.active().clone(), stages)?;
        Ok(Self {
            input: voxels.features().clone(),
            map,
            hierarchy: Arc::new(hierarchy),
        })
    }

    pub fn points(&self) -> usize {
        self.map.point_count()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-point fused features `[N×C]`.
    pub features: Var,
    pub head: HeadOutput,
}

impl ForwardOutput {
    pub fn prediction(&self) -> &Prediction {
        &self.head.prediction
    }
}

fn ensure_finite(tape: &Tape, v: Var, module: &str) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Model(module.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    pub params: ParamStore,
    text: TextEncoder,
    unet: SparseUNet,
    fusion: Fusion,
    head: QueryHead,
}

impl Model {
    /// Builds the network with freshly initialized weights.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let text = TextEncoder::register(&mut params, &mut init, &config.text, vocab_size, "text")?;
        let unet = SparseUNet::register(&mut params, &mut init, &config.unet, "unet")?;
        let fusion = Fusion::register(
            &mut params,
            &mut init,
            "fusion",
            config.text.dim,
            &config.unet.channels,
            config.fusion,
        );
        let head = QueryHead::register(&mut params, &mut init, &config.head, config.unet.out_dim, "head")?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            params,
            text,
            unet,
            fusion,
            head,
        })
    }

    /// The same architecture carrying `params`, which must match it name
    /// for name and shape for shape.
    pub fn with_params(config: &ModelConfig, vocab_size: usize, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, vocab_size, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (name, p) in model.params.iter() {
            let given = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if given.value.shape() != p.value.shape() || given.group != p.group {
                return Err(Error::Format(format!("parameter {name} has the wrong shape or group")));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn fusion_stages(&self) -> &Fusion {
        &self.fusion
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedScene> {
        PreparedScene::new(cloud, self.config.voxel_size, self.config.unet.channels.len())
    }

    /// Full pipeline on bound parameters.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, scene: &PreparedScene, tokens: &[usize]) -> Result<ForwardOutput> {
        let text = self.text.encode(tape, b, tokens)?;
        ensure_finite(tape, text.words, "text encoder")?;
        let words = text.words;
        let input = tape.constant(scene.input.clone());
        let fusion = &self.fusion;
        let out = self.unet.forward(tape, b, &scene.hierarchy, input, &mut |t, stage, v| {
            let fused = fusion.apply(t, b, stage, v, words)?;
            ensure_finite(t, fused, "fusion")?;
            Ok(fused)
        })?;
        ensure_finite(tape, out.features, "sparse U-Net")?;
        let features = devoxelize(tape, out.features, &scene.map)?;
        let head = self.head.forward(tape, b, features, text.sentence)?;
        ensure_finite(tape, head.prediction.logits, "query head")?;
        Ok(ForwardOutput { features, head })
    }

    /// Predicted binary mask without gradient recording.
    pub fn predict(&self, scene: &PreparedScene, tokens: &[usize]) -> Result<Vec<bool>> {
        let mut tape = Tape::inference();
        let b = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &b, scene, tokens)?;
        Ok(out.head.prediction.mask)
    }

    /// Forward, loss, and backward for one sample; returns the loss report
    /// and the parameter gradients.
    pub fn gradients(
        &self,
        scene: &PreparedScene,
        tokens: &[usize],
        mask: &[bool],
        loss: &LossConfig,
        rng: &mut impl Rng,
    ) -> Result<(LossReport, std::collections::BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &b, scene, tokens)?;
        let (total, report) = sample_loss(&mut tape, &out, mask, loss, rng)?;
        tape.backward(total)?;
        Ok((report, b.gradients(&tape)))
    }
}

/// Weighted training loss of one forward pass.
pub fn sample_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    mask: &[bool],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossReport)> {
    let logits = out.head.prediction.logits;
    let seg = seg_loss(tape, logits, mask)?;
    let area = area_loss(tape, logits);
    let p2p = if cfg.lambda_p2p > 0.0 {
        p2p_loss(tape, out.features, mask, cfg, rng)?
    } else {
        None
    };
    let (total, mut report) = total_loss(tape, seg, area, p2p, cfg)?;
    // A disabled term is not a skipped one.
    report.p2p_skipped &= cfg.lambda_p2p > 0.0;
    Ok((total, report))
}
