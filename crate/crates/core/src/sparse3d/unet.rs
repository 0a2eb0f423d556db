use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::conv::{parent_of, ConvPlan};
use super::{ActiveSet, POINT_DIM};
use crate::error::{Error, Result};
use crate::params::{Affine, Bindings, Init, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

// Surface voxels see far fewer than 27 active neighbors; initialize for a
// typical occupancy instead of the dense fan-in.
const EXPECTED_NEIGHBORS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Encoder width per stage; the stage count is the length.
    pub channels: Vec<usize>,
    /// Width of the fused per-voxel output feature.
    pub out_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 48, 64, 80],
            out_dim: 64,
        }
    }
}

/// Active sets and kernel maps for every U-Net level of one input. Depends
/// only on coordinates, so it is built once per scene and reused.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    levels: Vec<Arc<ActiveSet>>,
    submanifold: Vec<ConvPlan>,
    down: Vec<ConvPlan>,
    parents: Vec<Arc<[usize]>>,
}

impl Hierarchy {
    pub fn build(base: Arc<ActiveSet>, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Contract("U-Net needs at least one stage".into()));
        }
        let mut levels = vec![base];
        let mut down = Vec::new();
        let mut parents = Vec::new();
        for stage in 0..stages {
            let level = &levels[stage];
            if level.is_empty() {
                return Err(Error::Degenerate(format!(
                    "encoder stage {} has no active voxels",
                    stage + 1
                )));
            }
            if stage + 1 == stages {
                break;
            }
            let plan = ConvPlan::strided(level);
            let coarse = plan.output.clone();
            let parent: Vec<usize> = level
                .coords()
                .iter()
                .map(|c| coarse.get(&parent_of(c)).expect("parent cell is active"))
                .collect();
            parents.push(parent.into());
            down.push(plan);
            levels.push(coarse);
        }
        let submanifold = levels.iter().map(ConvPlan::submanifold).collect();
        Ok(Self {
            levels,
            submanifold,
            down,
            parents,
        })
    }

    pub fn levels(&self) -> &[Arc<ActiveSet>] {
        &self.levels
    }

    pub fn base(&self) -> &Arc<ActiveSet> {
        &self.levels[0]
    }

    /// For each voxel of level `l`, its parent row in level `l + 1`.
    pub fn parents(&self, level: usize) -> &Arc<[usize]> {
        &self.parents[level]
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: String,
    bias: String,
}

impl ConvLayer {
    fn register(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(
            &weight,
            init.he(&[3, 3, 3, cin, cout], cin * EXPECTED_NEIGHBORS),
            ParamGroup::Base,
        );
        store.insert(&bias, Tensor::zeros(&[cout]), ParamGroup::Base);
        Self { weight, bias }
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var, plan: &ConvPlan) -> Result<Var> {
        let y = tape.sparse_conv(x, b.var(&self.weight), plan.map.clone())?;
        let y = tape.add_bias(y, b.var(&self.bias))?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    down: Option<ConvLayer>,
}

/// Outputs of one U-Net pass.
#[derive(Clone, Debug)]
pub struct UNetOutput {
    /// Encoder stage features after fusion, finest first.
    pub stages: Vec<Var>,
    /// Per-voxel fused feature at the base resolution.
    pub features: Var,
}

/// Sparse U-Net: per stage two submanifold convolutions and a stride-2
/// downsample (except the last), then a decoder that copies each coarse
/// cell's feature to its children, concatenates the encoder skip, and
/// convolves.
#[derive(Clone, Debug)]
pub struct SparseUNet {
    config: UNetConfig,
    encoder: Vec<EncoderStage>,
    decoder: Vec<ConvLayer>,
    head: Affine,
}

impl SparseUNet {
    pub fn register(store: &mut ParamStore, init: &mut Init, config: &UNetConfig, prefix: &str) -> Result<Self> {
        let ch = &config.channels;
        if ch.is_empty() || ch.iter().any(|&c| c == 0) || config.out_dim == 0 {
            return Err(Error::Contract(format!("invalid U-Net widths {ch:?}")));
        }
        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = POINT_DIM;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("{prefix}.enc{}", i + 1);
            let conv_a = ConvLayer::register(store, init, &format!("{name}.conv_a"), cin, c);
            let conv_b = ConvLayer::register(store, init, &format!("{name}.conv_b"), c, c);
            let down = (i + 1 < ch.len())
                .then(|| ConvLayer::register(store, init, &format!("{name}.down"), c, c));
            encoder.push(EncoderStage { conv_a, conv_b, down });
            cin = c;
        }
        let decoder = (0..ch.len() - 1)
            .map(|i| {
                ConvLayer::register(store, init, &format!("{prefix}.dec{}", i + 1), ch[i + 1] + ch[i], ch[i])
            })
            .collect();
        let head = Affine::register(store, init, &format!("{prefix}.out"), ch[0], config.out_dim, ParamGroup::Base);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Runs the network on base-level voxel features. `fuse(tape, stage, V)`
    /// is applied to every encoder stage output; its result feeds both the
    /// next stage and the skip connection, and must keep the shape of `V`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        hierarchy: &Hierarchy,
        input: Var,
        fuse: &mut dyn FnMut(&mut Tape, usize, Var) -> Result<Var>,
    ) -> Result<UNetOutput> {
        let stages = self.encoder.len();
        if hierarchy.levels.len() != stages {
            return Err(Error::Contract(format!(
                "hierarchy has {} levels, network has {stages} stages",
                hierarchy.levels.len()
            )));
        }
        if tape.value(input).rows() != hierarchy.base().len() {
            return Err(Error::Dimension {
                op: "unet_forward",
                lhs: tape.shape(input).to_vec(),
                rhs: vec![hierarchy.base().len(), POINT_DIM],
            });
        }

        let mut skips = Vec::with_capacity(stages);
        let mut h = input;
        for (i, stage) in self.encoder.iter().enumerate() {
            let plan = &hierarchy.submanifold[i];
            h = stage.conv_a.forward(tape, b, h, plan)?;
            h = stage.conv_b.forward(tape, b, h, plan)?;
            let fused = fuse(tape, i, h)?;
            if tape.shape(fused) != tape.shape(h) {
                return Err(Error::Dimension {
                    op: "unet_fuse",
                    lhs: tape.shape(h).to_vec(),
                    rhs: tape.shape(fused).to_vec(),
                });
            }
            skips.push(fused);
            h = match &stage.down {
                Some(down) => down.forward(tape, b, fused, &hierarchy.down[i])?,
                None => fused,
            };
        }

        let mut dec = h;
        for i in (0..stages - 1).rev() {
            let up = tape.gather_rows(dec, hierarchy.parents[i].clone())?;
            let cat = tape.concat_cols(&[up, skips[i]])?;
            dec = self.decoder[i].forward(tape, b, cat, &hierarchy.submanifold[i])?;
        }
        let features = self.head.forward(tape, b, dec)?;
        Ok(UNetOutput {
            stages: skips,
            features,
        })
    }
}
