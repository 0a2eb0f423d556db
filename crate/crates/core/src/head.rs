//! Query mask predictor and query-sentence alignment.
//!
//! K learnable queries attend to the fused point features under a mask
//! derived from their own previous proposals, each query then scores every
//! point through a shared MLP, and the sentence feature picks or blends the
//! resulting proposal masks into one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Affine, Bindings, Init, Mlp, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// How the K proposal masks become the final mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Sentence-similarity weighted sum of all proposals.
    #[default]
    WeightedSum,
    /// The single proposal with the highest sentence similarity.
    Top1,
    /// A learned per-point linear map from K proposal logits to one; ignores
    /// the sentence feature.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub queries: usize,
    pub layers: usize,
    pub selection: Selection,
    /// Start the queries at zero instead of a random draw.
    pub zero_queries: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            queries: 20,
            layers: 1,
            selection: Selection::WeightedSum,
            zero_queries: false,
        }
    }
}

/// Queries, proposal logits, and the binary attention mask after one layer.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub queries: Var,
    /// `[K×N]` proposal logits.
    pub masks: Var,
    /// Row-major `[K×N]`: point visible to query.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[K×1]` sentence similarity weights; absent for [`Selection::Projection`].
    pub weights: Option<Var>,
    /// `[1×N]` final mask logits.
    pub logits: Var,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Initial state followed by one state per decoder layer.
    pub states: Vec<QueryState>,
    pub prediction: Prediction,
}

/// `σ(x) ≥ 0.5`, evaluated as `x ≥ 0`.
pub fn threshold(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&x| x >= 0.0).collect()
}

/// Proposal logits `Q · Gᵀ` for queries `[K×C]` and mask features `[N×C]`.
pub fn mask_logits(tape: &mut Tape, queries: Var, mask_features: Var) -> Result<Var> {
    let gt = tape.transpose(mask_features)?;
    tape.matmul(queries, gt)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    query: Affine,
    key: String,
    value: Affine,
    ffn: Mlp,
}

impl DecoderLayer {
    fn register(store: &mut ParamStore, init: &mut Init, name: &str, c: usize) -> Self {
        let g = ParamGroup::Base;
        let key = format!("{name}.key.weight");
        store.insert(&key, init.he(&[c, c], c), g);
        Self {
            query: Affine::register(store, init, &format!("{name}.query"), c, c, g),
            key,
            value: Affine::register(store, init, &format!("{name}.value"), c, c, g),
            ffn: Mlp::register(store, init, &format!("{name}.ffn"), (c, c, c), g),
        }
    }

    /// Masked cross-attention from queries to points, residual, then a
    /// residual feed-forward block.
    fn forward(&self, tape: &mut Tape, b: &Bindings, q: Var, features: Var, visible: &[bool]) -> Result<Var> {
        let c = tape.shape(q)[1];
        let qp = self.query.forward(tape, b, q)?;
        let kp = tape.matmul(features, b.var(&self.key))?;
        let vp = self.value.forward(tape, b, features)?;
        let kt = tape.transpose(kp)?;
        let logits = tape.matmul(qp, kt)?;
        let logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = tape.masked_softmax(logits, visible)?;
        let attended = tape.matmul(attn, vp)?;
        let q = tape.add(q, attended)?;
        let ff = self.ffn.forward(tape, b, q)?;
        tape.add(q, ff)
    }
}

#[derive(Clone, Debug)]
pub struct QueryHead {
    config: HeadConfig,
    width: usize,
    initial_queries: String,
    shared: Mlp,
    layers: Vec<DecoderLayer>,
    projection: Option<Affine>,
}

impl QueryHead {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        config: &HeadConfig,
        width: usize,
        prefix: &str,
    ) -> Result<Self> {
        if config.queries == 0 || config.layers == 0 || width == 0 {
            return Err(Error::Contract(format!(
                "head needs K ≥ 1, m ≥ 1 and positive width, got {config:?} width {width}"
            )));
        }
        let g = ParamGroup::Base;
        let initial_queries = format!("{prefix}.queries");
        let q0 = if config.zero_queries {
            Tensor::zeros(&[config.queries, width])
        } else {
            init.normal(&[config.queries, width], (1.0 / width as f64).sqrt())
        };
        store.insert(&initial_queries, q0, g);
        let shared = Mlp::register(store, init, &format!("{prefix}.shared_mlp"), (width, width, width), g);
        let layers = (0..config.layers)
            .map(|j| DecoderLayer::register(store, init, &format!("{prefix}.layer{}", j + 1), width))
            .collect();
        let projection = (config.selection == Selection::Projection)
            .then(|| Affine::register(store, init, &format!("{prefix}.projection"), config.queries, 1, g));
        Ok(Self {
            config: config.clone(),
            width,
            initial_queries,
            shared,
            layers,
            projection,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn initial_queries(&self) -> &str {
        &self.initial_queries
    }

    /// Shared-MLP mask features `[N×C]` for point features `[N×C]`.
    pub fn mask_features(&self, tape: &mut Tape, b: &Bindings, features: Var) -> Result<Var> {
        if tape.shape(features).len() != 2 || tape.shape(features)[1] != self.width {
            return Err(Error::Dimension {
                op: "mask_features",
                lhs: tape.shape(features).to_vec(),
                rhs: vec![self.width],
            });
        }
        self.shared.forward(tape, b, features)
    }

    /// Proposal logits and attention mask for `queries`.
    pub fn mask_predict(&self, tape: &mut Tape, queries: Var, mask_features: Var) -> Result<QueryState> {
        let masks = mask_logits(tape, queries, mask_features)?;
        let visible = threshold(tape.value(masks));
        Ok(QueryState {
            queries,
            masks,
            visible,
        })
    }

    /// State 0 from the learned initial queries.
    pub fn init_state(&self, tape: &mut Tape, b: &Bindings, mask_features: Var) -> Result<QueryState> {
        self.mask_predict(tape, b.var(&self.initial_queries), mask_features)
    }

    /// Decoder layer `j` (0-based) followed by mask prediction.
    pub fn qmp_layer(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        j: usize,
        state: &QueryState,
        features: Var,
        mask_features: Var,
    ) -> Result<QueryState> {
        let layer = self.layers.get(j).ok_or(Error::Index {
            op: "qmp_layer",
            index: j,
            len: self.layers.len(),
        })?;
        let q = layer.forward(tape, b, state.queries, features, &state.visible)?;
        self.mask_predict(tape, q, mask_features)
    }

    /// Final mask from the last queries, the sentence feature `[1×C]`, and
    /// the last proposals.
    pub fn qsa(&self, tape: &mut Tape, b: &Bindings, queries: Var, sentence: Var, masks: Var) -> Result<Prediction> {
        let (weights, logits) = match self.config.selection {
            Selection::Projection => {
                let proj = self.projection.as_ref().expect("projection registered");
                let mt = tape.transpose(masks)?;
                let out = proj.forward(tape, b, mt)?;
                (None, tape.transpose(out)?)
            }
            sel => {
                let r = similarity(tape, queries, sentence)?;
                let logits = if sel == Selection::Top1 {
                    let k = argmax(tape.value(r).data());
                    tape.gather_rows(masks, vec![k])?
                } else {
                    let rt = tape.transpose(r)?;
                    tape.matmul(rt, masks)?
                };
                (Some(r), logits)
            }
        };
        let mask = threshold(tape.value(logits));
        Ok(Prediction { weights, logits, mask })
    }

    /// Full head pass over point features `[N×C]` and the sentence feature.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, features: Var, sentence: Var) -> Result<HeadOutput> {
        let g = self.mask_features(tape, b, features)?;
        let mut states = vec![self.init_state(tape, b, g)?];
        for j in 0..self.layers.len() {
            let next = self.qmp_layer(tape, b, j, &states[j], features, g)?;
            states.push(next);
        }
        let last = states.last().expect("at least one state");
        let prediction = self.qsa(tape, b, last.queries, sentence, last.masks)?;
        Ok(HeadOutput { states, prediction })
    }
}

/// `softmax(Q · Sᵀ)` over the K queries, as a `[K×1]` column.
pub fn similarity(tape: &mut Tape, queries: Var, sentence: Var) -> Result<Var> {
    let st = tape.transpose(sentence)?;
    let scores = tape.matmul(queries, st)?;
    tape.softmax(scores, 0)
}
