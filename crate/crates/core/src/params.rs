//! Named parameter storage, per-forward tape binding, and seeded initializers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Optimizer group a parameter belongs to; each group has its own rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Text,
    Base,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

/// All learnable weights of a model, keyed by dotted name. Iteration is in
/// name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), true)))
            .collect();
        Bindings { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Bindings from explicit `(name, var)` pairs, e.g. leaves created by a
    /// caller that manages its own tape inputs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Tape variable of a bound parameter. Panics on an unknown name, which
    /// indicates a model assembly bug rather than bad input.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients read back from the tape after `backward`; parameters the
    /// loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    /// He-normal: std = sqrt(2 / fan_in).
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Glorot-normal: std = sqrt(2 / (fan_in + fan_out)).
    pub fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    /// Registers a He-initialized weight and a zero bias under `name`.
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(&weight, init.he(&[fan_in, fan_out], fan_in), group);
        store.insert(&bias, Tensor::zeros(&[fan_out]), group);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(&self.weight))?;
        tape.add_bias(y, b.var(&self.bias))
    }
}

/// Affine → ReLU → Affine.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Affine,
    pub second: Affine,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dims: (usize, usize, usize),
        group: ParamGroup,
    ) -> Self {
        Self {
            first: Affine::register(store, init, &format!("{name}.fc1"), dims.0, dims.1, group),
            second: Affine::register(store, init, &format!("{name}.fc2"), dims.1, dims.2, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, b, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, b, h)
    }
}
