//! Central finite-difference checks of every differentiable building block.
//!
//! Each check draws a random instance, reduces the block's output to a
//! scalar through a fixed random readout, and compares the tape gradient of
//! every input with `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::PwcaStage;
use crate::head::{HeadConfig, QueryHead, QueryState, Selection};
use crate::losses::{area_loss, contrastive, seg_loss, P2pForm};
use crate::params::{Bindings, Init, ParamStore};
use crate::sparse3d::{ActiveSet, ConvPlan, KERNEL_VOLUME};
use crate::tensor::{Tape, Tensor, Var};
use crate::textenc::{TextEncoder, TextEncoderConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one check over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error, over `inputs`, between the tape gradient of the
/// scalar `f` and central differences with step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, v) in vars.iter().enumerate() {
        let analytic = match tape.grad(*v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[which].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[which].numel() {
            let x = inputs[which].data()[e];
            probe[which].data_mut()[e] = x + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[e] = x - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[e] = x;
            numeric.push((plus - minus) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry gets its own weight.
fn readout(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Parameters of a registered module as check inputs, plus a way to rebind
/// them by name inside the checked function.
struct Module {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Module {
    fn new(store: &ParamStore) -> Self {
        let (names, values) = store.iter().map(|(n, p)| (n.to_string(), p.value.clone())).unzip();
        Self { names, values }
    }

    /// Module parameters first, then `extra`.
    fn inputs(&self, extra: &[Tensor]) -> Vec<Tensor> {
        self.values.iter().chain(extra).cloned().collect()
    }

    fn bind(&self, vars: &[Var]) -> (Bindings, Vec<Var>) {
        let n = self.names.len();
        let b = Bindings::from_pairs(self.names.iter().cloned().zip(vars[..n].iter().copied()));
        (b, vars[n..].to_vec())
    }
}

type Builder = fn(&mut ChaCha8Rng) -> Result<f64>;

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var) -> Var, lo: f64, hi: f64) -> Result<f64> {
    let x = uniform(rng, &[3, 4], lo, hi);
    let r = uniform(rng, &[3, 4], -1.0, 1.0);
    check(&[x], STEP, |t, v| {
        let y = op(t, v[0]);
        readout(t, y, &r)
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[4, 5], -1.0, 1.0);
    let r = uniform(rng, &[3, 5], -1.0, 1.0);
    check(&[a, b], STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        readout(t, y, &r)
    })
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[4, 5], -2.0, 2.0);
    let r0 = uniform(rng, &[4, 5], -1.0, 1.0);
    let r1 = uniform(rng, &[4, 5], -1.0, 1.0);
    check(&[x], STEP, |t, v| {
        let rows = t.softmax(v[0], 1)?;
        let cols = t.softmax(v[0], 0)?;
        let a = readout(t, rows, &r0)?;
        let b = readout(t, cols, &r1)?;
        t.add(a, b)
    })
}

fn log_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[4, 5], -2.0, 2.0);
    let r = uniform(rng, &[4, 5], -1.0, 1.0);
    check(&[x], STEP, |t, v| {
        let y = t.log_softmax(v[0], 1)?;
        readout(t, y, &r)
    })
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    unary(rng, Tape::sigmoid, -3.0, 3.0)
}

fn tanh(rng: &mut ChaCha8Rng) -> Result<f64> {
    unary(rng, Tape::tanh, -2.0, 2.0)
}

fn softplus(rng: &mut ChaCha8Rng) -> Result<f64> {
    unary(rng, Tape::softplus, -3.0, 3.0)
}

fn normalize_rows(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[4, 3], 0.2, 1.5);
    let r = uniform(rng, &[4, 3], -1.0, 1.0);
    check(&[x], STEP, |t, v| {
        let y = t.normalize_rows(v[0])?;
        readout(t, y, &r)
    })
}

/// Scaled dot-product attention from 3 queries to 6 keys.
fn attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let q = uniform(rng, &[3, 4], -1.0, 1.0);
    let k = uniform(rng, &[6, 4], -1.0, 1.0);
    let val = uniform(rng, &[6, 4], -1.0, 1.0);
    let r = uniform(rng, &[3, 4], -1.0, 1.0);
    check(&[q, k, val], STEP, |t, v| {
        let kt = t.transpose(v[1])?;
        let logits = t.matmul(v[0], kt)?;
        let logits = t.scale(logits, 0.5);
        let a = t.softmax(logits, 1)?;
        let y = t.matmul(a, v[2])?;
        readout(t, y, &r)
    })
}

/// Attention restricted by a random visibility mask, one row fully hidden.
fn masked_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let q = uniform(rng, &[3, 4], -1.0, 1.0);
    let k = uniform(rng, &[6, 4], -1.0, 1.0);
    let val = uniform(rng, &[6, 4], -1.0, 1.0);
    let r = uniform(rng, &[3, 4], -1.0, 1.0);
    let mut visible: Vec<bool> = (0..18).map(|_| rng.random_bool(0.5)).collect();
    visible[..6].iter_mut().for_each(|x| *x = false);
    visible[6] = true;
    check(&[q, k, val], STEP, |t, v| {
        let kt = t.transpose(v[1])?;
        let logits = t.matmul(v[0], kt)?;
        let a = t.masked_softmax(logits, &visible)?;
        let y = t.matmul(a, v[2])?;
        readout(t, y, &r)
    })
}

/// Submanifold convolution over a random voxel blob.
fn sparse_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut coords: Vec<[i32; 3]> = (0..14)
        .map(|_| [rng.random_range(0..3), rng.random_range(0..3), rng.random_range(0..3)])
        .collect();
    coords.sort_unstable();
    coords.dedup();
    let active = std::sync::Arc::new(ActiveSet::new(1, coords)?);
    let plan = ConvPlan::submanifold(&active);
    let x = uniform(rng, &[active.len(), 2], -1.0, 1.0);
    let w = uniform(rng, &[KERNEL_VOLUME, 2, 3], -1.0, 1.0);
    let r = uniform(rng, &[active.len(), 3], -1.0, 1.0);
    check(&[x, w], STEP, |t, v| {
        let y = t.sparse_conv(v[0], v[1], plan.map.clone())?;
        readout(t, y, &r)
    })
}

/// The recurrent text encoder over a short token sequence, embeddings and
/// gate weights included.
fn gru(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(rng.random());
    let cfg = TextEncoderConfig { dim: 3, max_len: 8 };
    let enc = TextEncoder::register(&mut store, &mut init, &cfg, 5, "text")?;
    // Nonzero biases so their gradients are exercised too.
    for name in ["text.gru.b_ih", "text.gru.b_hh"] {
        store.get_mut(name).expect("registered").value = uniform(rng, &[9], -0.5, 0.5);
    }
    let tokens: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let module = Module::new(&store);
    let r = uniform(rng, &[4, 3], -1.0, 1.0);
    check(&module.inputs(&[]), STEP, |t, v| {
        let (b, _) = module.bind(v);
        let out = enc.encode(t, &b, &tokens)?;
        readout(t, out.words, &r)
    })
}

/// One fusion stage: word projection, cross-attention, gate, residual.
fn pwca(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(rng.random());
    let stage = PwcaStage::register(&mut store, &mut init, "stage", 3, 4);
    let module = Module::new(&store);
    let voxels = uniform(rng, &[5, 4], -1.0, 1.0);
    let words = uniform(rng, &[3, 3], -1.0, 1.0);
    let r = uniform(rng, &[5, 4], -1.0, 1.0);
    check(&module.inputs(&[voxels, words]), STEP, |t, v| {
        let (b, x) = module.bind(v);
        let y = stage.apply(t, &b, x[0], x[1])?;
        readout(t, y, &r)
    })
}

/// One masked decoder layer with mask prediction, visibility held fixed.
fn qmp_layer(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(rng.random());
    let cfg = HeadConfig {
        queries: 3,
        layers: 1,
        selection: Selection::WeightedSum,
        zero_queries: false,
    };
    let head = QueryHead::register(&mut store, &mut init, &cfg, 4, "head")?;
    let module = Module::new(&store);
    let features = uniform(rng, &[7, 4], -1.0, 1.0);
    let visible: Vec<bool> = (0..21).map(|_| rng.random_bool(0.6)).collect();
    let r = uniform(rng, &[3, 7], -1.0, 1.0);
    check(&module.inputs(&[features]), STEP, |t, v| {
        let (b, x) = module.bind(v);
        let g = head.mask_features(t, &b, x[0])?;
        let state = QueryState {
            visible: visible.clone(),
            ..head.init_state(t, &b, g)?
        };
        let next = head.qmp_layer(t, &b, 0, &state, x[0], g)?;
        readout(t, next.masks, &r)
    })
}

/// Sentence-weighted selection over fixed proposals.
fn qsa(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut init = Init::new(rng.random());
    let cfg = HeadConfig {
        queries: 3,
        ..HeadConfig::default()
    };
    let head = QueryHead::register(&mut store, &mut init, &cfg, 4, "head")?;
    let queries = uniform(rng, &[3, 4], -1.0, 1.0);
    let sentence = uniform(rng, &[1, 4], -1.0, 1.0);
    let masks = uniform(rng, &[3, 6], -2.0, 2.0);
    let r = uniform(rng, &[1, 6], -1.0, 1.0);
    check(&[queries, sentence, masks], STEP, |t, v| {
        let b = Bindings::from_pairs([]);
        let p = head.qsa(t, &b, v[0], v[1], v[2])?;
        readout(t, p.logits, &r)
    })
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    y[0] = true;
    y[n - 1] = false;
    y
}

fn seg(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[1, 12], -3.0, 3.0);
    let y = labels(rng, 12);
    check(&[x], STEP, |t, v| seg_loss(t, v[0], &y))
}

fn area(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = uniform(rng, &[1, 12], -3.0, 3.0);
    check(&[x], STEP, |t, v| Ok(area_loss(t, v[0])))
}

fn p2p(rng: &mut ChaCha8Rng, form: P2pForm) -> Result<f64> {
    let pos = uniform(rng, &[4, 3], -1.0, 1.0);
    let neg = uniform(rng, &[5, 3], -1.0, 1.0);
    check(&[pos, neg], STEP, |t, v| contrastive(t, v[0], Some(v[1]), 0.5, form))
}

fn p2p_log(rng: &mut ChaCha8Rng) -> Result<f64> {
    p2p(rng, P2pForm::LogForm)
}

fn p2p_as_written(rng: &mut ChaCha8Rng) -> Result<f64> {
    p2p(rng, P2pForm::AsWritten)
}

/// `(module, check, builder)` for every check in the suite.
pub const CHECKS: &[(&str, &str, Builder)] = &[
    ("tensor", "matmul", matmul),
    ("tensor", "softmax", softmax),
    ("tensor", "log_softmax", log_softmax),
    ("tensor", "sigmoid", sigmoid),
    ("tensor", "tanh", tanh),
    ("tensor", "softplus", softplus),
    ("tensor", "normalize_rows", normalize_rows),
    ("tensor", "attention", attention),
    ("tensor", "masked_attention", masked_attention),
    ("sparse3d", "sparse_conv", sparse_conv),
    ("textenc", "gru", gru),
    ("fusion", "pwca_stage", pwca),
    ("head", "qmp_layer", qmp_layer),
    ("head", "qsa", qsa),
    ("losses", "seg_loss", seg),
    ("losses", "area_loss", area),
    ("losses", "p2p_log_form", p2p_log),
    ("losses", "p2p_as_written", p2p_as_written),
];

/// Runs every check whose module or name equals `filter` (all when `None`)
/// on `instances` random instances each.
pub fn run_suite(filter: Option<&str>, instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let selected: Vec<_> = CHECKS
        .iter()
        .filter(|(m, n, _)| filter.is_none_or(|f| f == *m || f == *n))
        .collect();
    if selected.is_empty() {
        let known: Vec<&str> = CHECKS.iter().map(|(_, n, _)| *n).collect();
        return Err(Error::Contract(format!(
            "no gradient check named {:?}; modules are tensor, sparse3d, textenc, fusion, head, losses; checks are {}",
            filter.unwrap_or_default(),
            known.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(selected.len());
    for (module, name, build) in selected {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            worst = worst.max(build(&mut rng)?);
        }
        out.push(CheckResult {
            module,
            name,
            instances,
            worst,
        });
    }
    Ok(out)
}
