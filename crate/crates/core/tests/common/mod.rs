//! Shared fixtures for the integration tests: seeded tensors, an
//! independent central-difference oracle, and small corpora.

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg3d::params::{Bindings, ParamStore};
use refseg3d::scenes::corpus::generate_corpus;
use refseg3d::scenes::{make_sample, SceneSample, SceneSpec};
use refseg3d::tensor::{Tape, Tensor, Var};
use refseg3d::textenc::Vocabulary;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Prints a criterion verdict straight to the terminal, bypassing the test
/// harness's output capture.
pub fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "{tag} [{id}] {name}: {detail}").unwrap();
    out.flush().unwrap();
}

/// Norm-wise relative error, 0 when both sides vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        d / na.max(nb)
    }
}

/// Worst relative error over `inputs` between the tape gradient of the
/// scalar `f` and `(f(x+h) − f(x−h)) / 2h`, entry by entry.
pub fn fd_error(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let value = |xs: &[Tensor]| {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (w, v) in vars.iter().enumerate() {
        let n = inputs[w].numel();
        let analytic: Vec<f64> = tape.grad(*v).map_or(vec![0.0; n], |g| g.data().to_vec());
        let numeric: Vec<f64> = (0..n)
            .map(|e| {
                let mut shifted = inputs.to_vec();
                let base = inputs[w].data()[e];
                let mut with = |x: f64| {
                    let mut d = shifted[w].data().to_vec();
                    d[e] = x;
                    shifted[w] = Tensor::new(inputs[w].shape(), d).unwrap();
                    value(&shifted)
                };
                (with(base + h) - with(base - h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Parameters of a module as oracle inputs, in store order.
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl Params {
    pub fn of(store: &ParamStore) -> Self {
        let (names, values) = store.iter().map(|(n, p)| (n.to_string(), p.value.clone())).unzip();
        Self { names, values }
    }

    pub fn with(&self, extra: &[Tensor]) -> Vec<Tensor> {
        self.values.iter().chain(extra).cloned().collect()
    }

    /// Bindings for the leading vars and the remaining data vars.
    pub fn split(&self, vars: &[Var]) -> (Bindings, Vec<Var>) {
        let k = self.names.len();
        (
            Bindings::from_pairs(self.names.iter().cloned().zip(vars[..k].iter().copied())),
            vars[k..].to_vec(),
        )
    }
}

pub fn samples(spec: &SceneSpec, seed: u64, n: usize) -> Vec<SceneSample> {
    let vocab = Vocabulary::builtin();
    (0..n).map(|i| make_sample(spec, seed, i, &vocab).unwrap()).collect()
}

/// The 8-scene overfit corpus written to `dir`.
pub fn overfit_corpus(dir: &Path) {
    generate_corpus(dir, &SceneSpec::default(), 7, 8).unwrap();
}
