//! Test-only helpers: seeded random tensors and a central-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares the tape gradient of `f` with respect to every input against
/// central differences with step `h`. Returns the worst norm-wise relative
/// error over the inputs.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for (which, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[which].numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
