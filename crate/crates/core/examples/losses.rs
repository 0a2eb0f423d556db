//! Evaluates the three training losses on a generated sample for a few
//! hand-made logit patterns.
//!
//! ```bash
//! cargo run --release --example losses
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg3d::losses::{area_loss, p2p_loss, seg_loss, total_loss, LossConfig};
use refseg3d::scenes::{make_sample, SceneSpec};
use refseg3d::tensor::{Tape, Tensor};
use refseg3d::textenc::Vocabulary;

fn main() -> refseg3d::Result<()> {
    let sample = make_sample(&SceneSpec::default(), 2, 0, &Vocabulary::builtin())?;
    let n = sample.mask.len();
    println!("\"{}\": {} of {n} points on target", sample.query, sample.positives());
    let cfg = LossConfig::default();

    let patterns: [(&str, Box<dyn Fn(bool) -> f64>); 4] = [
        ("all zero", Box::new(|_| 0.0)),
        ("all negative", Box::new(|_| -4.0)),
        ("all positive", Box::new(|_| 4.0)),
        ("matches target", Box::new(|t| if t { 4.0 } else { -4.0 })),
    ];
    for (name, f) in &patterns {
        let mut tape = Tape::inference();
        let logits = tape.constant(Tensor::new(&[1, n], sample.mask.iter().map(|&t| f(t)).collect())?);
        // Features that put target points at one corner and the rest at another.
        let feats = Tensor::new(&[n, 2], sample.mask.iter().flat_map(|&t| if t { [1.0, 0.0] } else { [0.0, 1.0] }).collect())?;
        let feats = tape.constant(feats);
        let seg = seg_loss(&mut tape, logits, &sample.mask)?;
        let area = area_loss(&mut tape, logits);
        let p2p = p2p_loss(&mut tape, feats, &sample.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let (_, r) = total_loss(&mut tape, seg, area, p2p, &cfg)?;
        println!("{name:15} seg {:.4}  area {:.4}  p2p {:.4}  total {:.4}", r.seg, r.area, r.p2p, r.total);
    }
    Ok(())
}
