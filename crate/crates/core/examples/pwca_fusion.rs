//! Fuses word features into voxel features with a PWCA stage and with the
//! element-wise baseline, and reports how far each moves the voxels.
//!
//! ```bash
//! cargo run --release --example pwca_fusion
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg3d::fusion::{FusionMode, PwcaStage};
use refseg3d::params::{Init, ParamStore};
use refseg3d::tensor::{Tape, Tensor};

fn main() -> refseg3d::Result<()> {
    let (voxels, words, text_dim, width) = (200, 6, 64, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let v = draw(voxels, width)?;
    let w = draw(words, text_dim)?;

    let mut store = ParamStore::new();
    let stage = PwcaStage::register(&mut store, &mut Init::new(1), "stage1", text_dim, width);
    for mode in [FusionMode::Pwca, FusionMode::Add] {
        let mut tape = Tape::inference();
        let b = store.bind(&mut tape);
        let vv = tape.constant(v.clone());
        let ww = tape.constant(w.clone());
        let fused = stage.fuse(mode, &mut tape, &b, vv, ww)?;
        let out = tape.value(fused);
        let delta: Vec<f64> = out.data().iter().zip(v.data()).map(|(a, b)| a - b).collect();
        let max = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let rms = (delta.iter().map(|d| d * d).sum::<f64>() / delta.len() as f64).sqrt();
        println!("{mode:?}: output {:?}, residual rms {rms:.4}, max {max:.4}", out.shape());
    }
    Ok(())
}
