//! Runs the query mask predictor and the three mask selections on random
//! point features.
//!
//! ```bash
//! cargo run --release --example query_head
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg3d::head::{HeadConfig, QueryHead, Selection};
use refseg3d::params::{Init, ParamStore};
use refseg3d::tensor::{Tape, Tensor};

fn main() -> refseg3d::Result<()> {
    let (points, width) = (500, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draw = |r: usize, c: usize| Tensor::new(&[r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let features = draw(points, width)?;
    let sentence = draw(1, width)?;

    for selection in [Selection::WeightedSum, Selection::Top1, Selection::Projection] {
        let cfg = HeadConfig { selection, layers: 2, ..HeadConfig::default() };
        let mut store = ParamStore::new();
        let head = QueryHead::register(&mut store, &mut Init::new(0), &cfg, width, "head")?;
        let mut tape = Tape::inference();
        let b = store.bind(&mut tape);
        let f = tape.constant(features.clone());
        let s = tape.constant(sentence.clone());
        let out = head.forward(&mut tape, &b, f, s)?;
        println!("{selection:?}");
        for (j, state) in out.states.iter().enumerate() {
            let visible = state.visible.iter().filter(|&&v| v).count();
            println!("  state {j}: {visible} of {} query-point pairs visible", state.visible.len());
        }
        if let Some(w) = out.prediction.weights {
            let w = tape.value(w);
            let best = w.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("  weights sum {:.6}, largest {best:.4}", w.data().iter().sum::<f64>());
        }
        let on = out.prediction.mask.iter().filter(|&&m| m).count();
        println!("  final mask covers {on} of {points} points");
    }
    Ok(())
}
