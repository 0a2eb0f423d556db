//! Tokenizes referring expressions and encodes them with an untrained GRU.
//!
//! ```bash
//! cargo run --release --example text_encoder -- "the red box left of the blue sphere"
//! ```

use refseg3d::params::{Init, ParamStore};
use refseg3d::tensor::Tape;
use refseg3d::textenc::{split_words, tokenize, TextEncoder, TextEncoderConfig, Vocabulary};

fn main() -> refseg3d::Result<()> {
    let vocab = Vocabulary::builtin();
    let mut queries: Vec<String> = std::env::args().skip(1).collect();
    if queries.is_empty() {
        queries = vec!["the red box".into(), "the red box left of the blue sphere".into(), "the zebra".into()];
    }
    let mut store = ParamStore::new();
    let enc = TextEncoder::register(&mut store, &mut Init::new(0), &TextEncoderConfig::default(), vocab.len(), "text")?;
    println!("vocabulary of {} tokens, encoder with {} parameters", vocab.len(), store.element_count());

    for q in &queries {
        let tokens = tokenize(q, &vocab)?;
        let unknown: Vec<String> = split_words(q).into_iter().filter(|w| !vocab.contains(w)).collect();
        let mut tape = Tape::inference();
        let b = store.bind(&mut tape);
        let text = enc.encode(&mut tape, &b, &tokens)?;
        let s = tape.value(text.sentence);
        let norm = s.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{q:?}: tokens {tokens:?}, words {:?}, |S| = {norm:.3}, unknown {unknown:?}",
            tape.shape(text.words)
        );
    }
    Ok(())
}
