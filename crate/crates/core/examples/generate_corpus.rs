//! Writes a small synthetic corpus and summarizes the expressions in it.
//!
//! ```bash
//! cargo run --release --example generate_corpus -- /tmp/corpus 20
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use refseg3d::scenes::corpus::{generate_corpus, Corpus};
use refseg3d::scenes::SceneSpec;

fn main() -> refseg3d::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| std::env::temp_dir().join("refseg3d-corpus"), PathBuf::from);
    let count: usize = args.next().map_or(20, |a| a.parse().expect("scene count"));

    generate_corpus(&dir, &SceneSpec::default(), 0, count)?;
    let corpus = Corpus::open(&dir)?;
    let samples = corpus.load_all()?;
    let mut relations: BTreeMap<usize, usize> = BTreeMap::new();
    let mut share = 0.0;
    for s in &samples {
        *relations.entry(s.query.split_whitespace().count()).or_default() += 1;
        share += s.positives() as f64 / s.mask.len() as f64;
        println!("{}  {:5} points  {:5.1}% target  \"{}\"", s.sample_id, s.cloud.len(), 100.0 * s.positives() as f64 / s.mask.len() as f64, s.query);
    }
    println!("{} scenes in {}", corpus.len(), dir.display());
    println!("mean target share {:.1}%, expression lengths {relations:?}", 100.0 * share / samples.len() as f64);
    Ok(())
}
