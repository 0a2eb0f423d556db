//! Overfits the full model on a handful of generated scenes and prints the
//! training mIoU after every epoch.
//!
//! ```bash
//! cargo run --release --example train_overfit -- 8 500
//! ```

use std::time::Instant;

use refseg3d::scenes::{make_sample, SceneSpec};
use refseg3d::textenc::Vocabulary;
use refseg3d::trainer::{train_on, TrainConfig};

fn main() -> refseg3d::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(8, |a| a.parse().expect("sample count"));
    let steps: usize = args.next().map_or(500, |a| a.parse().expect("step budget"));

    let vocab = Vocabulary::builtin();
    let spec = SceneSpec::default();
    let samples = (0..count)
        .map(|i| make_sample(&spec, 7, i, &vocab))
        .collect::<refseg3d::Result<Vec<_>>>()?;
    for s in &samples {
        println!("{}  {:5} points  {:4} on target  \"{}\"", s.sample_id, s.cloud.len(), s.positives(), s.query);
    }

    let out = std::env::temp_dir().join("refseg3d-overfit");
    let cfg = TrainConfig {
        out_dir: out.clone(),
        epochs: steps.div_ceil(count.div_ceil(2)),
        max_steps: Some(steps),
        lr: 1e-3,
        text_lr: 2e-4,
        decay: 1.0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let summary = train_on(&cfg, samples, Vec::new(), vocab.len())?;
    let last = summary.records.last().expect("at least one epoch");
    println!(
        "{} steps in {:.1?}: loss {:.4}, training mIoU {:.3}, acc@0.5 {:.3}",
        summary.steps,
        start.elapsed(),
        last.total,
        last.train_miou.unwrap_or(0.0),
        last.train_acc50.unwrap_or(0.0)
    );
    println!("metrics log: {}", summary.metrics_log.display());
    Ok(())
}
