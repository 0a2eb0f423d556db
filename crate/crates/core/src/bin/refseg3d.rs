//! Command-line front end: corpus generation, training, evaluation, and
//! gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use refseg3d::gradcheck;
use refseg3d::metrics::write_predictions;
use refseg3d::scenes::corpus::{generate_corpus, Corpus};
use refseg3d::scenes::SceneSpec;
use refseg3d::trainer::{self, Checkpoint, TrainConfig};

/// Caps the worker thread pool.
const THREADS_VAR: &str = "REFSEG3D_THREADS";

#[derive(Parser)]
#[command(version, about = "Referring segmentation of 3D point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of scenes and queries.
    GenCorpus {
        /// Scene spec (TOML); missing keys take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on every sample of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also write the predicted masks, run-length encoded.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare tape gradients with finite differences.
    Gradcheck {
        /// Module (tensor, sparse3d, textenc, fusion, head, losses) or check name.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> refseg3d::Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| refseg3d::Error::Contract(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| refseg3d::Error::Contract(e.to_string()))
}

fn run(cli: Cli) -> refseg3d::Result<bool> {
    match cli.command {
        Command::GenCorpus { spec, out, count, seed } => {
            let spec = match spec {
                Some(path) => SceneSpec::load(&path)?,
                None => SceneSpec::default(),
            };
            let index = generate_corpus(&out, &spec, seed, count)?;
            println!("wrote {} scenes to {}", index.scenes.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let summary = trainer::train(&cfg)?;
            if let Some(last) = summary.records.last() {
                println!(
                    "{} steps, {} epochs; loss {:.4}; train mIoU {}; val mIoU {}",
                    summary.steps,
                    last.epoch,
                    last.total,
                    fmt(last.train_miou),
                    fmt(last.val_miou)
                );
            }
            println!("checkpoint {}", summary.checkpoint.display());
            println!("metrics {}", summary.metrics_log.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            report,
            predictions,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let corpus = Corpus::open(&corpus)?;
            let (result, records) = trainer::evaluate(&ckpt, &corpus)?;
            trainer::write_report(&result, &report)?;
            if let Some(path) = predictions {
                write_predictions(&records, &path)?;
            }
            println!(
                "{} samples: mIoU {:.4}  acc@0.25 {:.4}  acc@0.5 {:.4}",
                result.samples, result.miou, result.acc25, result.acc50
            );
        }
        Command::Gradcheck { module, instances, seed } => {
            let results = gradcheck::run_suite(module.as_deref(), instances, seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:4} {:9} {:16} worst relative error {:.2e} over {} instances",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.module,
                    r.name,
                    r.worst,
                    r.instances
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
