//! Model assembly, the optimization loop, evaluation, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use model::{ForwardOutput, Model, ModelConfig, PreparedScene};
pub use optim::Adam;

use crate::error::{Error, Result};
use crate::metrics::{EvalResult, PredictionRecord};
use crate::params::ParamGroup;
use crate::scenes::corpus::Corpus;
use crate::scenes::{scene_seed, SceneSample};
use crate::tensor::Tensor;

/// Samples with their preprocessed voxel hierarchies.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub scenes: Vec<PreparedScene>,
}

impl Dataset {
    pub fn new(samples: Vec<SceneSample>, model: &ModelConfig) -> Result<Self> {
        let stages = model.unet.channels.len();
        let scenes = samples
            .par_iter()
            .map(|s| PreparedScene::new(&s.cloud, model.voxel_size, stages))
            .collect::<Result<_>>()?;
        Ok(Self { samples, scenes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Training and held-out samples of a corpus. Scene `i` is held out when
/// `holdout_every > 0` and `i % holdout_every == holdout_every - 1`.
pub fn split_corpus(corpus: &Corpus, cfg: &TrainConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let per_scene: Vec<Vec<SceneSample>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| corpus.load_scene(i))
        .collect::<Result<_>>()?;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, samples) in per_scene.into_iter().enumerate() {
        let k = cfg.holdout_every;
        if k > 0 && i % k == k - 1 {
            held.extend(samples);
        } else {
            train.extend(samples);
        }
    }
    if let Some(n) = cfg.train_limit {
        train.truncate(n);
    }
    if let Some(n) = cfg.eval_limit {
        held.truncate(n);
    }
    Ok((train, held))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub text_lr: f64,
    pub seg: f64,
    pub area: f64,
    pub p2p: f64,
    pub total: f64,
    pub train_miou: Option<f64>,
    pub train_acc25: Option<f64>,
    pub train_acc50: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_acc25: Option<f64>,
    pub val_acc50: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub model: Model,
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Trains on the corpus named by `cfg`, writing the metrics log and
/// checkpoints under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpus = Corpus::open(&cfg.corpus)?;
    let (train, held) = split_corpus(&corpus, cfg)?;
    train_on(cfg, train, held, corpus.vocab.len())
}

/// Trains on in-memory samples.
pub fn train_on(
    cfg: &TrainConfig,
    train: Vec<SceneSample>,
    held: Vec<SceneSample>,
    vocab_size: usize,
) -> Result<TrainSummary> {
    train_with(cfg, train, held, vocab_size, |_| ControlFlow::Continue(()))
}

/// Like [`train_on`], calling `on_epoch` after each epoch's record and
/// checkpoint are written. Returning `Break` ends the run there.
pub fn train_with(
    cfg: &TrainConfig,
    train: Vec<SceneSample>,
    held: Vec<SceneSample>,
    vocab_size: usize,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let model_cfg = cfg.model();
    let loss_cfg = cfg.loss();
    let train = Dataset::new(train, &model_cfg)?;
    let held = Dataset::new(held, &model_cfg)?;
    let mut model = Model::new(&model_cfg, vocab_size, cfg.seed)?;
    let mut adam = Adam::default();

    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let ckpt_path = cfg.out_dir.join("last.ckpt");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps: u64 = 0;
    let mut seen: usize = 0;
    let mut records = Vec::new();
    let limit = cfg.max_steps.map(|s| s as u64);
    for epoch in 0..cfg.epochs {
        let (lr, text_lr) = cfg.rates(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sums = [0.0f64; 4];
        let mut counted = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if limit.is_some_and(|l| steps >= l) {
                break;
            }
            let results: Vec<_> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, seen + j));
                    model.gradients(&train.scenes[i], &train.samples[i].tokens, &train.samples[i].mask, &loss_cfg, &mut rng)
                })
                .collect();
            seen += batch.len();
            let mut acc = BTreeMap::new();
            for r in results {
                let (report, grads) = r.map_err(|e| match e {
                    Error::Training(m) => Error::Training(format!("epoch {} step {}: {m}", epoch + 1, steps + 1)),
                    other => other,
                })?;
                sums[0] += report.seg;
                sums[1] += report.area;
                sums[2] += report.p2p;
                sums[3] += report.total;
                counted += 1;
                accumulate(&mut acc, grads);
            }
            let inv = 1.0 / batch.len() as f64;
            acc.values_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            adam.step(&mut model.params, &acc, |g| match g {
                ParamGroup::Text => text_lr,
                ParamGroup::Base => lr,
            })?;
            steps += 1;
        }

        let mean = |v: f64| if counted == 0 { 0.0 } else { v / counted as f64 };
        let train_eval = if cfg.eval_train {
            Some(evaluate_dataset(&model, &train)?.0)
        } else {
            None
        };
        let val_eval = if held.is_empty() {
            None
        } else {
            Some(evaluate_dataset(&model, &held)?.0)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps,
            lr,
            text_lr,
            seg: mean(sums[0]),
            area: mean(sums[1]),
            p2p: mean(sums[2]),
            total: mean(sums[3]),
            train_miou: train_eval.as_ref().map(|r| r.miou),
            train_acc25: train_eval.as_ref().map(|r| r.acc(0.25)),
            train_acc50: train_eval.as_ref().map(|r| r.acc(0.5)),
            val_miou: val_eval.as_ref().map(|r| r.miou),
            val_acc25: val_eval.as_ref().map(|r| r.acc(0.25)),
            val_acc50: val_eval.as_ref().map(|r| r.acc(0.5)),
        };
        log::info!(
            "epoch {} steps {} loss {:.4} train mIoU {} val mIoU {}",
            record.epoch,
            steps,
            record.total,
            show(record.train_miou),
            show(record.val_miou)
        );
        writeln!(log, "{}", serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?)?;
        log.flush()?;

        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch: epoch + 1,
            step: steps,
            vocab_size,
            params: model.params.clone(),
            adam: adam.clone(),
        };
        ckpt.save(&ckpt_path)?;
        if cfg.keep_epoch_checkpoints {
            ckpt.save(&cfg.out_dir.join(format!("epoch-{:03}.ckpt", epoch + 1)))?;
        }
        let flow = on_epoch(&record);
        records.push(record);
        if flow.is_break() || limit.is_some_and(|l| steps >= l) {
            break;
        }
    }
    Ok(TrainSummary {
        records,
        steps,
        checkpoint: ckpt_path,
        metrics_log: log_path,
        model,
    })
}

/// Scores `predict(i, sample)` against each sample's mask. Samples are
/// processed in parallel; results keep sample order.
pub fn evaluate_with<F>(samples: &[SceneSample], predict: F) -> Result<(EvalResult, Vec<PredictionRecord>)>
where
    F: Fn(usize, &SceneSample) -> Result<Vec<bool>> + Sync,
{
    let masks: Vec<Vec<bool>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| predict(i, s))
        .collect::<Result<_>>()?;
    let result = EvalResult::score(masks.iter().zip(samples).map(|(p, s)| (p.as_slice(), s.mask.as_slice())))?;
    let records = masks
        .into_iter()
        .zip(samples)
        .map(|(mask, s)| PredictionRecord {
            sample_id: s.sample_id.clone(),
            mask,
        })
        .collect();
    Ok((result, records))
}

pub fn evaluate_dataset(model: &Model, data: &Dataset) -> Result<(EvalResult, Vec<PredictionRecord>)> {
    evaluate_with(&data.samples, |i, s| model.predict(&data.scenes[i], &s.tokens))
}

/// Evaluation report written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_epoch: usize,
    pub samples: usize,
    pub miou: f64,
    pub acc25: f64,
    pub acc50: f64,
    pub sample_ids: Vec<String>,
    pub per_sample_iou: Vec<f64>,
}

/// Evaluates a checkpoint on every sample of `corpus`.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    if corpus.vocab.len() != ckpt.vocab_size {
        return Err(Error::Format(format!(
            "corpus vocabulary has {} tokens, checkpoint expects {}",
            corpus.vocab.len(),
            ckpt.vocab_size
        )));
    }
    let model = Model::with_params(&ckpt.config.model(), ckpt.vocab_size, ckpt.params.clone())?;
    let data = Dataset::new(corpus.load_all()?, model.config())?;
    let (result, records) = evaluate_dataset(&model, &data)?;
    let report = EvalReport {
        checkpoint_epoch: ckpt.epoch,
        samples: data.len(),
        miou: result.miou,
        acc25: result.acc(0.25),
        acc50: result.acc(0.5),
        sample_ids: data.samples.iter().map(|s| s.sample_id.clone()).collect(),
        per_sample_iou: result.per_sample_iou,
    };
    Ok((report, records))
}

/// Writes `report` as pretty JSON.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}
