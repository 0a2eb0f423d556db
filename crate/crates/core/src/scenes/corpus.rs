//! Corpus directory.
//!
//! ```text
//! <dir>/corpus.json        index: format version, seed, spec, scene ids in order
//! <dir>/vocab.txt          vocabulary, one token per line
//! <dir>/<scene_id>.pts     point table (binary form, see sparse3d::io)
//! <dir>/<scene_id>.json    scene manifest
//! ```
//!
//! Scene manifest fields:
//! - `scene_id`: string
//! - `points`: point count N
//! - `semantic`, `instance`: per-point ids as `[id, run_length]` pairs in point order
//! - `samples`: list of `{sample_id, query, target, mask}` where `target` is
//!   the instance id and `mask` the run lengths of the binary mask (unset
//!   run first, as in the prediction file)

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_sample, SceneSample, SceneSpec};
use crate::error::{format_err, Error, Result};
use crate::metrics::{rle_decode, rle_encode, LabelSet};
use crate::sparse3d::io as point_io;
use crate::textenc::{tokenize, Vocabulary};

pub const CORPUS_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub format: u32,
    pub seed: u64,
    pub spec: SceneSpec,
    pub scenes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    sample_id: String,
    query: String,
    target: u32,
    mask: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneManifest {
    scene_id: String,
    points: usize,
    semantic: Vec<(u32, usize)>,
    instance: Vec<(u32, usize)>,
    samples: Vec<SampleRecord>,
}

fn runs_of(values: &[u32]) -> Vec<(u32, usize)> {
    let mut runs: Vec<(u32, usize)> = Vec::new();
    for &v in values {
        match runs.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

fn expand(runs: &[(u32, usize)], n: usize) -> Result<Vec<u32>> {
    let out: Vec<u32> = runs
        .iter()
        .flat_map(|&(v, len)| std::iter::repeat_n(v, len))
        .collect();
    if out.len() != n {
        return Err(format_err(format!("label runs cover {} points, expected {n}", out.len())));
    }
    Ok(out)
}

/// Generates `count` scenes in parallel and writes them under `dir`.
pub fn generate_corpus(dir: &Path, spec: &SceneSpec, seed: u64, count: usize) -> Result<CorpusIndex> {
    spec.validate()?;
    let vocab = Vocabulary::builtin();
    let samples: Vec<SceneSample> = (0..count)
        .into_par_iter()
        .map(|i| make_sample(spec, seed, i, &vocab))
        .collect::<Result<_>>()?;
    fs::create_dir_all(dir)?;
    for s in &samples {
        write_scene(dir, s)?;
    }
    vocab.write(&dir.join("vocab.txt"))?;
    let index = CorpusIndex {
        format: CORPUS_FORMAT,
        seed,
        spec: spec.clone(),
        scenes: samples.iter().map(|s| s.scene_id.clone()).collect(),
    };
    fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&index).map_err(json_err)?)?;
    Ok(index)
}

fn json_err(e: serde_json::Error) -> Error {
    format_err(e.to_string())
}

/// Writes one single-query scene.
pub fn write_scene(dir: &Path, sample: &SceneSample) -> Result<()> {
    point_io::write_binary(&sample.cloud, &dir.join(format!("{}.pts", sample.scene_id)))?;
    let manifest = SceneManifest {
        scene_id: sample.scene_id.clone(),
        points: sample.cloud.len(),
        semantic: runs_of(&sample.labels.semantic),
        instance: runs_of(&sample.labels.instance),
        samples: vec![SampleRecord {
            sample_id: sample.sample_id.clone(),
            query: sample.query.clone(),
            target: sample.target,
            mask: rle_encode(&sample.mask),
        }],
    };
    let json = serde_json::to_string(&manifest).map_err(json_err)?;
    fs::write(dir.join(format!("{}.json", sample.scene_id)), json)?;
    Ok(())
}

/// An opened corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    dir: PathBuf,
    pub index: CorpusIndex,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = crate::error::read_text(&dir.join("corpus.json"))?;
        let index: CorpusIndex = serde_json::from_str(&text).map_err(json_err)?;
        if index.format != CORPUS_FORMAT {
            return Err(format_err(format!("corpus format {} is not supported", index.format)));
        }
        let vocab = Vocabulary::read(&dir.join("vocab.txt"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.index.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.scenes.is_empty()
    }

    /// All samples of scene `i`, in manifest order.
    pub fn load_scene(&self, i: usize) -> Result<Vec<SceneSample>> {
        let id = self.index.scenes.get(i).ok_or(Error::Index {
            op: "corpus_scene",
            index: i,
            len: self.len(),
        })?;
        let cloud = point_io::read(&self.dir.join(format!("{id}.pts")))?;
        let text = crate::error::read_text(&self.dir.join(format!("{id}.json")))?;
        let m: SceneManifest = serde_json::from_str(&text).map_err(json_err)?;
        if m.points != cloud.len() {
            return Err(format_err(format!("{id}: manifest has {} points, table {}", m.points, cloud.len())));
        }
        let labels = LabelSet::new(expand(&m.semantic, m.points)?, expand(&m.instance, m.points)?)?;
        m.samples
            .into_iter()
            .map(|r| {
                let s = SceneSample {
                    scene_id: m.scene_id.clone(),
                    sample_id: r.sample_id,
                    cloud: cloud.clone(),
                    tokens: tokenize(&r.query, &self.vocab)?,
                    query: r.query,
                    target: r.target,
                    mask: rle_decode(&r.mask, m.points)?,
                    labels: labels.clone(),
                };
                s.validate()?;
                Ok(s)
            })
            .collect()
    }

    /// Every sample of the corpus, scenes in index order.
    pub fn load_all(&self) -> Result<Vec<SceneSample>> {
        let per_scene: Vec<Vec<SceneSample>> = (0..self.len())
            .into_par_iter()
            .map(|i| self.load_scene(i))
            .collect::<Result<_>>()?;
        Ok(per_scene.into_iter().flatten().collect())
    }
}
