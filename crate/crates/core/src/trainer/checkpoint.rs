//! Checkpoint container.
//!
//! ```text
//! 8 bytes   magic "RS3DCKPT"
//! u32 LE    format version
//! u64 LE    manifest length in bytes
//! manifest  UTF-8 JSON (see `Manifest`)
//! payload   every array of the manifest, in order, as f64 little-endian
//! ```
//!
//! Arrays carry a role: `param` (model weight), `adam_m` or `adam_v`
//! (optimizer moments of the parameter with the same name).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::error::{format_err, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RS3DCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    role: Role,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    epoch: usize,
    step: u64,
    vocab_size: usize,
    config: TrainConfig,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_step: u64,
    arrays: Vec<ArrayEntry>,
}

/// Weights, optimizer state, and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        for (name, p) in self.params.iter() {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                role: Role::Param,
                group: p.group,
                shape: p.value.shape().to_vec(),
            });
            payload.push(&p.value);
        }
        for (role, moments) in [(Role::AdamM, &self.adam.m), (Role::AdamV, &self.adam.v)] {
            for (name, t) in moments {
                let group = self.params.get(name).map_or(ParamGroup::Base, |p| p.group);
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    role,
                    group,
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
        let manifest = Manifest {
            epoch: self.epoch,
            step: self.step,
            vocab_size: self.vocab_size,
            config: self.config.clone(),
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            adam_step: self.adam.step,
            arrays,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| format_err(e.to_string()))?;

        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            out.write_all(MAGIC)?;
            out.write_all(&VERSION.to_le_bytes())?;
            out.write_all(&(json.len() as u64).to_le_bytes())?;
            out.write_all(&json)?;
            for t in payload {
                for v in t.data() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            out.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = std::io::BufReader::new(crate::error::open_file(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err(format!("{} is not a checkpoint", path.display())));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(format_err(format!("checkpoint version {version} is not supported")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| format_err(e.to_string()))?;

        let mut params = ParamStore::new();
        let mut adam = Adam {
            beta1: manifest.adam_beta1,
            beta2: manifest.adam_beta2,
            eps: manifest.adam_eps,
            step: manifest.adam_step,
            ..Adam::default()
        };
        let mut buf = [0u8; 8];
        for entry in manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(&entry.shape, data)?;
            match entry.role {
                Role::Param => params.insert(entry.name, t, entry.group),
                Role::AdamM => {
                    adam.m.insert(entry.name, t);
                }
                Role::AdamV => {
                    adam.v.insert(entry.name, t);
                }
            }
        }
        if input.read(&mut buf)? != 0 {
            return Err(format_err("checkpoint has trailing bytes"));
        }
        Ok(Self {
            config: manifest.config,
            epoch: manifest.epoch,
            step: manifest.step,
            vocab_size: manifest.vocab_size,
            params,
            adam,
        })
    }
}
