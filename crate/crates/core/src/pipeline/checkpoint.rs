//! Checkpoint directories.
//!
//! ```text
//! manifest.json   tensor names, shapes, byte offsets, config and its hash
//! params.bin      little-endian f64 parameter values, manifest order
//! optimizer.bin   Adam first moments then second moments, same order
//! rng.json        seed, step and epoch
//! vocab.txt       one token per line
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::optim::AdamState;
use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::error::{Result, TcdError};
use crate::moe::MoEConfig;
use crate::transformer::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub mode: Mode,
    /// Effective geometry: `vocab_size` equals the saved vocabulary's length.
    pub model: ModelConfig,
    pub moe: Option<MoEConfig>,
    pub config: RunConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub params_bytes: usize,
    pub optimizer_steps: Option<Vec<u64>>,
}

/// Position in the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub seed: u64,
    /// Optimizer steps completed.
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub progress: Progress,
    pub vocab: Vocab,
}

fn write_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| TcdError::Parse(e.to_string()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TcdError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TcdError::io(path, e))
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .model
            .params()
            .iter()
            .map(|p| {
                let bytes = p.value.numel() * 8;
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    dtype: DTYPE.into(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        Manifest {
            format: FORMAT_VERSION,
            mode: self.mode,
            model: self.model.config().clone(),
            moe: self.model.moe_config().cloned(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            tensors,
            params_bytes: offset,
            optimizer_steps: self.optimizer.as_ref().map(|o| o.steps.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| TcdError::io(dir, e))?;
        let manifest = self.manifest();
        let mut params = Vec::with_capacity(manifest.params_bytes);
        for p in self.model.params().iter() {
            write_f64s(&mut params, p.value.data());
        }
        write(&dir.join("params.bin"), &params)?;
        if let Some(opt) = &self.optimizer {
            let mut blob = Vec::with_capacity(2 * manifest.params_bytes);
            for t in opt.m.iter().chain(&opt.v) {
                write_f64s(&mut blob, t.data());
            }
            write(&dir.join("optimizer.bin"), &blob)?;
        }
        write(&dir.join("rng.json"), to_json(&self.progress)?.as_bytes())?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        // manifest last: its presence marks a complete checkpoint
        write(&dir.join("manifest.json"), to_json(&manifest)?.as_bytes())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        let m: Manifest = serde_json::from_slice(&read(&path)?).map_err(|e| TcdError::Corruption(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT_VERSION {
            return Err(TcdError::Compatibility(format!("checkpoint format {} unsupported", m.format)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let mut model = Model::new(m.model.clone(), m.moe.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        let listed: Vec<(String, Vec<usize>)> = m.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != listed {
            return Err(TcdError::Corruption("manifest tensor list disagrees with its own geometry".into()));
        }
        let params = read(&dir.join("params.bin"))?;
        let total: usize = m.tensors.iter().map(|t| t.bytes).sum();
        if params.len() != total || total != m.params_bytes {
            return Err(TcdError::Corruption(format!(
                "params.bin holds {} bytes, manifest declares {}",
                params.len(),
                m.params_bytes
            )));
        }
        let mut values = Vec::with_capacity(m.tensors.len());
        for t in &m.tensors {
            if t.dtype != DTYPE || t.bytes != t.shape.iter().product::<usize>() * 8 || t.offset + t.bytes > params.len() {
                return Err(TcdError::Corruption(format!("bad manifest entry for {}", t.name)));
            }
            values.push(Tensor::new(t.shape.clone(), read_f64s(&params[t.offset..t.offset + t.bytes]))?);
        }
        let optimizer = match &m.optimizer_steps {
            None => None,
            Some(steps) => {
                let blob = read(&dir.join("optimizer.bin"))?;
                if blob.len() != 2 * total || steps.len() != m.tensors.len() {
                    return Err(TcdError::Corruption(format!(
                        "optimizer.bin holds {} bytes, expected {}",
                        blob.len(),
                        2 * total
                    )));
                }
                let mut m1 = Vec::with_capacity(m.tensors.len());
                let mut v = Vec::with_capacity(m.tensors.len());
                for t in &m.tensors {
                    m1.push(Tensor::new(t.shape.clone(), read_f64s(&blob[t.offset..t.offset + t.bytes]))?);
                    v.push(Tensor::new(t.shape.clone(), read_f64s(&blob[total + t.offset..total + t.offset + t.bytes]))?);
                }
                Some(AdamState {
                    m: m1,
                    v,
                    steps: steps.clone(),
                })
            }
        };
        let rng_path = dir.join("rng.json");
        let progress: Progress =
            serde_json::from_slice(&read(&rng_path)?).map_err(|e| TcdError::Corruption(format!("{}: {e}", rng_path.display())))?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        if vocab.len() != m.model.vocab_size {
            return Err(TcdError::Corruption(format!(
                "vocab.txt has {} entries, model expects {}",
                vocab.len(),
                m.model.vocab_size
            )));
        }
        for (t, value) in m.tensors.iter().zip(values) {
            model.set_param(&t.name, value)?;
        }
        Ok(Self {
            mode: m.mode,
            config: m.config,
            model,
            optimizer,
            progress,
            vocab,
        })
    }

    /// Loads a checkpoint and checks it has the given geometry.
    pub fn load_expecting(dir: &Path, model: &ModelConfig, moe: Option<&MoEConfig>) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        if &m.model != model || m.moe.as_ref() != moe {
            return Err(TcdError::Compatibility(format!(
                "{}: checkpoint geometry {:?}/{:?} differs from expected {:?}/{:?}",
                dir.display(),
                m.model,
                m.moe,
                model,
                moe
            )));
        }
        Self::load(dir)
    }
}
