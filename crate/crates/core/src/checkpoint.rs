//! Self-describing checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SANLMCKP" | u32 version | u64 header length | JSON header
//! | tensor data (f64) | SHA-256 of every preceding byte
//! ```
//!
//! The header carries the model configuration, the vocabulary hash, the
//! step counter and seed, and a manifest of `(name, shape, offset)` for
//! every tensor in the data section. Offsets are in bytes from the start of
//! the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::tensor::{AdamState, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"SANLMCKP";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;
const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

/// The vocabulary a checkpoint was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRef {
    pub hash: String,
    pub path: String,
}

impl VocabRef {
    pub fn new(vocab: &Vocabulary, path: impl Into<String>) -> Self {
        Self {
            hash: vocab.hash(),
            path: path.into(),
        }
    }
}

/// A trained (or freshly initialized) model with enough state to resume
/// training. Every random stream used by training is derived from `seed`
/// and the step counter, so the pair is the complete rng state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: LanguageModel,
    pub vocab: VocabRef,
    pub step: u64,
    pub seed: u64,
    pub training: Option<TrainConfig>,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: VocabRef,
    step: u64,
    rng: RngRecord,
    training: Option<TrainConfig>,
    optimizer_step: Option<u64>,
    data_len: u64,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngRecord {
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let mut named: Vec<(String, &Tensor)> = store.iter().map(|p| (p.name.clone(), &p.value)).collect();
        if let Some(adam) = &self.optimizer {
            if adam.first_moment.len() != store.len() || adam.second_moment.len() != store.len() {
                return Err(CheckpointError::ConfigMismatch("optimizer state does not match parameters".into()).into());
            }
            for (p, m) in store.iter().zip(&adam.first_moment) {
                named.push((format!("{FIRST_MOMENT}{}", p.name), m));
            }
            for (p, v) in store.iter().zip(&adam.second_moment) {
                named.push((format!("{SECOND_MOMENT}{}", p.name), v));
            }
        }

        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                entry
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            config: *self.model.config(),
            vocab: self.vocab.clone(),
            step: self.step,
            rng: RngRecord {
                seed: self.seed,
                step: self.step,
            },
            training: self.training.clone(),
            optimizer_step: self.optimizer.as_ref().map(|a| a.step),
            data_len: offset,
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset as usize + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            }
            .into());
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if bytes.len() < PREFIX_LEN {
            return Err(CheckpointError::Truncated.into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = PREFIX_LEN
            .checked_add(header_len)
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < data_start {
            return Err(CheckpointError::Truncated.into());
        }
        let header: Header = match serde_json::from_slice(&bytes[PREFIX_LEN..data_start]) {
            Ok(h) => h,
            Err(e) => {
                return Err(if checksum_ok(bytes) {
                    CheckpointError::Corrupt(format!("header: {e}"))
                } else {
                    CheckpointError::Checksum
                }
                .into())
            }
        };
        let expected_len = data_start as u64 + header.data_len + DIGEST_LEN as u64;
        if (bytes.len() as u64) < expected_len {
            return Err(CheckpointError::Truncated.into());
        }
        if bytes.len() as u64 > expected_len {
            return Err(CheckpointError::Corrupt("trailing bytes after checksum".into()).into());
        }
        if !checksum_ok(bytes) {
            return Err(CheckpointError::Checksum.into());
        }
        if header.version != version {
            return Err(CheckpointError::Corrupt("header version disagrees with prefix".into()).into());
        }

        let data = &bytes[data_start..bytes.len() - DIGEST_LEN];
        let read = |name: &str| -> Result<Tensor> {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckpointError::ConfigMismatch(format!("missing tensor `{name}`")))?;
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 8 * numel;
            if end > data.len() {
                return Err(CheckpointError::Corrupt(format!("tensor `{name}` runs past the data section")).into());
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(entry.shape.clone(), values)
        };

        let mut model = LanguageModel::zeros(header.config)
            .map_err(|e| CheckpointError::ConfigMismatch(e.to_string()))?;
        let ids: Vec<_> = model.store().ids().collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for id in ids {
            let name = model.store().get(id).name.clone();
            let expected = model.store().value(id).shape().to_vec();
            let value = read(&name)?;
            if value.shape() != expected.as_slice() {
                return Err(CheckpointError::ConfigMismatch(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    value.shape(),
                    expected
                ))
                .into());
            }
            model.store_mut().get_mut(id).value = value;
            if header.optimizer_step.is_some() {
                first.push(read(&format!("{FIRST_MOMENT}{name}"))?);
                second.push(read(&format!("{SECOND_MOMENT}{name}"))?);
            }
        }
        let optimizer = header.optimizer_step.map(|step| AdamState {
            step,
            first_moment: first,
            second_moment: second,
        });
        if header.rng.step != header.step {
            return Err(CheckpointError::Corrupt("rng step disagrees with step counter".into()).into());
        }

        Ok(Self {
            model,
            vocab: header.vocab,
            step: header.step,
            seed: header.rng.seed,
            training: header.training,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the checkpoint was trained with `vocab`.
    pub fn load_with_vocab(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_vocab(vocab)?;
        Ok(ckpt)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab.hash {
            return Err(CheckpointError::VocabMismatch {
                expected: self.vocab.hash.clone(),
                found,
            }
            .into());
        }
        Ok(())
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if self.model.config() != config {
            return Err(CheckpointError::ConfigMismatch(format!(
                "checkpoint has {:?}, expected {:?}",
                self.model.config(),
                config
            ))
            .into());
        }
        Ok(())
    }
}

fn checksum_ok(bytes: &[u8]) -> bool {
    if bytes.len() < DIGEST_LEN {
        return false;
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    Sha256::digest(body).as_slice() == digest
}
