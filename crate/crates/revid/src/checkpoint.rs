//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "VFL1" (4 bytes)
//! format version, u32
//! config length, u64; config snapshot as TOML, UTF-8
//! tensor count, u64
//! per tensor:
//!   name length, u64; name, UTF-8
//!   trained flag, u8 (1 when the owning component finished its stage)
//!   rank, u64; dims, u64 each
//!   payload, element count x f64
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Floats are stored bit-exactly, so `load(save(m))` reproduces every
//! parameter bitwise. The checksum covers the whole body; truncation or a
//! flipped byte anywhere surfaces as a corruption error before any content
//! is interpreted.

use crate::pipeline::{Component, ModelConfig, PipelineError, PipelineModel};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: [u8; 4] = *b"VFL1";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Errors from writing or reading a checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed for {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error("checkpoint config snapshot does not parse: {source}")]
    BadConfig { source: Box<toml::de::Error> },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Serializes the model (config snapshot, every named parameter, per-tensor
/// trained flags) and writes it to `path` in one atomic buffer.
pub fn save_checkpoint(model: &PipelineModel, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config_text =
        toml::to_string(model.config()).expect("model config serializes to TOML by construction");
    push_bytes(&mut buf, config_text.as_bytes());

    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params {
        push_bytes(&mut buf, name.as_bytes());
        let trained = PipelineModel::component_of(&name)
            .map(|c| model.trained().contains(&c))
            .unwrap_or(false);
        buf.push(u8::from(trained));
        buf.extend_from_slice(&(tensor.rank() as u64).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &value in tensor.data() {
            buf.extend_from_slice(&value.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a checkpoint back into a full model: verifies magic, version, and
/// checksum, rebuilds the skeleton from the config snapshot, then installs
/// every stored tensor (shapes validated) and the trained-component set.
pub fn load_checkpoint(path: &Path) -> Result<PipelineModel, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(CheckpointError::Corrupt {
            reason: format!("file is only {} bytes long", bytes.len()),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(CheckpointError::Corrupt {
            reason: "checksum mismatch".into(),
        });
    }

    let mut cursor = Cursor {
        bytes: body,
        at: MAGIC.len(),
    };
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }

    let config_text = cursor.utf8()?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|source| CheckpointError::BadConfig {
            source: Box::new(source),
        })?;
    // The skeleton initialization is immediately overwritten below; the
    // seed only has to be something.
    let mut model = PipelineModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected: BTreeSet<String> = model.named_params().into_iter().map(|(n, _)| n).collect();

    let count = cursor.u64()? as usize;
    let mut seen = BTreeSet::new();
    let mut trained: BTreeSet<Component> = BTreeSet::new();
    for _ in 0..count {
        let name = cursor.utf8()?;
        let flag = cursor.u8()? != 0;
        let rank = cursor.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cursor.f64()?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt {
            reason: format!("tensor '{name}': {e}"),
        })?;
        model.set_param(&name, tensor)?;
        if flag {
            if let Some(component) = PipelineModel::component_of(&name) {
                trained.insert(component);
            }
        }
        seen.insert(name);
    }

    if cursor.at != body.len() {
        return Err(CheckpointError::Corrupt {
            reason: format!("{} unread bytes after the tensor table", body.len() - cursor.at),
        });
    }
    if seen != expected {
        let missing: Vec<&String> = expected.difference(&seen).collect();
        return Err(CheckpointError::Corrupt {
            reason: format!("parameter set mismatch, missing {missing:?}"),
        });
    }
    for component in trained {
        model.mark_trained(component);
    }
    Ok(model)
}

fn push_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Bounds-checked sequential reader over the checkpoint body.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.at..end];
                self.at = end;
                Ok(slice)
            }
            None => Err(CheckpointError::Corrupt {
                reason: format!("unexpected end of file at byte {}", self.at),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Corrupt {
            reason: format!("invalid UTF-8 string at byte {}", self.at - len),
        })
    }
}
