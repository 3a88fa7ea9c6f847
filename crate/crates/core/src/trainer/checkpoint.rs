//! Checkpoint file format.
//!
//! ```text
//! "DMOE" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header lists every tensor (name, shape, byte offset into the payload,
//! dtype), the training step, the data-sampler generator state, the
//! effective run configuration and the SHA-256 of the payload. The payload is
//! the concatenation of all tensors as little-endian `f32`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DMOE";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::Contract(format!("invalid generator state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    rng: RngState,
    config: String,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub rng: RngState,
    /// Effective run configuration in `key = value` form.
    pub config_text: String,
    /// Named tensors: model parameters and optimizer moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.tensors.iter().map(|(_, t)| t.numel() * 4).sum());
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                dtype: "f32".into(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            step: self.step,
            rng: self.rng.clone(),
            config: self.config_text.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated);
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut expected = 0usize;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Header(format!(
                    "unsupported dtype {}",
                    e.dtype
                )));
            }
            if e.offset as usize != expected {
                return Err(CheckpointError::Header(format!(
                    "tensor {} has offset {}",
                    e.name, e.offset
                )));
            }
            expected += e.shape.iter().product::<usize>() * 4;
        }
        if payload.len() < expected {
            return Err(CheckpointError::Truncated);
        }
        if payload.len() > expected {
            return Err(CheckpointError::Header(
                "trailing bytes after payload".into(),
            ));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CheckpointError::Checksum);
        }

        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let start = e.offset as usize;
                let data = payload[start..start + n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = Tensor::new(e.shape.clone(), data)
                    .map_err(|err| CheckpointError::Header(err.to_string()))?;
                Ok((e.name.clone(), t))
            })
            .collect::<std::result::Result<Vec<_>, CheckpointError>>()?;
        Ok(Checkpoint {
            version,
            step: header.step,
            rng: header.rng,
            config_text: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|kind| Error::Checkpoint {
            path: path.to_path_buf(),
            kind,
        })
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(1);
        for _ in 0..7 {
            rng.next_u32();
        }
        Checkpoint {
            version: FORMAT_VERSION,
            step: 42,
            rng: RngState::capture(&rng),
            config_text: "layers = 2\nseed = 11\n".into(),
            tensors: vec![
                (
                    "model.a".into(),
                    Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 1.0),
                ),
                (
                    "adam_m.a".into(),
                    Tensor::from_fn(&[2, 3], |i| (i as f32).sin()),
                ),
                ("model.b".into(), Tensor::full(&[4], f32::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn bytes_roundtrip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn generator_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert_eq!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Checksum)
        );
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert_eq!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version {
                found: FORMAT_VERSION + 1,
                supported: FORMAT_VERSION
            })
        );
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().to_bytes();
        assert_eq!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated)
        );
        assert_eq!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(CheckpointError::Truncated)
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.dmoe");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let err = Checkpoint::load(&dir.path().join("missing.dmoe")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
