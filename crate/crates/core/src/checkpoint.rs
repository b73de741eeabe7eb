//! Self-describing checkpoint archive.
//!
//! Layout: the magic line `RDU-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON header (model config, vocabulary, tensor manifest), then
//! raw little-endian `f64` tensor data in manifest order. Parameters are
//! stored in `f64` regardless of the in-memory scalar type, so save/load is
//! lossless for both `f32` and `f64` models.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::Vocab;
use crate::model::{ModelConfig, RduModel};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"RDU-CKPT-1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint header: {0}")]
    BadHeader(String),
    #[error("tensor data truncated")]
    Truncated,
    #[error("model rebuild failed: {0}")]
    Rebuild(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

/// Writes a model to `path` in the versioned archive format.
pub fn save_checkpoint<S: Scalar>(model: &RduModel<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut file = BufWriter::new(File::create(path)?);
    let tensors: Vec<TensorMeta> = model
        .store
        .iter()
        .map(|(_, name, t)| TensorMeta {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
        })
        .collect();
    let header = Header {
        dtype: "f64".to_string(),
        config: model.config.clone(),
        vocab: model.vocab.words().to_vec(),
        tensors,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, _, t) in model.store.iter() {
        for x in t.data() {
            file.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Loads a model from `path`, converting parameters to the requested scalar.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<RduModel<S>, CheckpointError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    file.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.dtype != "f64" {
        return Err(CheckpointError::BadHeader(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }

    let mut store: ParamStore<S> = ParamStore::new();
    for meta in &header.tensors {
        let n = meta.rows * meta.cols;
        let mut bytes = vec![0u8; n * 8];
        file.read_exact(&mut bytes).map_err(|_| CheckpointError::Truncated)?;
        let data: Vec<S> = bytes
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.add(meta.name.clone(), Tensor::from_vec(meta.rows, meta.cols, data));
    }

    let vocab = Vocab::from_words(header.vocab);
    RduModel::from_parts(header.config, vocab, store)
        .map_err(|e| CheckpointError::Rebuild(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_model(seed: u64) -> RduModel<f32> {
        let vocab = Vocab::build(["total", "date", "acme"].into_iter(), 100);
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden_size: 16,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: 32,
                ..EncoderConfig::default()
            },
            k: 2,
            rep_hidden: 8,
            per_layer_proposal_weights: false,
        };
        RduModel::new(config, vocab, seed).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = small_model(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded: RduModel<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.words(), model.vocab.words());
        for ((_, n1, t1), (_, n2, t2)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        let e = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(e, CheckpointError::BadMagic));
    }

    #[test]
    fn rejects_truncated_data() {
        let model = small_model(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let e = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(matches!(e, CheckpointError::Truncated));
    }
}
