//! Versioned checkpoint serialization.
//!
//! Layout, all little-endian: magic `AHNW`, version u32, length-prefixed
//! UTF-8 config echo, 32-byte vocabulary content hash, tensor directory of
//! (name, dtype, shape) entries, then the raw payloads in directory order.

use crate::binio::*;
use crate::model::{ModelParams, ParamTensor};
use crate::tensor::{Dtype, Real};
use indexmap::IndexMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{parse_config_echo, Result, TrainError};

const MAGIC: &[u8; 4] = b"AHNW";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub params: ModelParams<T>,
    pub vocab_hash: [u8; 32],
    pub config_echo: String,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::IncompatibleCheckpoint(msg.into())
}

pub fn save_checkpoint<T: Real>(checkpoint: &Checkpoint<T>, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| bad(format!("write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, VERSION).map_err(io)?;
    write_str(&mut w, &checkpoint.config_echo).map_err(io)?;
    w.write_all(&checkpoint.vocab_hash).map_err(io)?;
    write_u32(&mut w, checkpoint.params.len() as u32).map_err(io)?;
    for (name, p) in checkpoint.params.iter() {
        write_str(&mut w, name).map_err(io)?;
        write_u8(&mut w, T::DTYPE.code()).map_err(io)?;
        write_u32(&mut w, p.shape.len() as u32).map_err(io)?;
        for &d in &p.shape {
            write_u32(&mut w, d as u32).map_err(io)?;
        }
    }
    for (_, p) in checkpoint.params.iter() {
        for &v in &p.data {
            match T::DTYPE {
                Dtype::F32 => write_f32(&mut w, v.as_f64() as f32).map_err(io)?,
                Dtype::F64 => write_f64(&mut w, v.as_f64()).map_err(io)?,
            }
        }
    }
    w.flush().map_err(io)
}

/// Load a checkpoint, converting payloads to the requested precision when
/// the stored dtype differs.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let io = |e: std::io::Error| bad(format!("read {}: {e}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let magic = read_magic(&mut r).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_echo = read_str(&mut r).map_err(io)?;
    let mut vocab_hash = [0u8; 32];
    r.read_exact(&mut vocab_hash).map_err(io)?;

    let n_tensors = read_u32(&mut r).map_err(io)? as usize;
    let mut directory = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_str(&mut r).map_err(io)?;
        let dtype = Dtype::from_code(read_u8(&mut r).map_err(io)?)
            .ok_or_else(|| bad("unknown dtype code"))?;
        let ndim = read_u32(&mut r).map_err(io)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r).map_err(io)? as usize);
        }
        directory.push((name, dtype, shape));
    }

    let mut entries = IndexMap::with_capacity(n_tensors);
    for (name, dtype, shape) in directory {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = match dtype {
                Dtype::F32 => read_f32(&mut r).map_err(io)? as f64,
                Dtype::F64 => read_f64(&mut r).map_err(io)?,
            };
            data.push(T::from_f64(v));
        }
        entries.insert(name, ParamTensor { shape, data });
    }

    let (config, variant) = parse_config_echo(&config_echo)
        .map_err(|e| bad(format!("unparseable config echo: {e}")))?;
    let params = ModelParams::from_entries(config, variant, entries);
    Ok(Checkpoint {
        params,
        vocab_hash,
        config_echo,
    })
}

/// Read only the config echo, without loading tensor payloads. Lets callers
/// pick the right precision before a full load.
pub fn peek_checkpoint_echo(path: &Path) -> Result<String> {
    let io = |e: std::io::Error| bad(format!("read {}: {e}", path.display()));
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let magic = read_magic(&mut r).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    read_str(&mut r).map_err(io)
}

/// Load and refuse checkpoints trained against a different vocabulary.
pub fn load_checkpoint_for<T: Real>(path: &Path, vocab_hash: [u8; 32]) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    if ckpt.vocab_hash != vocab_hash {
        return Err(TrainError::VocabularyMismatch {
            checkpoint: hex(&ckpt.vocab_hash),
            dataset: hex(&vocab_hash),
        });
    }
    Ok(ckpt)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::train::{config_echo, TrainConfig};

    fn sample_checkpoint(seed: u64) -> Checkpoint<f64> {
        let cfg = ModelConfig::tiny(12, 3, 3);
        let params = ModelParams::init(cfg.clone(), Variant::Full, seed, 3.25).unwrap();
        let echo = config_echo(&cfg, Variant::Full, &TrainConfig::default());
        Checkpoint {
            params,
            vocab_hash: [7u8; 32],
            config_echo: echo,
        }
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let ckpt = sample_checkpoint(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.vocab_hash, ckpt.vocab_hash);
        assert_eq!(loaded.config_echo, ckpt.config_echo);
        assert_eq!(loaded.params.variant, Variant::Full);
        for ((an, ap), (bn, bp)) in ckpt.params.iter().zip(loaded.params.iter()) {
            assert_eq!(an, bn);
            assert_eq!(ap.shape, bp.shape);
            let bits_a: Vec<u64> = ap.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = bp.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {an} changed across roundtrip");
        }
    }

    #[test]
    fn f32_roundtrip_is_bitwise_exact() {
        let cfg = ModelConfig::tiny(12, 3, 3);
        let params = ModelParams::<f32>::init(cfg.clone(), Variant::Full, 9, 3.0).unwrap();
        let ckpt = Checkpoint {
            params,
            vocab_hash: [1u8; 32],
            config_echo: config_echo(&cfg, Variant::Full, &TrainConfig::default()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        for ((_, ap), (_, bp)) in ckpt.params.iter().zip(loaded.params.iter()) {
            let bits_a: Vec<u32> = ap.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = bp.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_file_is_incompatible() {
        let ckpt = sample_checkpoint(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(matches!(err, TrainError::IncompatibleCheckpoint(_)));
    }

    #[test]
    fn wrong_magic_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn vocab_hash_mismatch_is_refused_with_message() {
        let ckpt = sample_checkpoint(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let err = load_checkpoint_for::<f64>(&path, [9u8; 32]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vocabulary"), "{msg}");
        assert!(load_checkpoint_for::<f64>(&path, [7u8; 32]).is_ok());
    }
}
