//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `MFSNETCK`, format version `u32`, SHA-256 of the
//! embedded model config, seed `u64`, config TOML (`u32` length + UTF-8), tensor count
//! `u32`, then per tensor: name (`u32` length + UTF-8), shape (`4 × u64`), `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Mfsnet, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MFSNETCK";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// SHA-256 over the canonical TOML form of `cfg`, as lowercase hex.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let digest = Sha256::digest(config_toml(cfg).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_toml(cfg: &ModelConfig) -> String {
    toml::to_string(cfg).expect("model config serializes to TOML")
}

/// Metadata stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_checkpoint(
    w: &mut impl Write,
    cfg: &ModelConfig,
    seed: u64,
    store: &ParamStore<f32>,
) -> Result<()> {
    let toml = config_toml(cfg);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&Sha256::digest(toml.as_bytes()))?;
    w.write_all(&seed.to_le_bytes())?;
    write_str(w, &toml)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for entry in store.entries() {
        write_str(w, &entry.name)?;
        for d in entry.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|_| bad("string field is not UTF-8"))
}

/// Reads a checkpoint and rebuilds the network it describes.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Mfsnet, ParamStore<f32>, CheckpointMeta)> {
    if &read_array::<8>(r)? != MAGIC {
        return Err(bad("not an MFSNet checkpoint"));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hash: [u8; 32] = read_array(r)?;
    let seed = read_u64(r)?;
    let toml_text = read_str(r)?;
    if Sha256::digest(toml_text.as_bytes()).as_slice() != hash {
        return Err(bad("config hash does not match the embedded config"));
    }
    let cfg: ModelConfig =
        toml::from_str(&toml_text).map_err(|e| bad(format!("embedded config: {e}")))?;
    let (net, mut store) = Mfsnet::new::<f32>(&cfg, seed)?;
    let count = read_u32(r)? as usize;
    if count != store.len() {
        return Err(bad(format!(
            "expected {} tensors, found {count}",
            store.len()
        )));
    }
    for entry in store.entries_mut() {
        let name = read_str(r)?;
        if name != entry.name {
            return Err(bad(format!("expected tensor {}, found {name}", entry.name)));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = read_u64(r)? as usize;
        }
        if shape != entry.value.shape() {
            return Err(bad(format!(
                "{name}: shape {shape:?} != {:?}",
                entry.value.shape()
            )));
        }
        let mut raw = vec![0u8; entry.value.len() * 4];
        r.read_exact(&mut raw)
            .map_err(|e| bad(format!("truncated tensor {name}: {e}")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entry.value = Tensor::from_vec(shape, data);
    }
    let meta = CheckpointMeta {
        version,
        seed,
        config_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok((net, store, meta))
}

pub fn save(path: &Path, cfg: &ModelConfig, seed: u64, store: &ParamStore<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, cfg, seed, store)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Mfsnet, ParamStore<f32>, CheckpointMeta)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_restores_parameters() {
        let cfg = ModelConfig::default();
        let (_, mut store) = Mfsnet::new::<f32>(&cfg, 5).unwrap();
        store.entries_mut()[0].value.data_mut()[0] = 123.5;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, 5, &store).unwrap();
        let (net, loaded, meta) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(net.config(), &cfg);
        assert_eq!(meta.seed, 5);
        assert_eq!(meta.config_hash, config_hash(&cfg));
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = ModelConfig::default();
        let (_, store) = Mfsnet::new::<f32>(&cfg, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, 5, &store).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&mut bad_magic.as_slice()).is_err());
        let mut bad_hash = buf.clone();
        bad_hash[12] ^= 1;
        assert!(read_checkpoint(&mut bad_hash.as_slice()).is_err());
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
    }
}
