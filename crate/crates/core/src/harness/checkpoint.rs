//! Checkpoint container: named `f64` tensors plus a configuration snapshot.
//!
//! ```text
//! magic       8 bytes  "LCCOCKPT"
//! version     u32 LE   1
//! header_len  u64 LE
//! header      JSON {"config": <experiment config>, "step": n,
//!                   "tensors": [{"name", "shape", "offset"}]}
//! data        f64 LE values; `offset` counts values from the start of data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"LCCOCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: usize,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn to_bytes(config: &ExperimentConfig, step: usize, store: &ParamStore) -> Vec<u8> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        let values = p.values();
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            offset,
        });
        offset += values.len();
        for v in values.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        step,
        tensors,
    })
    .expect("serialisable header");
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let data = &bytes[header_end..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let tensors = header
        .tensors
        .into_iter()
        .map(|t| {
            let n: usize = t.shape.iter().product();
            let slice = values
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", t.name)))?;
            Ok((t.name, t.shape, slice.to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        tensors,
    })
}

pub fn save(path: &Path, config: &ExperimentConfig, step: usize, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(config, step, store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

impl Checkpoint {
    /// Copies every tensor into `store`; names and shapes must match exactly.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, shape, values) in &self.tensors {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {shape:?} in checkpoint, {:?} in model",
                    p.shape()
                )));
            }
            p.set(values.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut s, &mut rng);
        pb.param("a.w", &[2, 3], Init::Normal { std: 1.0 }).unwrap();
        pb.frozen().param("b", &[4], Init::Normal { std: 1.0 }).unwrap();
        s
    }

    #[test]
    fn round_trip_restores_values() {
        let src = store(1);
        let dst = store(2);
        assert_ne!(src.checksum(), dst.checksum());
        let cfg = ExperimentConfig::default();
        let ck = from_bytes(&to_bytes(&cfg, 7, &src)).unwrap();
        assert_eq!(ck.step, 7);
        assert_eq!(ck.config, cfg);
        ck.apply(&dst).unwrap();
        assert_eq!(src.checksum(), dst.checksum());
    }

    #[test]
    fn corrupt_and_mismatched_files_fail() {
        let src = store(1);
        let bytes = to_bytes(&ExperimentConfig::default(), 0, &src);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"LCCOCKPX").is_err());
        let mut other = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ParamBuilder::new(&mut other, &mut rng).param("a.w", &[3, 2], Init::Zeros).unwrap();
        assert!(from_bytes(&bytes).unwrap().apply(&other).is_err());
    }
}
