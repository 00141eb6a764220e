//! Recorded embeddings keyed by image content hash or prompt string, and the
//! hashed generator used to synthesise them.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LCCOFIX\0"
//! version u32      1
//! dim     u32      embedding width D
//! count   u64      number of entries
//! entry*  kind u8 (0 = image, 1 = prompt), key_len u32, key (UTF-8),
//!         D x f64 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::Image;

const MAGIC: &[u8; 8] = b"LCCOFIX\0";
const VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryKind {
    Image,
    Prompt,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Image => "image",
            EntryKind::Prompt => "prompt",
        }
    }
}

/// Hex SHA-256 over the raster size and its pixels quantised to 8 bits.
pub fn image_key(image: &Image) -> String {
    let mut h = Sha256::new();
    h.update((image.height as u64).to_le_bytes());
    h.update((image.width as u64).to_le_bytes());
    let bytes: Vec<u8> = image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    h.update(&bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Unit vector drawn from a standard normal with ChaCha8 seeded by the first
/// eight bytes (little-endian) of `SHA-256(kind || 0x00 || key)`.
pub fn hashed_embedding(kind: EntryKind, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalized(v)
}

pub(crate) fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureStore {
    dim: usize,
    entries: BTreeMap<(EntryKind, String), Vec<f64>>,
}

impl FixtureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, kind: EntryKind, key: impl Into<String>, value: Vec<f64>) -> Result<()> {
        if value.len() != self.dim {
            return Err(Error::FixtureFile(format!(
                "embedding width {} in a store of width {}",
                value.len(),
                self.dim
            )));
        }
        let norm = value.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::FixtureFile(format!("embedding norm {norm} is not 1")));
        }
        self.entries.insert((kind, key.into()), value);
        Ok(())
    }

    pub fn get(&self, kind: EntryKind, key: &str) -> Option<&[f64]> {
        self.entries.get(&(kind, key.to_string())).map(Vec::as_slice)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for ((kind, key), v) in &self.entries {
            out.push(match kind {
                EntryKind::Image => 0,
                EntryKind::Prompt => 1,
            });
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::FixtureFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::FixtureFile(format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut store = Self::new(dim);
        for _ in 0..count {
            let kind = match r.take(1)?[0] {
                0 => EntryKind::Image,
                1 => EntryKind::Prompt,
                k => return Err(Error::FixtureFile(format!("unknown entry kind {k}"))),
            };
            let len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::FixtureFile("key is not UTF-8".into()))?
                .to_string();
            let v = r
                .take(dim * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(kind, key, v)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::FixtureFile("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::FixtureFile("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_embeddings_are_unit_and_stable() {
        let a = hashed_embedding(EntryKind::Prompt, "A photo of a cat", 16);
        let b = hashed_embedding(EntryKind::Prompt, "A photo of a cat", 16);
        let c = hashed_embedding(EntryKind::Image, "A photo of a cat", 16);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_key_depends_on_pixels_and_size() {
        let a = Image::filled(2, 2, [0.5, 0.5, 0.5]);
        let mut b = a.clone();
        b.set_pixel(1, 1, [0.0, 0.5, 0.5]);
        assert_ne!(image_key(&a), image_key(&b));
        assert_ne!(image_key(&a), image_key(&Image::filled(1, 4, [0.5, 0.5, 0.5])));
        assert_eq!(image_key(&a), image_key(&a.clone()));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let mut s = FixtureStore::new(8);
        s.insert(EntryKind::Image, "abc", hashed_embedding(EntryKind::Image, "abc", 8)).unwrap();
        s.insert(EntryKind::Prompt, "a dog", hashed_embedding(EntryKind::Prompt, "a dog", 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        s.save(&path).unwrap();
        let back = FixtureStore::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.checksum(), s.checksum());
    }

    #[test]
    fn rejects_invalid_entries_and_files() {
        let mut s = FixtureStore::new(2);
        assert!(s.insert(EntryKind::Image, "k", vec![1.0, 1.0]).is_err());
        assert!(s.insert(EntryKind::Image, "k", vec![1.0]).is_err());
        assert!(FixtureStore::from_bytes(b"nope").is_err());
        let mut bytes = FixtureStore::new(2).to_bytes();
        bytes.push(0);
        assert!(FixtureStore::from_bytes(&bytes).is_err());
    }
}
