//! Reader for the safetensors container (8-byte little-endian header length,
//! a JSON header mapping names to dtype/shape/byte range, then raw data).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        0x1f if frac == 0.0 => sign * f64::INFINITY,
        0x1f => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

pub fn parse(bytes: &[u8]) -> Result<BTreeMap<String, NamedTensor>> {
    let bad = |m: &str| Error::Weights(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than its header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
    let header = bytes.get(8..body_start).ok_or_else(|| bad("truncated header"))?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(header).map_err(|e| Error::Weights(format!("header: {e}")))?;
    let body = &bytes[body_start..];
    let mut out = BTreeMap::new();
    for (name, value) in raw {
        if name == "__metadata__" {
            continue;
        }
        let e: Entry = serde_json::from_value(value).map_err(|err| Error::Weights(format!("{name}: {err}")))?;
        let [lo, hi] = e.data_offsets;
        let chunk = body
            .get(lo..hi)
            .ok_or_else(|| Error::Weights(format!("{name}: data range out of bounds")))?;
        let data: Vec<f64> = match e.dtype.as_str() {
            "F64" => chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            "F32" => chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            "F16" => chunk
                .chunks_exact(2)
                .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            "BF16" => chunk
                .chunks_exact(2)
                .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
                .collect(),
            // Integer buffers such as batch counters are not weights.
            _ => continue,
        };
        if data.len() != e.shape.iter().product::<usize>() {
            return Err(Error::Weights(format!("{name}: size does not match shape {:?}", e.shape)));
        }
        out.insert(name, NamedTensor { shape: e.shape, data });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<BTreeMap<String, NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

/// Serialises `F32` tensors; used to produce test inputs.
pub fn write_f32(tensors: &BTreeMap<String, NamedTensor>) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut body = Vec::new();
    for (name, t) in tensors {
        let lo = body.len();
        for v in &t.data {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        header.insert(
            name.clone(),
            serde_json::json!({"dtype": "F32", "shape": t.shape, "data_offsets": [lo, body.len()]}),
        );
    }
    let header = serde_json::to_vec(&header).expect("serialisable header");
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out
}
