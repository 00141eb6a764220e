//! Pretrained CLIP served by a helper process speaking JSON lines on
//! stdin/stdout. Rust performs the CLIP image preprocessing; the helper
//! only runs the frozen encoders.
//!
//! Requests and replies, one JSON object per line:
//!
//! ```text
//! {"op":"info"}                                  -> {"dim":D,"model":"..."}
//! {"op":"encode_images","size":S,"pixels":[[..]]} -> {"embeddings":[[..]]}
//! {"op":"encode_texts","texts":["..."]}          -> {"embeddings":[[..]]}
//! {"op":"checksum"}                              -> {"checksum":"<hex>"}
//! any failure                                    -> {"error":"..."}
//! ```
//!
//! `pixels` holds one planar `3 x S x S` array per image, already resized and
//! normalised with the CLIP mean and standard deviation.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::fixture::normalized;
use super::ClipBackend;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::Image;

pub const CLIP_INPUT_SIZE: usize = 224;
const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalConfig {
    /// Program and arguments launching the helper.
    pub command: Vec<String>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            command: ["python3", "scripts/clip_encode.py", "--model", "openai/clip-vit-base-patch16"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Shortest side resized to `size` (bicubic), centre crop to `size x size`,
/// then per-channel CLIP normalisation. Planar output.
pub fn preprocess(image: &Image, size: usize) -> Vec<f32> {
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(
        image.width as u32,
        image.height as u32,
        image.data.iter().map(|v| *v as f32).collect(),
    )
    .expect("image buffer matches dimensions");
    let scale = size as f64 / image.height.min(image.width) as f64;
    let rh = ((image.height as f64 * scale).round() as u32).max(size as u32);
    let rw = ((image.width as f64 * scale).round() as u32).max(size as u32);
    let resized = imageops::resize(&buf, rw, rh, FilterType::CatmullRom);
    let top = (rh - size as u32) / 2;
    let left = (rw - size as u32) / 2;
    let mut out = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let px = resized.get_pixel(left + x as u32, top + y as u32);
            for c in 0..3 {
                let v = (px[c] as f64).clamp(0.0, 1.0);
                out[c * size * size + y * size + x] = ((v - CLIP_MEAN[c]) / CLIP_STD[c]) as f32;
            }
        }
    }
    out
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalBackend {
    channel: Mutex<Channel>,
    dim: usize,
    model: String,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ExternalBackend({}, d={})", self.model, self.dim)
    }
}

impl ExternalBackend {
    pub fn spawn(cfg: &ExternalConfig) -> Result<Self> {
        let (program, args) = cfg
            .command
            .split_first()
            .ok_or_else(|| Error::Config("external CLIP command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Encoder(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = Self {
            channel: Mutex::new(Channel { child, stdin, stdout }),
            dim: 0,
            model: String::new(),
        };
        let info = backend.request(&json!({"op": "info"}))?;
        backend.dim = info["dim"]
            .as_u64()
            .filter(|d| *d > 0)
            .ok_or_else(|| Error::Encoder("info reply lacks a positive dim".into()))? as usize;
        backend.model = info["model"].as_str().unwrap_or("unknown").to_string();
        Ok(backend)
    }

    fn request(&self, msg: &Value) -> Result<Value> {
        let mut ch = self.channel.lock().expect("encoder channel poisoned");
        let broken = |e: std::io::Error| Error::Encoder(format!("helper pipe: {e}"));
        let mut line = serde_json::to_string(msg).expect("serialisable request");
        line.push('\n');
        ch.stdin.write_all(line.as_bytes()).map_err(broken)?;
        ch.stdin.flush().map_err(broken)?;
        let mut reply = String::new();
        if ch.stdout.read_line(&mut reply).map_err(broken)? == 0 {
            return Err(Error::Encoder("helper exited".into()));
        }
        let v: Value = serde_json::from_str(&reply).map_err(|e| Error::Encoder(format!("bad reply: {e}")))?;
        if let Some(err) = v.get("error") {
            return Err(Error::Encoder(err.to_string()));
        }
        Ok(v)
    }

    fn embeddings(&self, reply: &Value, expected: usize) -> Result<Tensor> {
        let rows = reply["embeddings"]
            .as_array()
            .ok_or_else(|| Error::Encoder("reply lacks embeddings".into()))?;
        if rows.len() != expected {
            return Err(Error::Encoder(format!("{} embeddings for {expected} inputs", rows.len())));
        }
        let mut data = Vec::with_capacity(expected * self.dim);
        for row in rows {
            let row: Vec<f64> = row
                .as_array()
                .map(|r| r.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            if row.len() != self.dim {
                return Err(Error::Encoder(format!("embedding width {} != {}", row.len(), self.dim)));
            }
            data.extend(normalized(row));
        }
        Tensor::from_vec(data, &[expected, self.dim])
    }
}

impl ClipBackend for ExternalBackend {
    fn identity(&self) -> String {
        self.model.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_images(&self, images: &[Image]) -> Result<Tensor> {
        let pixels: Vec<Vec<f32>> = images.iter().map(|i| preprocess(i, CLIP_INPUT_SIZE)).collect();
        let reply = self.request(&json!({"op": "encode_images", "size": CLIP_INPUT_SIZE, "pixels": pixels}))?;
        self.embeddings(&reply, images.len())
    }

    fn encode_texts(&self, texts: &[String]) -> Result<Tensor> {
        let reply = self.request(&json!({"op": "encode_texts", "texts": texts}))?;
        self.embeddings(&reply, texts.len())
    }

    fn parameter_checksum(&self) -> Result<String> {
        let reply = self.request(&json!({"op": "checksum"}))?;
        reply["checksum"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Encoder("reply lacks checksum".into()))
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(ch) = self.channel.get_mut() {
            let _ = ch.child.kill();
            let _ = ch.child.wait();
        }
    }
}
