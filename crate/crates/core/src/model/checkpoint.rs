//! Checkpoint container: a plain-text header (format magic, configuration,
//! tensor manifest) followed by a blank line and the raw little-endian `f32`
//! payloads in manifest order. Round trips are bit-exact.

use super::{param_specs, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::TensorValue;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "seq2seq-ckpt v1";

/// Config keys in header order; the reader is strict about both.
const CONFIG_KEYS: [&str; 7] = [
    "vocab_size",
    "embed_dim",
    "hidden_dim",
    "enc_layers",
    "dec_layers",
    "dropout",
    "max_decode_len",
];

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Serialise parameters to `path`. The payload is written exactly as stored,
/// so `load_checkpoint(save_checkpoint(p)) == p` bitwise.
pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = params.config();
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("vocab_size={}\n", cfg.vocab_size));
    header.push_str(&format!("embed_dim={}\n", cfg.embed_dim));
    header.push_str(&format!("hidden_dim={}\n", cfg.hidden_dim));
    header.push_str(&format!("enc_layers={}\n", cfg.enc_layers));
    header.push_str(&format!("dec_layers={}\n", cfg.dec_layers));
    header.push_str(&format!("dropout={}\n", cfg.dropout));
    header.push_str(&format!("max_decode_len={}\n", cfg.max_decode_len));
    header.push_str(&format!("tensors={}\n", params.tensor_count()));
    for (name, t) in params.iter() {
        header.push_str(name);
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
    }
    header.push('\n');
    let mut bytes = header.into_bytes();
    for (_, t) in params.iter() {
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load and validate a checkpoint. The manifest must agree exactly (names,
/// shapes, order) with the manifest derived from the header configuration,
/// and the payload length must match to the byte.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| ckpt_err(path, "missing header/payload separator"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| ckpt_err(path, "header is not valid UTF-8"))?;
    let payload = &bytes[split + 2..];

    let mut lines = header.lines();
    let magic = lines
        .next()
        .ok_or_else(|| ckpt_err(path, "empty header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, format!("unrecognised format `{magic}`")));
    }
    let mut values = [0f64; 7];
    for (key, slot) in CONFIG_KEYS.iter().zip(values.iter_mut()) {
        let line = lines
            .next()
            .ok_or_else(|| ckpt_err(path, format!("missing `{key}` line")))?;
        let rest = line
            .strip_prefix(&format!("{key}="))
            .ok_or_else(|| ckpt_err(path, format!("expected `{key}=…`, found `{line}`")))?;
        *slot = rest
            .parse::<f64>()
            .map_err(|_| ckpt_err(path, format!("bad value for `{key}`: `{rest}`")))?;
    }
    let cfg = ModelConfig {
        vocab_size: values[0] as usize,
        embed_dim: values[1] as usize,
        hidden_dim: values[2] as usize,
        enc_layers: values[3] as usize,
        dec_layers: values[4] as usize,
        dropout: values[5],
        max_decode_len: values[6] as usize,
    };
    cfg.validate()?;
    let specs = param_specs(&cfg);
    let count_line = lines
        .next()
        .ok_or_else(|| ckpt_err(path, "missing `tensors=` line"))?;
    let count: usize = count_line
        .strip_prefix("tensors=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ckpt_err(path, format!("bad tensor count line `{count_line}`")))?;
    if count != specs.len() {
        return Err(ckpt_err(
            path,
            format!("manifest lists {count} tensors, expected {}", specs.len()),
        ));
    }
    for (name, shape, _) in &specs {
        let line = lines
            .next()
            .ok_or_else(|| ckpt_err(path, format!("manifest truncated before `{name}`")))?;
        let mut parts = line.split(' ');
        let have_name = parts.next().unwrap_or_default();
        if have_name != name {
            return Err(ckpt_err(
                path,
                format!("manifest entry `{have_name}` where `{name}` was expected"),
            ));
        }
        let dims: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| ckpt_err(path, format!("bad dim `{d}` for `{name}`"))))
            .collect::<Result<_>>()?;
        if &dims != shape {
            return Err(ckpt_err(
                path,
                format!("tensor `{name}` has shape {dims:?}, expected {shape:?}"),
            ));
        }
    }
    if let Some(extra) = lines.next() {
        return Err(ckpt_err(path, format!("unexpected header line `{extra}`")));
    }

    let total: usize = specs.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(ckpt_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), total * 4),
        ));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, _) in &specs {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += n * 4;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ckpt_err(path, format!("non-finite value in `{name}`")));
        }
        tensors.push(TensorValue::new(shape.clone(), data)?);
    }
    ModelParams::from_tensors(cfg, tensors)
}
