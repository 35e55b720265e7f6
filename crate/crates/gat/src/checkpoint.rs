//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `GATCKPT1`, a length-prefixed JSON echo of the model
//! config, a length-prefixed text manifest (one `name shape offset` line per
//! array, offsets into the payload), then every parameter array as
//! little-endian f32 in declaration order. The decoder is bound-checked
//! end to end and never panics on malformed bytes.

use std::path::Path;

use thiserror::Error;

use crate::model::{layout, ModelConfig, ParamSet, ParamTensor};

pub const MAGIC: &[u8; 8] = b"GATCKPT1";

/// Caps protect the decoder from allocation bombs in hostile headers.
const MAX_SEGMENT: usize = 1 << 20;
const MAX_ENTRIES: usize = 4096;
const MAX_DIMS: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint truncated in {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint header field {what} exceeds limits")]
    Oversized { what: &'static str },
    #[error("config echo: {0}")]
    Config(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: &'static str },
    #[error("parameter {name}: {reason}")]
    Layout { name: String, reason: String },
    #[error("parameter {name} holds a non-finite value")]
    NonFinite { name: String },
    #[error("{extra} bytes of trailing data after the payload")]
    Trailing { extra: usize },
}

/// Serializes config and parameters into the container format. Fails if the
/// parameter set does not match the config's declaration-order layout.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ParamSet) -> Result<Vec<u8>, CheckpointError> {
    check_layout(cfg, &params.entries)?;
    let config_json = serde_json::to_vec(cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut manifest = String::new();
    let mut offset = 0usize;
    for e in &params.entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{} {} {}\n", e.name, dims.join("x"), offset));
        offset += 4 * e.data.len();
    }
    let mut out = Vec::with_capacity(8 + 8 + config_json.len() + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for e in &params.entries {
        for &v in &e.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.at < n {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn take_u32(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses and validates a checkpoint. The manifest must agree with the
/// config's layout and the payload must be exactly the declared size.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet), CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let cfg_len = r.take_u32("config length")?;
    if cfg_len > MAX_SEGMENT {
        return Err(CheckpointError::Oversized { what: "config" });
    }
    let cfg_bytes = r.take(cfg_len, "config echo")?;
    let cfg: ModelConfig = serde_json::from_slice(cfg_bytes).map_err(|e| CheckpointError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;

    let man_len = r.take_u32("manifest length")?;
    if man_len > MAX_SEGMENT {
        return Err(CheckpointError::Oversized { what: "manifest" });
    }
    let man_bytes = r.take(man_len, "manifest")?;
    let manifest =
        std::str::from_utf8(man_bytes).map_err(|_| CheckpointError::Manifest { line: 0, reason: "not utf-8" })?;

    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut expected_offset = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        let lineno = i + 1;
        if entries.len() >= MAX_ENTRIES {
            return Err(CheckpointError::Oversized { what: "manifest entries" });
        }
        let mut fields = line.split(' ');
        let (name, shape, offset) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(n), Some(s), Some(o), None) if !n.is_empty() => (n, s, o),
            _ => return Err(CheckpointError::Manifest { line: lineno, reason: "expected `name shape offset`" }),
        };
        let mut dims = Vec::new();
        for d in shape.split('x') {
            let v: usize =
                d.parse().map_err(|_| CheckpointError::Manifest { line: lineno, reason: "bad shape dim" })?;
            if v == 0 {
                return Err(CheckpointError::Manifest { line: lineno, reason: "zero shape dim" });
            }
            dims.push(v);
        }
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(CheckpointError::Manifest { line: lineno, reason: "bad shape arity" });
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n <= MAX_SEGMENT)
            .ok_or(CheckpointError::Manifest { line: lineno, reason: "shape overflow" })?;
        let offset: usize =
            offset.parse().map_err(|_| CheckpointError::Manifest { line: lineno, reason: "bad offset" })?;
        if offset != expected_offset {
            return Err(CheckpointError::Manifest { line: lineno, reason: "offset out of sequence" });
        }
        expected_offset += 4 * count;
        entries.push((name.to_string(), dims, count));
    }

    let payload = r.take(expected_offset, "payload")?;
    let extra = bytes.len() - r.at;
    if extra > 0 {
        return Err(CheckpointError::Trailing { extra });
    }

    let mut tensors = Vec::with_capacity(entries.len());
    let mut at = 0usize;
    for (name, shape, count) in entries {
        let mut data = Vec::with_capacity(count);
        for chunk in payload[at..at + 4 * count].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite { name });
            }
            data.push(v);
        }
        at += 4 * count;
        tensors.push(ParamTensor { name, shape, data });
    }
    check_layout(&cfg, &tensors)?;
    Ok((cfg, ParamSet::from_entries(tensors)))
}

fn check_layout(cfg: &ModelConfig, entries: &[ParamTensor]) -> Result<(), CheckpointError> {
    let want = layout(cfg);
    if entries.len() != want.len() {
        return Err(CheckpointError::Layout {
            name: "(count)".into(),
            reason: format!("{} arrays, config declares {}", entries.len(), want.len()),
        });
    }
    for (e, w) in entries.iter().zip(&want) {
        if e.name != w.name {
            return Err(CheckpointError::Layout {
                name: e.name.clone(),
                reason: format!("expected {} at this position", w.name),
            });
        }
        if e.shape != w.shape {
            return Err(CheckpointError::Layout {
                name: e.name.clone(),
                reason: format!("shape {:?}, config declares {:?}", e.shape, w.shape),
            });
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, encode_checkpoint(cfg, params)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet), CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Rounds every parameter through f32, exactly as a save/load cycle does.
pub fn quantize_f32(params: &ParamSet) -> ParamSet {
    let entries = params
        .entries
        .iter()
        .map(|e| ParamTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|&v| v as f32 as f64).collect(),
        })
        .collect();
    ParamSet::from_entries(entries)
}
