//! Model checkpoints: a flat binary file (header with dims, then all
//! weights as little-endian f64 in declaration order) plus a text sidecar
//! listing each tensor's shape.

use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::recognizer::{ExtractorKind, ModelMeta, ModelParams};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const CKPT_MAGIC: &[u8; 8] = b"AROCKPT1";
const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Write `<path>` and the `<path>.shapes` sidecar.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let meta = &params.meta;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    match &meta.extractor {
        ExtractorKind::Conv { stage_channels } => {
            push_u32(&mut buf, 0);
            push_u32(&mut buf, stage_channels.len());
            for &c in stage_channels {
                push_u32(&mut buf, c);
            }
        }
        ExtractorKind::Mlp { hidden } => {
            push_u32(&mut buf, 1);
            push_u32(&mut buf, 1);
            push_u32(&mut buf, *hidden);
        }
    }
    push_u32(&mut buf, meta.input_channels);
    push_u32(&mut buf, meta.input_shape.height);
    push_u32(&mut buf, meta.input_shape.width);
    push_u32(&mut buf, meta.embed_dim);
    push_u32(&mut buf, meta.classes);
    buf.extend_from_slice(&(params.flat.len() as u64).to_le_bytes());
    for v in &params.flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;

    let mut sidecar = String::new();
    for entry in params.layout() {
        sidecar.push_str(&entry.name);
        for d in &entry.shape {
            sidecar.push(' ');
            sidecar.push_str(&d.to_string());
        }
        sidecar.push('\n');
    }
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, sidecar).map_err(|e| Error::io(&side_path, e))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".shapes");
    PathBuf::from(os)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let integrity = |detail: String| Error::Integrity {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(integrity("not a checkpoint file (bad magic)".into()));
    }
    let mut cursor = 8usize;
    let mut take_u32 = |bytes: &[u8]| -> Result<u32> {
        if cursor + 4 > bytes.len() {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: "truncated header".into(),
            });
        }
        let v = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
        cursor += 4;
        Ok(v)
    };
    let version = take_u32(&bytes)?;
    if version != VERSION {
        return Err(integrity(format!("unsupported checkpoint version {version}")));
    }
    let kind = take_u32(&bytes)?;
    let n_dims = take_u32(&bytes)? as usize;
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(take_u32(&bytes)? as usize);
    }
    let extractor = match kind {
        0 => ExtractorKind::Conv { stage_channels: dims },
        1 => ExtractorKind::Mlp {
            hidden: *dims.first().ok_or_else(|| integrity("missing mlp width".into()))?,
        },
        other => return Err(integrity(format!("unknown extractor kind {other}"))),
    };
    let input_channels = take_u32(&bytes)? as usize;
    let height = take_u32(&bytes)? as usize;
    let width = take_u32(&bytes)? as usize;
    let embed_dim = take_u32(&bytes)? as usize;
    let classes = take_u32(&bytes)? as usize;
    if cursor + 8 > bytes.len() {
        return Err(integrity("truncated header".into()));
    }
    let count = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
    cursor += 8;
    let expected = cursor + count * 8;
    if bytes.len() != expected {
        return Err(integrity(format!(
            "truncated weights: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes[cursor..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let meta = ModelMeta {
        input_channels,
        input_shape: GridShape::new(height, width),
        extractor,
        embed_dim,
        classes,
    };
    ModelParams::from_flat(meta, flat)
}
