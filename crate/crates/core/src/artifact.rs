//! On-disk artifact formats: clip files, model checkpoints, content hashes.
//!
//! All formats are little-endian binary with a magic tag and version so
//! downstream stages can verify what they load. Writes go through a temp
//! file and rename.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthworld::VideoSample;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Clip files: u8 RGB frames + u8 class masks.
// ---------------------------------------------------------------------------

const CLIP_MAGIC: &[u8; 4] = b"SVCL";
const CLIP_VERSION: u32 = 1;

/// Serialize a clip. Pixels are quantized to u8; the world palette is
/// chosen on a /255 grid so this is lossless for rendered frames.
pub fn write_clip(path: &Path, sample: &VideoSample, num_classes: usize) -> Result<()> {
    let (k, h, w, _) = sample.frames.dim();
    let mut buf = Vec::with_capacity(16 + k * h * w * 4);
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in [k, h, w, num_classes] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&sample.clip_seed.to_le_bytes());
    for v in sample.frames.iter() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    buf.extend_from_slice(sample.masks.as_slice().expect("contiguous masks"));
    write_atomic(path, &buf)
}

pub struct ClipData {
    pub frames: Array4<f32>,
    pub masks: Array3<u8>,
    pub num_classes: usize,
    pub clip_seed: u64,
}

pub fn read_clip(path: &Path) -> Result<ClipData> {
    let buf = std::fs::read(path)?;
    if buf.len() < 32 || &buf[0..4] != CLIP_MAGIC {
        return Err(Error::Serialization(format!(
            "not a clip file: {}",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(Error::Serialization(format!("unsupported clip version {version}")));
    }
    let rd = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let (k, h, w, num_classes) = (rd(8), rd(12), rd(16), rd(20));
    let clip_seed = u64::from_le_bytes(buf[24..32].try_into().unwrap());
    let frame_bytes = k * h * w * 3;
    let mask_bytes = k * h * w;
    if buf.len() != 32 + frame_bytes + mask_bytes {
        return Err(Error::Serialization("clip payload size mismatch".into()));
    }
    let frames = Array4::from_shape_vec(
        (k, h, w, 3),
        buf[32..32 + frame_bytes]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect(),
    )
    .unwrap();
    let masks =
        Array3::from_shape_vec((k, h, w), buf[32 + frame_bytes..].to_vec()).unwrap();
    Ok(ClipData {
        frames,
        masks,
        num_classes,
        clip_seed,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned header + JSON metadata + named f64 arrays.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SVCK";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// Which model this is ("stage1", "stage2").
    pub kind: String,
    /// Config echo, serialized by the stage that owns it.
    pub config_json: String,
    /// Content hashes of upstream artifacts (PCA, codec stats, stage-1 id...).
    pub fingerprints: BTreeMap<String, String>,
}

pub fn write_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    names: &[String],
    values: &[ArrayD<f64>],
) -> Result<()> {
    assert_eq!(names.len(), values.len());
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, arr) in names.iter().zip(values.iter()) {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in arr.as_standard_layout().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f64>)>)> {
    let buf = std::fs::read(path).map_err(|_| {
        Error::Dependency(format!("checkpoint {}", path.display()))
    })?;
    let mut off = 0usize;
    let need = |off: usize, n: usize| -> Result<()> {
        if off + n > buf.len() {
            Err(Error::Serialization("truncated checkpoint".into()))
        } else {
            Ok(())
        }
    };
    need(off, 8)?;
    if &buf[0..4] != CKPT_MAGIC {
        return Err(Error::Serialization(format!(
            "not a checkpoint: {}",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Serialization(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    off = 8;
    let rd_u32 = |off: &mut usize| -> Result<u32> {
        need(*off, 4)?;
        let v = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let meta_len = rd_u32(&mut off)? as usize;
    need(off, meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&buf[off..off + meta_len])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    off += meta_len;
    let count = rd_u32(&mut off)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = rd_u32(&mut off)? as usize;
        need(off, name_len)?;
        let name = String::from_utf8(buf[off..off + name_len].to_vec())
            .map_err(|_| Error::Serialization("bad parameter name".into()))?;
        off += name_len;
        let ndim = rd_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(rd_u32(&mut off)? as usize);
        }
        let n: usize = shape.iter().product();
        need(off, n * 8)?;
        let data: Vec<f64> = buf[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n * 8;
        entries.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
        ));
    }
    Ok((meta, entries))
}

/// Fingerprint of a checkpoint file (used as the "stage-1 checkpoint id").
pub fn checkpoint_id(path: &Path) -> Result<String> {
    sha256_file(path)
}

// ---------------------------------------------------------------------------
// Newline-delimited JSON training logs.
// ---------------------------------------------------------------------------

pub struct NdjsonWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl NdjsonWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(NdjsonWriter {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        use std::io::Write;
        let line =
            serde_json::to_string(row).map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        use std::io::Write;
        self.file.flush()?;
        Ok(())
    }
}
