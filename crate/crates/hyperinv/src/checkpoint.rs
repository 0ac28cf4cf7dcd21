//! Checkpoints: a JSON manifest (names, shapes, byte offsets, embedded
//! metadata) plus a raw little-endian f64 blob. Round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// Arbitrary self-description (architecture, config, families).
    pub meta: serde_json::Value,
    pub entries: Vec<EntryMeta>,
}

fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

/// Write `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Save named tensors under `dir/stem.{json,bin}`.
pub fn save(
    dir: &Path,
    stem: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(EntryMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        meta,
        entries,
    };
    write_atomic(&manifest_path(dir, stem), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_atomic(&blob_path(dir, stem), &blob)?;
    Ok(())
}

/// Load a checkpoint's metadata and named tensors.
pub fn load(dir: &Path, stem: &str) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mpath = manifest_path(dir, stem);
    let text = fs::read_to_string(&mpath)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        offset: 0,
        message: format!("manifest: {e}"),
    })?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Parse {
            path: mpath,
            offset: 0,
            message: format!("unsupported checkpoint format {}", manifest.format),
        });
    }
    let blob = fs::read(blob_path(dir, stem))?;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(Error::Parse {
                path: blob_path(dir, stem),
                offset: e.offset,
                message: format!("entry '{}' extends past blob end", e.name),
            });
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest.meta, tensors))
}

/// FNV-1a digest over manifest and blob bytes, for freezing checks.
pub fn digest(dir: &Path, stem: &str) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for path in [manifest_path(dir, stem), blob_path(dir, stem)] {
        for b in fs::read(path)? {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(h)
}
