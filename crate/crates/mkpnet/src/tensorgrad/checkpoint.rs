//! Checkpoint I/O: a JSON manifest of `{name, shape, offset}` entries plus a
//! companion blob of little-endian f32 values concatenated in manifest order.
//! Offsets are byte offsets into the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Tensor;
use super::param::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Writes `<stem>.json` and `<stem>.bin` under `dir`.
pub fn save(ps: &ParamSet, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ps.len());
    let mut blob: Vec<u8> = Vec::new();
    for p in ps.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&entries)?)?;
    fs::write(dir.join(format!("{stem}.bin")), blob)?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<ParamSet> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let blob = fs::read(dir.join(format!("{stem}.bin")))?;
    let mut ps = ParamSet::new();
    for e in manifest {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Data(format!(
                "checkpoint blob too short for {} ({} bytes, needs {end})",
                e.name,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        ps.add(&e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(ps)
}
