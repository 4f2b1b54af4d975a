//! Single-file parameter archive.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u64`
//! manifest length, the JSON manifest, then every array as little-endian
//! `f64` in manifest order. Nothing time- or host-dependent is written, so
//! identical registries give identical files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Backend, RunConfig};
use crate::model::Sammese;
use crate::error::{Error, Result};
use crate::params::{Owner, ParameterRegistry, Tag};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SMSECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub owner: Owner,
    pub tag: Tag,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch_hash: String,
    /// The full run configuration in config-file syntax.
    pub config: String,
    pub epoch: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn save(path: &Path, reg: &ParameterRegistry, cfg: &RunConfig, epoch: usize) -> Result<()> {
    let manifest = Manifest {
        arch_hash: cfg.arch_hash(),
        config: cfg.to_text(),
        epoch,
        entries: reg
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                owner: e.owner,
                tag: e.tag,
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let total: usize = reg.entries().iter().map(|e| e.value.numel()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in reg.entries() {
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Manifest and arrays, without checking them against any configuration.
pub fn read(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut offset = 20 + len;
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(&format!("truncated data for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after the last array"));
    }
    Ok((manifest, tensors))
}

/// Overwrite `reg` from `path` after checking the manifest matches `cfg` and
/// the registry's names, shapes and frozen/trainable split.
pub fn load(path: &Path, reg: &mut ParameterRegistry, cfg: &RunConfig) -> Result<Manifest> {
    let (manifest, tensors) = read(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if manifest.arch_hash != cfg.arch_hash() {
        return Err(bad("architecture hash differs from the current configuration".into()));
    }
    if manifest.entries.len() != reg.len() {
        return Err(bad(format!(
            "{} arrays in the archive, {} in the model",
            manifest.entries.len(),
            reg.len()
        )));
    }
    for (e, t) in manifest.entries.iter().zip(tensors) {
        let cur = reg
            .get(&e.name)
            .ok_or_else(|| bad(format!("unknown parameter `{}`", e.name)))?;
        if cur.tag != e.tag || cur.owner != e.owner {
            return Err(bad(format!("`{}` changed owner or frozen/trainable tag", e.name)));
        }
        reg.set(&e.name, t)?;
    }
    Ok(manifest)
}

/// Rebuild the model recorded in a checkpoint and load its weights.
///
/// The archive carries every frozen array too, so the model is rebuilt on the
/// stub backend regardless of the backend it was trained with.
pub fn restore(path: &Path) -> Result<(ParameterRegistry, Sammese, Manifest)> {
    let (manifest, _) = read(path)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&manifest.config)?;
    cfg.backend = Backend::Stub;
    let (mut reg, model) = Sammese::build(&cfg)?;
    let manifest = load(path, &mut reg, &cfg)?;
    Ok((reg, model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let cfg = RunConfig::toy();
        let (reg, _) = Sammese::build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, &reg, &cfg, 3).unwrap();
        save(&b, &reg, &cfg, 3).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let mut other_cfg = cfg.clone();
        other_cfg.seed = 5;
        let (mut other, _) = Sammese::build(&other_cfg).unwrap();
        let m = load(&a, &mut other, &other_cfg).unwrap();
        assert_eq!(m.epoch, 3);
        for e in reg.entries() {
            assert!(other.tensor(&e.name).unwrap().bit_eq(&e.value));
        }
    }

    #[test]
    fn architecture_mismatch_is_refused() {
        let cfg = RunConfig::toy();
        let (reg, _) = Sammese::build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &reg, &cfg, 0).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.num_queries = 4;
        let (mut reg2, _) = Sammese::build(&cfg2).unwrap();
        assert!(load(&p, &mut reg2, &cfg2).is_err());
        let (restored, model, _) = restore(&p).unwrap();
        assert_eq!(model.cfg.arch_hash(), cfg.arch_hash());
        assert_eq!(restored.snapshot(), reg.snapshot());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(read(&p).is_err());
    }
}
