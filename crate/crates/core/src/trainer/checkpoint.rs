//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `ONESTEP1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every array's values as little-endian
//! `f64` in manifest order.
//!
//! Manifest keys: `format_version`, `step`, `stage`, `rng_cursor`, `config`
//! (the full [`TrainConfig`]) and `arrays`, a list of `{group, name, shape,
//! trainable}`. Groups are `generator`, `discriminator`, and the optimizer
//! moments `generator.m`, `generator.v`, `discriminator.m`,
//! `discriminator.v`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nets::{Discriminator, Generator, ParamStore};
use crate::optim::Moments;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ONESTEP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub stage: u8,
    pub rng_cursor: u64,
    pub config: TrainConfig,
    pub arrays: Vec<ArrayEntry>,
}

/// File name of the checkpoint for `step`.
pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

fn push_store<'a>(group: &str, store: &'a ParamStore, entries: &mut Vec<ArrayEntry>, data: &mut Vec<&'a Tensor>) {
    for (name, p) in store.iter() {
        entries.push(ArrayEntry {
            group: group.into(),
            name: name.into(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
        data.push(&p.value);
    }
}

fn push_moments<'a>(group: &str, moments: &'a BTreeMap<String, Moments>, entries: &mut Vec<ArrayEntry>, data: &mut Vec<&'a Tensor>) {
    for (suffix, pick) in [("m", 0), ("v", 1)] {
        for (name, m) in moments {
            let t = if pick == 0 { &m.m } else { &m.v };
            entries.push(ArrayEntry {
                group: format!("{group}.{suffix}"),
                name: name.clone(),
                shape: t.shape().to_vec(),
                trainable: false,
            });
            data.push(t);
        }
    }
}

/// Writes the archive atomically (temp file then rename) and returns its path.
pub fn save(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    let mut data = Vec::new();
    push_store("generator", &state.generator.params, &mut arrays, &mut data);
    push_store("discriminator", &state.discriminator.params, &mut arrays, &mut data);
    push_moments("generator", &state.g_moments, &mut arrays, &mut data);
    push_moments("discriminator", &state.d_moments, &mut arrays, &mut data);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: state.step,
        stage: state.stage(cfg),
        rng_cursor: state.rng_cursor,
        config: cfg.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)?;
    let total: usize = data.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in data {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(checkpoint_name(state.step));
    let tmp = dir.join(format!(".{}.tmp", checkpoint_name(state.step)));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads the manifest and raw arrays without validating against a config.
pub fn read(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint archive", path.display())));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + n).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
    }
    let mut at = 16 + n;
    let mut tensors = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let len: usize = e.shape.iter().product();
        let raw = bytes
            .get(at..at + 8 * len)
            .ok_or_else(|| corrupt(format!("truncated data for {}/{}", e.group, e.name)))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(e.shape.clone(), values)?);
        at += 8 * len;
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes after array data"));
    }
    Ok((manifest, tensors))
}

/// Restores a [`TrainState`]. The stored config must equal `cfg` exactly.
pub fn load(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let (manifest, tensors) = read(path)?;
    if &manifest.config != cfg {
        return Err(corrupt(format!("{} was written with a different config", path.display())));
    }
    let mut state = TrainState::new(cfg)?;
    state.step = manifest.step;
    state.rng_cursor = manifest.rng_cursor;
    let mut seen = 0usize;
    for (e, t) in manifest.arrays.iter().zip(tensors) {
        let slot = match e.group.as_str() {
            "generator" => state.generator.params.get_mut(&e.name)?,
            "discriminator" => state.discriminator.params.get_mut(&e.name)?,
            "generator.m" => &mut moment(&mut state.g_moments, &e.name)?.m,
            "generator.v" => &mut moment(&mut state.g_moments, &e.name)?.v,
            "discriminator.m" => &mut moment(&mut state.d_moments, &e.name)?.m,
            "discriminator.v" => &mut moment(&mut state.d_moments, &e.name)?.v,
            other => return Err(corrupt(format!("unknown array group {other}"))),
        };
        if slot.shape() != t.shape() {
            return Err(Error::shape("checkpoint array", slot.shape(), t.shape()));
        }
        *slot = t;
        seen += 1;
    }
    let expected = state.generator.params.len()
        + state.discriminator.params.len()
        + 2 * (state.g_moments.len() + state.d_moments.len());
    if seen != expected {
        return Err(corrupt(format!("expected {expected} arrays, found {seen}")));
    }
    Ok(state)
}

fn moment<'a>(m: &'a mut BTreeMap<String, Moments>, name: &str) -> Result<&'a mut Moments> {
    m.get_mut(name).ok_or_else(|| corrupt(format!("no optimizer moments for {name}")))
}

/// Highest-step checkpoint in `dir`, if any.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Rebuilds standalone networks from a checkpoint, for inference.
pub fn load_networks(path: &Path) -> Result<(TrainConfig, Generator, Discriminator)> {
    let (manifest, _) = read(path)?;
    let cfg = manifest.config.clone();
    let state = load(path, &cfg)?;
    Ok((cfg, state.generator, state.discriminator))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.generator.token_dim = 16;
        c.generator.n_blocks = 1;
        c.generator.n_heads = 2;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 7;
        state.rng_cursor = 9;
        state.generator.params.get_mut("out_proj.weight").unwrap().data_mut()[0] = 0.123456789;
        state.g_moments.values_mut().next().unwrap().v.data_mut()[0] = 1e-300;
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), &state, &cfg).unwrap();
        assert_eq!(load(&path, &cfg).unwrap(), state);
        assert_eq!(latest(dir.path()).unwrap(), Some(path));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), &state, &cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 1;
        assert!(matches!(load(&path, &other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let cfg = tiny();
        let state = TrainState::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save(dir.path(), &state, &cfg).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&path, &cfg).is_err());
        assert!(matches!(load(&dir.path().join("nope.ckpt"), &cfg), Err(Error::MissingFile(_))));
    }
}
