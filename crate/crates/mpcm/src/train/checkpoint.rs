//! Checkpoint directory format: `manifest.txt` (one
//! `name shape offset dtype` line per tensor), `weights.bin` (raw
//! little-endian f32), and `train_state.txt` (key/value scalars).
//! Round trips are bit-exact, which is what makes interrupted training
//! resumable without drift.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::decoder::{MpcmNet, NetConfig};
use crate::nn::ModelParams;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{EarlyStopper, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("entry `{entry}`: blob range {offset}..{end} exceeds weights.bin length {len}")]
    BlobRange {
        entry: String,
        offset: usize,
        end: usize,
        len: usize,
    },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("entry `{entry}`: shape {got:?} does not match expected {want:?}")]
    ShapeMismatch {
        entry: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("train_state.txt: {0}")]
    State(String),
    #[error("{0}")]
    Other(String),
}

pub type CkptResult<T> = std::result::Result<T, CkptError>;

const FORMAT_VERSION: u32 = 1;

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }
}

fn parse_shape(text: &str, line: usize) -> CkptResult<Vec<usize>> {
    if text == "scalar" {
        return Ok(vec![]);
    }
    text.split('x')
        .map(|d| {
            d.parse::<usize>().map_err(|_| CkptError::Manifest {
                line,
                msg: format!("bad shape `{text}`"),
            })
        })
        .collect()
}

struct RawCheckpoint {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    meta: BTreeMap<String, String>,
}

impl RawCheckpoint {
    fn take(&mut self, name: &str) -> CkptResult<(Vec<usize>, Vec<f32>)> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| CkptError::MissingEntry(name.to_string()))?;
        let (_, shape, data) = self.entries.swap_remove(idx);
        Ok((shape, data))
    }

    fn meta_u64(&self, key: &str) -> CkptResult<u64> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| CkptError::State(format!("missing key `{key}`")))?;
        let parsed = if let Some(hex) = raw.strip_prefix("0x") {
            u64::from_str_radix(hex, 16)
        } else {
            raw.parse()
        };
        parsed.map_err(|_| CkptError::State(format!("bad value for `{key}`: {raw}")))
    }

    fn meta_bool(&self, key: &str) -> CkptResult<bool> {
        Ok(self.meta_u64(key)? != 0)
    }
}

fn write_raw(
    dir: &Path,
    entries: &[(String, Vec<usize>, Vec<f32>)],
    meta: &BTreeMap<String, String>,
) -> CkptResult<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in entries {
        manifest.push_str(&format!(
            "{name} {} {} f32\n",
            shape_text(shape),
            blob.len()
        ));
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("weights.bin"), blob)?;
    let mut state = String::new();
    for (k, v) in meta {
        state.push_str(&format!("{k} {v}\n"));
    }
    fs::write(dir.join("train_state.txt"), state)?;
    Ok(())
}

fn read_raw(dir: &Path) -> CkptResult<RawCheckpoint> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut entries = Vec::new();
    for (ln, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[3] != "f32" {
            return Err(CkptError::Manifest {
                line: ln + 1,
                msg: format!("expected `name shape offset f32`, got `{line}`"),
            });
        }
        let name = parts[0].to_string();
        let shape = parse_shape(parts[1], ln + 1)?;
        let offset: usize = parts[2].parse().map_err(|_| CkptError::Manifest {
            line: ln + 1,
            msg: format!("bad offset `{}`", parts[2]),
        })?;
        let count: usize = shape.iter().product::<usize>().max(1);
        let end = offset + 4 * count;
        if end > blob.len() {
            return Err(CkptError::BlobRange {
                entry: name,
                offset,
                end,
                len: blob.len(),
            });
        }
        let data: Vec<f32> = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((name, shape, data));
    }
    let mut meta = BTreeMap::new();
    let state = fs::read_to_string(dir.join("train_state.txt"))?;
    for line in state.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once(' ') {
            Some((k, v)) => {
                meta.insert(k.to_string(), v.trim().to_string());
            }
            None => return Err(CkptError::State(format!("bad line `{line}`"))),
        }
    }
    Ok(RawCheckpoint { entries, meta })
}

/// Serializes parameters, buffers, optimizer moments, and loop state.
pub fn save(dir: &Path, trainer: &Trainer) -> CkptResult<()> {
    let params = &trainer.params;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for id in params.ids() {
        let t = params.get(id);
        entries.push((params.name(id).to_string(), t.shape().to_vec(), t.to_vec()));
    }
    for (slot, id) in trainer.adam.ids().iter().enumerate() {
        let (m, v) = trainer.adam.moments(slot);
        let shape = params.get(*id).shape().to_vec();
        let name = params.name(*id);
        entries.push((format!("adam.m.{name}"), shape.clone(), m.to_vec()));
        entries.push((format!("adam.v.{name}"), shape, v.to_vec()));
    }
    let mut meta = BTreeMap::new();
    meta.insert("format_version".into(), FORMAT_VERSION.to_string());
    meta.insert("c0".into(), trainer.cfg.net.c0.to_string());
    meta.insert("heads".into(), trainer.cfg.net.heads.to_string());
    meta.insert("scan_state".into(), trainer.cfg.net.scan_state.to_string());
    meta.insert(
        "scan_per_direction".into(),
        (trainer.cfg.net.scan_per_direction as u8).to_string(),
    );
    meta.insert("crop_size".into(), trainer.cfg.crop_size.to_string());
    meta.insert("epoch".into(), trainer.epoch.to_string());
    meta.insert("adam_step".into(), trainer.adam.step.to_string());
    meta.insert(
        "best_val_bits".into(),
        format!("0x{:016x}", trainer.stopper.best.to_bits()),
    );
    meta.insert(
        "since_improve".into(),
        trainer.stopper.since_improve.to_string(),
    );
    meta.insert("rng_state".into(), format!("0x{:016x}", trainer.rng.state()));
    write_raw(dir, &entries, &meta)
}

fn net_config_from_meta(raw: &RawCheckpoint) -> CkptResult<NetConfig> {
    Ok(NetConfig {
        c0: raw.meta_u64("c0")? as usize,
        heads: raw.meta_u64("heads")? as usize,
        scan_state: raw.meta_u64("scan_state")? as usize,
        scan_per_direction: raw.meta_bool("scan_per_direction")?,
    })
}

fn fill_params(params: &ModelParams<f32>, raw: &mut RawCheckpoint) -> CkptResult<()> {
    for id in params.ids() {
        let name = params.name(id).to_string();
        let (shape, data) = raw.take(&name)?;
        let want = params.get(id).shape().to_vec();
        if shape != want {
            return Err(CkptError::ShapeMismatch {
                entry: name,
                got: shape,
                want,
            });
        }
        params.set(
            id,
            Tensor::from_vec(shape, data).map_err(|e| CkptError::Other(e.to_string()))?,
        );
    }
    Ok(())
}

/// Rebuilds the model for inference (eval / segment).
pub fn load_model(dir: &Path) -> CkptResult<(MpcmNet, ModelParams<f32>, usize)> {
    let mut raw = read_raw(dir)?;
    let net_cfg = net_config_from_meta(&raw)?;
    let crop = raw.meta_u64("crop_size")? as usize;
    let mut params = ModelParams::<f32>::new(0);
    let net = MpcmNet::new(&mut params, net_cfg).map_err(|e| CkptError::Other(e.to_string()))?;
    fill_params(&params, &mut raw)?;
    Ok((net, params, crop))
}

/// Restores a full training state; `cfg` supplies the loop
/// hyperparameters while the architecture comes from the checkpoint.
pub fn load(dir: &Path, mut cfg: TrainConfig) -> CkptResult<Trainer> {
    let mut raw = read_raw(dir)?;
    cfg.net = net_config_from_meta(&raw)?;
    let mut trainer = Trainer::new(cfg).map_err(|e| CkptError::Other(e.to_string()))?;
    fill_params(&trainer.params, &mut raw)?;
    for slot in 0..trainer.adam.ids().len() {
        let id = trainer.adam.ids()[slot];
        let name = trainer.params.name(id).to_string();
        let (_, m) = raw.take(&format!("adam.m.{name}"))?;
        let (_, v) = raw.take(&format!("adam.v.{name}"))?;
        trainer.adam.set_moments(slot, m, v);
    }
    trainer.adam.step = raw.meta_u64("adam_step")?;
    trainer.epoch = raw.meta_u64("epoch")? as usize;
    trainer.stopper = EarlyStopper {
        patience: trainer.cfg.early_stop_patience,
        best: f64::from_bits(raw.meta_u64("best_val_bits")?),
        since_improve: raw.meta_u64("since_improve")? as usize,
    };
    trainer.rng = Rng::from_state(raw.meta_u64("rng_state")?);
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("mpcm_ckpt_{}_{name}", std::process::id()))
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            crop_size: 32,
            epochs: 3,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp("round");
        let trainer = Trainer::new(tiny_cfg()).unwrap();
        save(&dir, &trainer).unwrap();
        let loaded = load(&dir, tiny_cfg()).unwrap();
        for id in trainer.params.ids() {
            let a = trainer.params.get(id);
            let other = loaded.params.lookup(trainer.params.name(id)).unwrap();
            let b = loaded.params.get(other);
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.to_vec(), b.to_vec(), "{}", trainer.params.name(id));
        }
        assert_eq!(loaded.epoch, trainer.epoch);
        assert_eq!(loaded.adam.step, trainer.adam.step);
        assert_eq!(loaded.rng.state(), trainer.rng.state());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_blob_names_the_offending_entry() {
        let dir = tmp("trunc");
        let trainer = Trainer::new(tiny_cfg()).unwrap();
        save(&dir, &trainer).unwrap();
        let blob = std::fs::read(dir.join("weights.bin")).unwrap();
        std::fs::write(dir.join("weights.bin"), &blob[..blob.len() - 8]).unwrap();
        match load(&dir, tiny_cfg()) {
            Err(CkptError::BlobRange { entry, .. }) => {
                assert!(!entry.is_empty(), "error names the entry: {entry}");
            }
            other => panic!("unexpected: {:?}", other.err()),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn inference_load_rebuilds_the_architecture() {
        let dir = tmp("infer");
        let trainer = Trainer::new(tiny_cfg()).unwrap();
        save(&dir, &trainer).unwrap();
        let (_net, params, crop) = load_model(&dir).unwrap();
        assert_eq!(crop, 32);
        assert_eq!(params.len(), trainer.params.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}
