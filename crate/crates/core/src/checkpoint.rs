//! Model files: a text header line, one JSON manifest line, then the raw
//! parameter arrays as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use jkoflow_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::energy::{Mlp, Potential};
use crate::error::{Error, Result};
use crate::icnn::{IcnnConfig, IcnnParams};
use crate::trainer::{train, Model, ModelKind, TrainConfig, TrainOutcome};

pub const CHECKPOINT_HEADER: &str = "JKOFLOW-CHECKPOINT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub energy_sizes: Vec<usize>,
    pub seed: u64,
    pub steps: usize,
    pub fitted: bool,
    pub config: TrainConfig,
    pub theta: Option<IcnnConfig>,
    pub arrays: Vec<ArrayEntry>,
}

fn push_arrays(prefix: &str, names: Vec<String>, blocks: &[Tensor], entries: &mut Vec<ArrayEntry>, payload: &mut Vec<f64>) {
    for (name, b) in names.into_iter().zip(blocks) {
        entries.push(ArrayEntry {
            name: format!("{prefix}.{name}"),
            shape: b.shape().to_vec(),
            offset: payload.len(),
            len: b.len(),
        });
        payload.extend_from_slice(b.data());
    }
}

/// Serializes `model` into the checkpoint byte format.
pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    push_arrays("xi", model.energy.block_names(), model.energy.blocks(), &mut arrays, &mut payload);
    if let Some(theta) = &model.last_theta {
        push_arrays("theta", theta.config().block_names(), theta.blocks(), &mut arrays, &mut payload);
    }
    let manifest = CheckpointManifest {
        kind: model.kind,
        input_dim: model.input_dim(),
        energy_sizes: model.energy.sizes().to_vec(),
        seed: model.config.seed,
        steps: model.steps,
        fitted: model.fitted,
        config: model.config.clone(),
        theta: model.last_theta.as_ref().map(|t| *t.config()),
        arrays,
    };
    let json = serde_json::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(json.len() + 64 + payload.len() * 8);
    writeln!(out, "{CHECKPOINT_HEADER}").expect("vec write");
    writeln!(out, "{json}").expect("vec write");
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], path: &Path, what: &str) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, format!("missing {what} line")))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, format!("{what} line is not UTF-8")))?;
    Ok((line, &bytes[end + 1..]))
}

fn read_blocks(prefix: &str, names: &[String], manifest: &CheckpointManifest, payload: &[f64], path: &Path) -> Result<Vec<Tensor>> {
    names
        .iter()
        .map(|n| {
            let full = format!("{prefix}.{n}");
            let e = manifest
                .arrays
                .iter()
                .find(|a| a.name == full)
                .ok_or_else(|| Error::format(path, format!("array {full} missing")))?;
            let data = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::format(path, format!("array {full} runs past the payload")))?;
            Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| Error::format(path, format!("array {full}: {err}")))
        })
        .collect()
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Model> {
    let (header, rest) = take_line(bytes, path, "header")?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::format(path, format!("unsupported header {header:?}")));
    }
    let (json, raw) = take_line(rest, path, "manifest")?;
    let manifest: CheckpointManifest =
        serde_json::from_str(json).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if raw.len() % 8 != 0 {
        return Err(Error::format(path, "payload length is not a multiple of 8"));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let shell = Mlp::zeros(&manifest.energy_sizes)?;
    let xi = read_blocks("xi", &shell.block_names(), &manifest, &payload, path)?;
    let energy = Mlp::from_blocks(&manifest.energy_sizes, xi)?;
    if energy.input_dim() != manifest.input_dim || manifest.energy_sizes.last() != Some(&1) {
        return Err(Error::format(path, "energy sizes disagree with input_dim or do not end in 1"));
    }
    let last_theta = match &manifest.theta {
        Some(cfg) => {
            let blocks = read_blocks("theta", &cfg.block_names(), &manifest, &payload, path)?;
            Some(IcnnParams::from_blocks(*cfg, blocks)?)
        }
        None => None,
    };
    Ok(Model {
        kind: manifest.kind,
        energy,
        config: manifest.config,
        fitted: manifest.fitted,
        steps: manifest.steps,
        last_theta,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    // Write then rename so an interrupted save never clobbers the previous file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

/// Trains while writing `model.ckpt` every `checkpoint_every` steps and at
/// the end, `best.ckpt` for the lowest-loss epoch, and `loss_log.csv`.
/// A failed run leaves the last periodic checkpoint in place.
pub fn train_checkpointed(kind: ModelKind, data: &[crate::SnapshotDataset], cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model_path = dir.join("model.ckpt");
    let log_path = dir.join("loss_log.csv");
    let csv_err = |e: csv::Error| Error::format(&log_path, e.to_string());
    let mut log = csv::Writer::from_path(&log_path).map_err(csv_err)?;
    let every = cfg.checkpoint_every;
    let result = train(kind, data, cfg, |model, entry| {
        log.serialize(entry).map_err(csv_err)?;
        if every > 0 && entry.step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_model(model, &model_path)?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let out = result?;
    save_model(&out.model, &model_path)?;
    save_model(&out.best, &dir.join("best.ckpt"))?;
    Ok(out)
}
