//! On-disk checkpoints: `manifest.json`, `params.memt`, optimizer moments,
//! training state and the loss curve, one directory per expert.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::train::{LossRecord, TrainState};
use crate::error::{Error, Result};
use crate::experts::Interval;
use crate::iunet::{Denoiser, ExpertArchConfig};
use crate::numerics::container::{load_tensors, save_tensors};
use crate::numerics::Tensor;
use crate::schedule::ScheduleDescriptor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.memt";
pub const OPTIMIZER: &str = "optimizer.memt";
pub const STATE: &str = "train_state.json";
pub const LOSS_CSV: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// 1-based expert index; 0 for a model trained outside a multi-expert run.
    pub expert: usize,
    pub interval: Option<Interval>,
    pub p: Option<f64>,
    pub arch: ExpertArchConfig,
    pub schedule: ScheduleDescriptor,
    /// Seed of the parameter initialization.
    pub seed: u64,
    pub iterations: usize,
    pub loss_ema: Option<f64>,
    pub params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: usize,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    loss_ema: Option<f64>,
    history: Vec<LossRecord>,
}

/// `<run>/experts/expert_<n>`.
pub fn expert_dir(run_dir: &Path, n: usize) -> PathBuf {
    run_dir.join("experts").join(format!("expert_{n}"))
}

/// Identity of the expert a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertTag {
    pub n: usize,
    pub interval: Option<Interval>,
    pub p: Option<f64>,
}

impl ExpertTag {
    pub const STANDALONE: ExpertTag = ExpertTag {
        n: 0,
        interval: None,
        p: None,
    };
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("{} at {}", e.inner(), e.path()),
    })
}

/// Writes every file of a checkpoint into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, tag: ExpertTag, model: &Denoiser, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = model.params();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        expert: tag.n,
        interval: tag.interval,
        p: tag.p,
        arch: model.config().clone(),
        schedule: model.schedule().descriptor().clone(),
        seed: model.seed(),
        iterations: state.step,
        loss_ema: state.loss_ema,
        params: store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let values: Vec<&Tensor> = store.values().iter().collect();
    save_tensors(&dir.join(PARAMS), &values)?;
    let moments: Vec<&Tensor> = state.optimizer.m.iter().chain(&state.optimizer.v).collect();
    save_tensors(&dir.join(OPTIMIZER), &moments)?;
    write_json(
        &dir.join(STATE),
        &StateFile {
            step: state.step,
            optimizer: state.optimizer.config,
            optimizer_step: state.optimizer.step,
            loss_ema: state.loss_ema,
            history: state.history.clone(),
        },
    )?;
    write_loss_csv(&dir.join(LOSS_CSV), &state.history)?;
    // The manifest goes last so a complete manifest implies complete payloads.
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = Vec::with_capacity(history.len() * 24 + 16);
    writeln!(out, "step,loss_ema").expect("in-memory write");
    for r in history {
        writeln!(out, "{},{}", r.step, r.loss_ema).expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            reason: format!("format version {} (supported: {FORMAT_VERSION})", m.format_version),
        });
    }
    Ok(m)
}

/// Rebuilds the denoiser stored in `dir`.
pub fn load_denoiser(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let schedule = manifest.schedule.build()?;
    let mut model = Denoiser::new(&manifest.arch, schedule, manifest.seed)?;
    let path = dir.join(PARAMS);
    let values = load_tensors(&path)?;
    let fmt = |reason: String| Error::Format {
        path: path.clone(),
        reason,
    };
    if values.len() != manifest.params.len() || values.len() != model.params().len() {
        return Err(fmt(format!(
            "{} tensors, manifest lists {}, architecture has {}",
            values.len(),
            manifest.params.len(),
            model.params().len()
        )));
    }
    for ((entry, name), v) in manifest.params.iter().zip(model.params().names()).zip(&values) {
        if &entry.name != name || entry.shape != v.shape() {
            return Err(fmt(format!(
                "entry {} {:?} does not match parameter {name}",
                entry.name,
                v.shape()
            )));
        }
    }
    model.params_mut().load_values(values)?;
    Ok((model, manifest))
}

/// Rebuilds the denoiser and its training state for resumption.
pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, TrainState, CheckpointManifest)> {
    let (model, manifest) = load_denoiser(dir)?;
    let st: StateFile = read_json(&dir.join(STATE))?;
    let mut moments = load_tensors(&dir.join(OPTIMIZER))?;
    let np = model.params().len();
    if moments.len() != 2 * np {
        return Err(Error::Format {
            path: dir.join(OPTIMIZER),
            reason: format!("{} moment tensors for {np} parameters", moments.len()),
        });
    }
    let v = moments.split_off(np);
    let optimizer = AdamW::from_state(st.optimizer, st.optimizer_step, moments, v, model.params().values())?;
    let state = TrainState {
        step: st.step,
        loss_ema: st.loss_ema,
        history: st.history,
        optimizer,
    };
    Ok((model, state, manifest))
}
