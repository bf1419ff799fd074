//! Training loops for single experts, whole expert sets and the plain
//! single-model baseline.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{expert_dir, load_checkpoint, save_checkpoint, ExpertTag};
use super::data::Dataset;
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::experts::{sample_timestep, MultiExpertConfig, TrainingConfig};
use crate::iunet::{Denoiser, ExpertArchConfig};
use crate::numerics::{Tape, Tensor};
use crate::rng;
use crate::schedule::{training_loss, DiffusionSchedule};

const TAG_INIT: u64 = 0x1417;
const TAG_STEP: u64 = 0x57e9;

/// Base seed of expert `n`. Expert 1 uses the run seed itself, so a
/// one-expert run reproduces single-model training.
pub fn expert_seed(seed: u64, n: usize) -> u64 {
    if n <= 1 {
        seed
    } else {
        rng::derive_seed(seed, &[n as u64])
    }
}

/// Seed of the parameter initialization for a base seed.
pub fn init_seed(base: u64) -> u64 {
    rng::derive_seed(base, &[TAG_INIT])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based index of the completed update.
    pub step: usize,
    pub loss: f64,
    pub loss_ema: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed updates.
    pub step: usize,
    pub loss_ema: Option<f64>,
    pub history: Vec<LossRecord>,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn fresh(model: &Denoiser, training: &TrainingConfig) -> Self {
        Self {
            step: 0,
            loss_ema: None,
            history: Vec::new(),
            optimizer: AdamW::new(
                AdamWConfig::new(training.learning_rate, training.weight_decay),
                model.params().values(),
            ),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Denoiser,
    pub state: TrainState,
    pub wall_clock_secs: f64,
}

/// Where checkpoints go and whether an existing one is continued.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub resume: bool,
}

fn check_data(arch: &ExpertArchConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let shape = data.image_shape();
    let m = arch.spatial_multiple();
    if shape[0] != arch.in_channels || !shape[1].is_multiple_of(m) || !shape[2].is_multiple_of(m) {
        return Err(Error::shape(
            "train",
            format!(
                "images {shape:?} do not fit an architecture with {} channels and {} stages",
                arch.in_channels,
                arch.num_stages()
            ),
        ));
    }
    Ok(())
}

/// ε-MSE and per-parameter gradients for one minibatch.
pub fn loss_and_gradients(model: &Denoiser, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = training_loss(&bound, &mut tape, x0, ts, eps, model.schedule())?;
    let value = tape.value(loss).item() as f64;
    let params = bound.params;
    let mut grads = tape.backward(loss)?;
    Ok((value, params.gradients(model.params(), &mut grads)))
}

/// One update at `state.step`; all randomness comes from `(base_seed, step)`.
fn train_step(
    model: &mut Denoiser,
    state: &mut TrainState,
    training: &TrainingConfig,
    base_seed: u64,
    data: &Dataset,
    draw_t: &dyn Fn(&mut ChaCha8Rng) -> usize,
) -> Result<()> {
    let step = state.step;
    let mut r = rng::stream(base_seed, &[TAG_STEP, step as u64]);
    let b = training.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..data.len())).collect();
    let ts: Vec<usize> = (0..b).map(|_| draw_t(&mut r)).collect();
    let x0 = data.batch(&idx)?;
    let eps = Tensor::randn(x0.shape(), &mut r);
    let t_max = ts.iter().copied().max().unwrap_or(0);
    let (loss, grads) = match loss_and_gradients(model, &x0, &ts, &eps) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => {
            return Err(Error::NumericalAbort {
                step,
                t: t_max,
                loss: f64::NAN,
            })
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(Error::NumericalAbort { step, t: t_max, loss });
    }
    state.optimizer.update(model.params_mut().values_mut(), &grads)?;
    let d = training.loss_ema_decay;
    let ema = state.loss_ema.map_or(loss, |e| d * e + (1.0 - d) * loss);
    state.loss_ema = Some(ema);
    state.step += 1;
    state.history.push(LossRecord {
        step: state.step,
        loss,
        loss_ema: ema,
    });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    mut model: Denoiser,
    mut state: TrainState,
    training: &TrainingConfig,
    base_seed: u64,
    data: &Dataset,
    draw_t: &dyn Fn(&mut ChaCha8Rng) -> usize,
    tag: ExpertTag,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    while state.step < training.iterations {
        train_step(&mut model, &mut state, training, base_seed, data, draw_t)?;
        let ci = training.checkpoint_interval;
        if let Some(dir) = opts.checkpoint_dir {
            if ci > 0 && state.step.is_multiple_of(ci) && state.step < training.iterations {
                save_checkpoint(dir, tag, &model, &state)?;
            }
        }
    }
    if let Some(dir) = opts.checkpoint_dir {
        save_checkpoint(dir, tag, &model, &state)?;
    }
    Ok(TrainOutcome {
        model,
        state,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn start_or_resume(
    arch: &ExpertArchConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
    training: &TrainingConfig,
    opts: TrainOptions,
) -> Result<(Denoiser, TrainState)> {
    if let (Some(dir), true) = (opts.checkpoint_dir, opts.resume) {
        if dir.join(super::checkpoint::MANIFEST).exists() {
            let (model, state, _) = load_checkpoint(dir)?;
            if model.config() != arch || model.schedule() != schedule || model.seed() != seed {
                return Err(Error::Config(format!(
                    "checkpoint in {} was trained with a different architecture, schedule or seed",
                    dir.display()
                )));
            }
            return Ok((model, state));
        }
    }
    let model = Denoiser::new(arch, schedule.clone(), seed)?;
    let state = TrainState::fresh(&model, training);
    Ok((model, state))
}

/// Trains expert `n` of `cfg`, drawing each sample's time-step with the
/// soft-expert rule.
pub fn train_expert(cfg: &MultiExpertConfig, n: usize, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    let spec = cfg.expert(n)?.clone();
    check_data(&spec.arch, data)?;
    let schedule = cfg.schedule.build()?;
    let steps = schedule.steps();
    let base = expert_seed(cfg.training.seed, n);
    let (model, state) = start_or_resume(&spec.arch, &schedule, init_seed(base), &cfg.training, opts)?;
    let tag = ExpertTag {
        n,
        interval: Some(spec.interval),
        p: Some(spec.p),
    };
    let draw = move |r: &mut ChaCha8Rng| sample_timestep(&spec, steps, r);
    run(model, state, &cfg.training, base, data, &draw, tag, opts)
}

/// Plain diffusion training of one network over the whole time range.
pub fn train_single(
    arch: &ExpertArchConfig,
    schedule: &DiffusionSchedule,
    training: &TrainingConfig,
    data: &Dataset,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    check_data(arch, data)?;
    let base = training.seed;
    let (model, state) = start_or_resume(arch, schedule, init_seed(base), training, opts)?;
    let steps = schedule.steps();
    let draw = move |r: &mut ChaCha8Rng| r.random_range(0..steps);
    run(model, state, training, base, data, &draw, ExpertTag::STANDALONE, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub n: usize,
    pub iterations: usize,
    pub wall_clock_secs: f64,
    pub final_loss_ema: Option<f64>,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub num_experts: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub concurrent: bool,
    pub total_wall_clock_secs: f64,
    pub experts: Vec<RunEntry>,
    /// Experts that failed, with their error messages.
    pub failures: Vec<(usize, String)>,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug)]
pub struct RunOutcome {
    pub experts: Vec<TrainOutcome>,
    pub manifest: RunManifest,
}

/// Trains the listed experts (all when `only` is empty) independently, one
/// after another or on one thread each. With a run directory, checkpoints land
/// in `experts/expert_<n>` and the run manifest next to them.
pub fn train_all(
    cfg: &MultiExpertConfig,
    data: &Dataset,
    run_dir: Option<&Path>,
    only: &[usize],
    concurrent: bool,
    resume: bool,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let which: Vec<usize> = if only.is_empty() {
        (1..=cfg.num_experts()).collect()
    } else {
        only.to_vec()
    };
    for &n in &which {
        cfg.expert(n)?;
    }
    let start = Instant::now();
    let dirs: Vec<Option<std::path::PathBuf>> = which.iter().map(|&n| run_dir.map(|d| expert_dir(d, n))).collect();
    let job = |i: usize| {
        train_expert(
            cfg,
            which[i],
            data,
            TrainOptions {
                checkpoint_dir: dirs[i].as_deref(),
                resume,
            },
        )
    };
    let results: Vec<Result<TrainOutcome>> = if concurrent {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..which.len()).map(|i| s.spawn(move || job(i))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Contract("training thread panicked".into())))
                })
                .collect()
        })
    } else {
        (0..which.len()).map(job).collect()
    };
    let mut experts = Vec::new();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (&n, r) in which.iter().zip(results) {
        match r {
            Ok(o) => {
                entries.push(RunEntry {
                    n,
                    iterations: o.state.step,
                    wall_clock_secs: o.wall_clock_secs,
                    final_loss_ema: o.state.loss_ema,
                    checkpoint: format!("experts/expert_{n}"),
                });
                experts.push(o);
            }
            Err(e) => {
                failures.push((n, e.to_string()));
                first_err.get_or_insert(e);
            }
        }
    }
    let manifest = RunManifest {
        num_experts: cfg.num_experts(),
        steps: cfg.steps(),
        concurrent,
        total_wall_clock_secs: start.elapsed().as_secs_f64(),
        experts: entries,
        failures,
    };
    let mut manifest = manifest;
    if let Some(dir) = run_dir {
        let path = dir.join(RUN_MANIFEST);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(old) = serde_json::from_str::<RunManifest>(&text) {
                let kept = old.experts.into_iter().filter(|e| !which.contains(&e.n));
                manifest.experts.extend(kept);
                manifest.experts.sort_by_key(|e| e.n);
            }
        }
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(RunOutcome { experts, manifest }),
    }
}
