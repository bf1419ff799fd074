//! Time-step experts: interval partition, soft-expert time-step sampling,
//! routing, and multi-expert DDPM/DDIM generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iunet::{Denoiser, ExpertArchConfig};
use crate::numerics::container::{load_tensor, save_tensor};
use crate::numerics::Tensor;
use crate::rng;
use crate::schedule::{ddim_step, ddpm_reverse_step, forward_noise, DdimTarget, DiffusionSchedule, ScheduleDescriptor};

const TAG_INIT: u64 = 0x1a17;
const TAG_NOISE: u64 = 0x5e9;

/// Half-open range `[lo, hi)` of internal time-steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn contains(&self, t: usize) -> bool {
        self.lo <= t && t < self.hi
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }
}

/// `[(n-1)·T/N, n·T/N)` for `n = 1..=N`.
pub fn make_intervals(experts: usize, steps: usize) -> Result<Vec<Interval>> {
    if experts == 0 {
        return Err(Error::range("expert count", experts, "≥ 1"));
    }
    if !steps.is_multiple_of(experts) {
        return Err(Error::Config(format!("T = {steps} is not divisible by N = {experts}")));
    }
    let w = steps / experts;
    Ok((0..experts)
        .map(|i| Interval {
            lo: i * w,
            hi: (i + 1) * w,
        })
        .collect())
}

/// `p_n = 0.8 · 0.5^{3(n-1)/(N-1)}`, which is `[0.8, 0.4, 0.2, 0.1]` for four
/// experts; a single expert always trains on its own (full) interval.
pub fn default_probabilities(experts: usize) -> Vec<f64> {
    match experts {
        0 => Vec::new(),
        1 => vec![1.0],
        n => (0..n)
            .map(|i| 0.8 * 0.5f64.powf(3.0 * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    /// 1-based.
    pub n: usize,
    pub interval: Interval,
    /// Expertization probability.
    pub p: f64,
    pub arch: ExpertArchConfig,
}

/// With probability `p` a time-step uniform over the expert's interval,
/// otherwise uniform over `[0, T)`.
///
/// No Bernoulli draw is consumed when the outcome cannot matter (`p ∈ {0, 1}`
/// or an interval covering every step), so a single full-range expert draws
/// exactly like uniform single-model training.
pub fn sample_timestep<R: Rng + ?Sized>(spec: &ExpertSpec, steps: usize, rng: &mut R) -> usize {
    let full = spec.interval.lo == 0 && spec.interval.hi == steps;
    let own = if full || spec.p >= 1.0 {
        true
    } else if spec.p <= 0.0 {
        false
    } else {
        rng.random::<f64>() < spec.p
    };
    if own {
        rng.random_range(spec.interval.lo..spec.interval.hi)
    } else {
        rng.random_range(0..steps)
    }
}

/// Optimizer and loop settings shared by every expert of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "TrainingConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainingConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainingConfig::default_wd")]
    pub weight_decay: f64,
    /// Decay of the reported loss moving average.
    #[serde(default = "TrainingConfig::default_ema")]
    pub loss_ema_decay: f64,
    /// Write an intermediate checkpoint every this many steps (0 = only at the end).
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl TrainingConfig {
    fn default_batch() -> usize {
        16
    }
    fn default_lr() -> f64 {
        2e-4
    }
    fn default_wd() -> f64 {
        1e-2
    }
    fn default_ema() -> f64 {
        0.99
    }

    pub fn new(seed: u64, iterations: usize) -> Self {
        Self {
            seed,
            iterations,
            batch_size: Self::default_batch(),
            learning_rate: Self::default_lr(),
            weight_decay: Self::default_wd(),
            loss_ema_decay: Self::default_ema(),
            checkpoint_interval: 0,
        }
    }

    /// Learning rate after scaling the batch by `factor`, keeping `lr / batch` fixed.
    pub fn scaled_batch(&self, factor: f64) -> Self {
        let mut c = self.clone();
        c.batch_size = ((self.batch_size as f64) * factor).round().max(1.0) as usize;
        c.learning_rate = self.learning_rate * c.batch_size as f64 / self.batch_size as f64;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiExpertConfig {
    pub schedule: ScheduleDescriptor,
    pub experts: Vec<ExpertSpec>,
    pub training: TrainingConfig,
}

impl MultiExpertConfig {
    /// Experts with uniform intervals, the given probabilities and architectures.
    pub fn new(
        schedule: ScheduleDescriptor,
        probabilities: &[f64],
        archs: Vec<ExpertArchConfig>,
        training: TrainingConfig,
    ) -> Result<Self> {
        if probabilities.len() != archs.len() {
            return Err(Error::Config(format!(
                "{} probabilities for {} architectures",
                probabilities.len(),
                archs.len()
            )));
        }
        let intervals = make_intervals(archs.len(), schedule.steps)?;
        let experts = archs
            .into_iter()
            .zip(intervals)
            .zip(probabilities)
            .enumerate()
            .map(|(i, ((arch, interval), &p))| ExpertSpec {
                n: i + 1,
                interval,
                p,
                arch,
            })
            .collect();
        let cfg = Self {
            schedule,
            experts,
            training,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps
    }

    pub fn expert(&self, n: usize) -> Result<&ExpertSpec> {
        if n == 0 || n > self.experts.len() {
            return Err(Error::range("expert index", n, format!("1..={}", self.experts.len())));
        }
        Ok(&self.experts[n - 1])
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        let intervals = make_intervals(self.experts.len(), self.steps())?;
        for (i, (e, iv)) in self.experts.iter().zip(&intervals).enumerate() {
            if e.n != i + 1 {
                return Err(Error::Config(format!("expert at position {} has n = {}", i + 1, e.n)));
            }
            if e.interval != *iv {
                return Err(Error::Config(format!(
                    "expert {}: interval [{}, {}) differs from the uniform partition [{}, {})",
                    e.n, e.interval.lo, e.interval.hi, iv.lo, iv.hi
                )));
            }
            if !(0.0..=1.0).contains(&e.p) {
                return Err(Error::Config(format!("expert {}: p = {} outside [0, 1]", e.n, e.p)));
            }
            e.arch.validate()?;
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                t.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&t.loss_ema_decay) {
            return Err(Error::Config(format!(
                "loss_ema_decay {} outside [0, 1)",
                t.loss_ema_decay
            )));
        }
        Ok(())
    }
}

/// The expert `n` (1-based) whose interval contains `t`.
pub fn route(t: usize, cfg: &MultiExpertConfig) -> Result<usize> {
    if t >= cfg.steps() {
        return Err(Error::range("time-step", t, format!("[0, {})", cfg.steps())));
    }
    cfg.experts
        .iter()
        .find(|e| e.interval.contains(t))
        .map(|e| e.n)
        .ok_or_else(|| Error::Contract(format!("no expert covers t = {t}")))
}

/// Anything that predicts ε for a batch of noisy images.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

impl EpsPredictor for Denoiser {
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.denoise_batch(x_t, ts)
    }
}

impl<T: EpsPredictor + ?Sized> EpsPredictor for &T {
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        (**self).predict_eps(x_t, ts)
    }
}

/// Returns the exact ε that explains `x_t` given a planted clean image.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    /// `[C, H, W]`, shared by every sample.
    pub x0: Tensor,
    pub schedule: DiffusionSchedule,
}

impl EpsPredictor for OracleDenoiser {
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let per = self.x0.numel();
        if x_t.numel() != per * ts.len() {
            return Err(Error::shape(
                "oracle",
                format!("{:?} vs {} samples of {:?}", x_t.shape(), ts.len(), self.x0.shape()),
            ));
        }
        let mut out = Vec::with_capacity(x_t.numel());
        for (i, &t) in ts.iter().enumerate() {
            self.schedule.check_t(t)?;
            let ab = self.schedule.alpha_bar()[t];
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (&x, &c) in x_t.data()[i * per..(i + 1) * per].iter().zip(self.x0.data()) {
                out.push(((x as f64 - sa * c as f64) / sb) as f32);
            }
        }
        Tensor::new(x_t.shape(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub sampler: SamplerKind,
    /// Number of network evaluations; DDPM requires `T`.
    pub steps: usize,
    pub eta: f64,
    pub count: usize,
    pub seed: u64,
    /// `[C, H, W]`.
    pub image_shape: Vec<usize>,
    /// Trajectories evaluated together (defaults to `count`).
    pub chunk: Option<usize>,
}

/// How expert networks are held in memory during generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Paging {
    /// Every expert is loaded up front.
    Resident,
    /// One expert at a time; the batch state is spooled through `spool_dir`
    /// between experts.
    Sequential { spool_dir: PathBuf },
}

/// One reverse update: evaluate at `t`, move to `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedStep {
    pub t: usize,
    pub target: DdimTarget,
}

/// The ordered reverse steps of a sampler.
pub fn sampling_plan(s: &DiffusionSchedule, sampler: SamplerKind, steps: usize) -> Result<Vec<PlannedStep>> {
    match sampler {
        SamplerKind::Ddpm => {
            if steps != s.steps() {
                return Err(Error::Config(format!(
                    "the DDPM sampler runs all {} steps (got {steps})",
                    s.steps()
                )));
            }
            Ok((0..s.steps())
                .rev()
                .map(|t| PlannedStep {
                    t,
                    target: if t == 0 {
                        DdimTarget::Clean
                    } else {
                        DdimTarget::Step(t - 1)
                    },
                })
                .collect())
        }
        SamplerKind::Ddim => {
            let ts = s.ddim_timesteps(steps)?;
            Ok((0..ts.len())
                .rev()
                .map(|i| PlannedStep {
                    t: ts[i],
                    target: if i == 0 {
                        DdimTarget::Clean
                    } else {
                        DdimTarget::Step(ts[i - 1])
                    },
                })
                .collect())
        }
    }
}

fn image_noise(seed: u64, image: usize, t: usize, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, &mut rng::stream(seed, &[TAG_NOISE, image as u64, t as u64]))
}

/// The unit-Gaussian starting point of trajectory `image`.
pub fn initial_noise(seed: u64, image: usize, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, &mut rng::stream(seed, &[TAG_INIT, image as u64]))
}

struct Chunk {
    first: usize,
    x: Tensor,
}

fn apply_step(
    chunk: &mut Chunk,
    step: PlannedStep,
    model: &dyn EpsPredictor,
    s: &DiffusionSchedule,
    opts: &SampleOptions,
) -> Result<()> {
    let n = chunk.x.shape()[0];
    let ts = vec![step.t; n];
    let eps = model.predict_eps(&chunk.x, &ts)?;
    let shape = &opts.image_shape;
    let stochastic = match opts.sampler {
        SamplerKind::Ddpm => step.t > 0,
        SamplerKind::Ddim => opts.eta > 0.0,
    };
    let noise = if stochastic {
        let items: Vec<Tensor> = (0..n)
            .map(|i| image_noise(opts.seed, chunk.first + i, step.t, shape))
            .collect();
        Some(Tensor::stack(&items)?)
    } else {
        None
    };
    chunk.x = match opts.sampler {
        SamplerKind::Ddpm => {
            let zeros;
            let z = match &noise {
                Some(z) => z,
                None => {
                    zeros = Tensor::zeros(chunk.x.shape());
                    &zeros
                }
            };
            ddpm_reverse_step(&chunk.x, step.t, &eps, s, z)?
        }
        SamplerKind::Ddim => ddim_step(&chunk.x, step.t, step.target, &eps, opts.eta, s, noise.as_ref())?,
    };
    Ok(())
}

/// Consecutive runs of planned steps that route to the same expert.
fn segments(plan: &[PlannedStep], cfg: &MultiExpertConfig) -> Result<Vec<(usize, Vec<PlannedStep>)>> {
    let mut out: Vec<(usize, Vec<PlannedStep>)> = Vec::new();
    for &step in plan {
        let n = route(step.t, cfg)?;
        match out.last_mut() {
            Some((m, steps)) if *m == n => steps.push(step),
            _ => out.push((n, vec![step])),
        }
    }
    Ok(out)
}

fn spool_path(dir: &Path, chunk: usize) -> PathBuf {
    dir.join(format!("x_t_chunk{chunk:04}.memt"))
}

/// Generates `opts.count` images, routing every step to the expert whose
/// interval contains its time-step. `load(n)` supplies expert `n`.
///
/// Each trajectory's starting noise and per-step noise are keyed by
/// `(seed, image, t)`, so results do not depend on chunking order or on the
/// paging mode.
pub fn multi_expert_generate<'a, L>(
    cfg: &MultiExpertConfig,
    mut load: L,
    opts: &SampleOptions,
    paging: &Paging,
) -> Result<Tensor>
where
    L: FnMut(usize) -> Result<Box<dyn EpsPredictor + 'a>>,
{
    let s = cfg.schedule.build()?;
    if opts.count == 0 {
        return Err(Error::range("count", 0, "≥ 1"));
    }
    let plan = sampling_plan(&s, opts.sampler, opts.steps)?;
    let segs = segments(&plan, cfg)?;
    let chunk_len = opts.chunk.unwrap_or(opts.count).max(1);
    let mut chunks: Vec<Chunk> = (0..opts.count)
        .step_by(chunk_len)
        .map(|first| {
            let items: Vec<Tensor> = (first..(first + chunk_len).min(opts.count))
                .map(|i| initial_noise(opts.seed, i, &opts.image_shape))
                .collect();
            Ok(Chunk {
                first,
                x: Tensor::stack(&items)?,
            })
        })
        .collect::<Result<_>>()?;

    match paging {
        Paging::Resident => {
            let models: Vec<Box<dyn EpsPredictor + 'a>> =
                (1..=cfg.num_experts()).map(&mut load).collect::<Result<_>>()?;
            for (n, steps) in &segs {
                for chunk in &mut chunks {
                    for &step in steps {
                        apply_step(chunk, step, models[n - 1].as_ref(), &s, opts)?;
                    }
                }
            }
        }
        Paging::Sequential { spool_dir } => {
            fs::create_dir_all(spool_dir).map_err(|e| Error::io(spool_dir, e))?;
            for (i, c) in chunks.iter().enumerate() {
                save_tensor(&spool_path(spool_dir, i), &c.x)?;
            }
            let firsts: Vec<usize> = chunks.iter().map(|c| c.first).collect();
            drop(chunks);
            for (n, steps) in &segs {
                let model = load(*n)?;
                for (i, &first) in firsts.iter().enumerate() {
                    let path = spool_path(spool_dir, i);
                    let mut chunk = Chunk {
                        first,
                        x: load_tensor(&path)?,
                    };
                    for &step in steps {
                        apply_step(&mut chunk, step, model.as_ref(), &s, opts)?;
                    }
                    save_tensor(&path, &chunk.x)?;
                }
            }
            chunks = firsts
                .iter()
                .enumerate()
                .map(|(i, &first)| {
                    let path = spool_path(spool_dir, i);
                    let x = load_tensor(&path)?;
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    Ok(Chunk { first, x })
                })
                .collect::<Result<_>>()?;
        }
    }
    let items: Vec<Tensor> = chunks
        .iter()
        .flat_map(|c| (0..c.x.shape()[0]).map(|i| c.x.batch_item(i)))
        .collect();
    Tensor::stack(&items)
}

/// Single-network sampling over the whole time range.
pub fn generate(model: &dyn EpsPredictor, schedule: &DiffusionSchedule, opts: &SampleOptions) -> Result<Tensor> {
    let plan = sampling_plan(schedule, opts.sampler, opts.steps)?;
    let chunk_len = opts.chunk.unwrap_or(opts.count).max(1);
    let mut out = Vec::with_capacity(opts.count);
    for first in (0..opts.count).step_by(chunk_len) {
        let items: Vec<Tensor> = (first..(first + chunk_len).min(opts.count))
            .map(|i| initial_noise(opts.seed, i, &opts.image_shape))
            .collect();
        let mut chunk = Chunk {
            first,
            x: Tensor::stack(&items)?,
        };
        for &step in &plan {
            apply_step(&mut chunk, step, model, schedule, opts)?;
        }
        out.extend((0..chunk.x.shape()[0]).map(|i| chunk.x.batch_item(i)));
    }
    Tensor::stack(&out)
}

/// Planted-image trajectories: `x_T` from forward noising of `x0` with the
/// trajectory's initial noise, for oracle checks that start on the data manifold.
pub fn planted_start(x0: &Tensor, s: &DiffusionSchedule, seed: u64, image: usize) -> Result<Tensor> {
    let eps = initial_noise(seed, image, x0.shape());
    forward_noise(x0, s.steps() - 1, &eps, s)
}

#[cfg(test)]
mod tests;
