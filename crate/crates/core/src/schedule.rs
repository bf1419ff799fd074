//! Noise schedules, forward noising, the ε-prediction loss and reverse steps.
//!
//! Time-steps are indexed `0..T` internally; an interval boundary `t` in the
//! usual 1-based convention maps to `t - 1` here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Serialized form of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleDescriptor {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        match self.kind {
            ScheduleKind::Linear => DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    descriptor: ScheduleDescriptor,
}

impl DiffusionSchedule {
    /// Linear β from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::range("T", steps, ">= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::range(
                "beta endpoints",
                format!("[{beta_start}, {beta_end}]"),
                "0 < beta_start <= beta_end < 1",
            ));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            descriptor: ScheduleDescriptor {
                kind: ScheduleKind::Linear,
                steps,
                beta_start,
                beta_end,
            },
        })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn descriptor(&self) -> &ScheduleDescriptor {
        &self.descriptor
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::range("time-step", t, format!("[0, {})", self.steps())));
        }
        Ok(())
    }

    /// Uniform-stride subsequence of `count` steps over `[0, T-1]`, both ends
    /// included, ascending.
    pub fn ddim_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count < 1 || count > t {
            return Err(Error::range("sampling steps", count, format!("[1, {t}]")));
        }
        if count == 1 {
            return Ok(vec![t - 1]);
        }
        Ok((0..count)
            .map(|i| ((i as f64 * (t - 1) as f64) / (count - 1) as f64).round() as usize)
            .collect())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Tensor::new(a.shape(), data).expect("shapes checked")
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape("forward_noise", x0, eps)?;
    let ab = s.alpha_bar[t];
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// Per-sample forward noising for a batch `[N, ...]` with one time-step each.
pub fn forward_noise_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    same_shape("forward_noise", x0, eps)?;
    if x0.rank() == 0 || x0.shape()[0] != ts.len() {
        return Err(Error::shape(
            "forward_noise",
            format!("{} time-steps for batch {:?}", ts.len(), x0.shape()),
        ));
    }
    let per = x0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let (a, b) = (s.alpha_bar[t].sqrt(), (1.0 - s.alpha_bar[t]).sqrt());
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32));
    }
    Tensor::new(x0.shape(), out)
}

/// Score of the noising kernel implied by an ε-prediction: `-ε̂ / sqrt(1 - ᾱ_t)`.
pub fn score_from_eps(eps_hat: &Tensor, t: usize, s: &DiffusionSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    let var = 1.0 - s.alpha_bar[t];
    if var <= 0.0 {
        return Err(Error::Contract(format!("degenerate time-step {t}: alpha_bar = 1")));
    }
    let k = -1.0 / var.sqrt();
    Ok(eps_hat.map(|e| (k * e as f64) as f32))
}

/// A network mapping `(x_t, t)` to an ε-prediction on a tape.
pub trait EpsNetwork {
    fn predict_eps_on(&self, tape: &mut Tape, x_t: Var, ts: &[usize]) -> Result<Var>;
}

/// ε-MSE: `mean((ε - model(x_t, t))²)` with `x_t = forward_noise(x0, t, ε)`.
/// This is the score-matching objective with the per-t weight `1 - ᾱ_t`.
///
/// Returns the tape and loss node so the caller can back-propagate.
pub fn training_loss<M: EpsNetwork + ?Sized>(
    model: &M,
    tape: &mut Tape,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &DiffusionSchedule,
) -> Result<Var> {
    let x_t = forward_noise_batch(x0, ts, eps, s)?;
    let x_t = tape.constant(x_t);
    let target = tape.constant(eps.clone());
    let pred = model.predict_eps_on(tape, x_t, ts)?;
    tape.mse(pred, target)
}

/// One ancestral step
/// `x_{t-1} = (x_t + β_t·score) / sqrt(1 - β_t) + sqrt(β_t)·noise`.
pub fn ddpm_reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &DiffusionSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape("ddpm_reverse_step", x_t, eps_hat)?;
    same_shape("ddpm_reverse_step", x_t, noise)?;
    if t == 0 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("noise must be zero at t = 0".into()));
    }
    let beta = s.beta[t];
    let inv = 1.0 / (1.0 - beta).sqrt();
    let score_k = -1.0 / (1.0 - s.alpha_bar[t]).sqrt();
    let sigma = beta.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(noise.data())
        .map(|((&x, &e), &z)| ((x as f64 + beta * score_k * e as f64) * inv + sigma * z as f64) as f32)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Target of a DDIM update: an earlier time-step, or the clean end point
/// (`ᾱ = 1`) after the last sampled step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdimTarget {
    Step(usize),
    Clean,
}

/// DDIM update between two signal levels given by their ᾱ values.
pub fn ddim_update(
    x_t: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
    eps_hat: &Tensor,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    same_shape("ddim_step", x_t, eps_hat)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::range("eta", eta, "[0, 1]"));
    }
    let sigma2 = if eta == 0.0 {
        0.0
    } else {
        eta * eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * (1.0 - alpha_bar_t / alpha_bar_prev)
    };
    let dir2 = 1.0 - alpha_bar_prev - sigma2;
    if dir2 < -1e-12 {
        return Err(Error::Contract(format!(
            "sigma^2 = {sigma2} exceeds 1 - alpha_bar_prev = {}",
            1.0 - alpha_bar_prev
        )));
    }
    let dir = dir2.max(0.0).sqrt();
    let sigma = sigma2.sqrt();
    let (sa, sb) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let sp = alpha_bar_prev.sqrt();
    let noise = match noise {
        Some(n) if sigma > 0.0 => {
            same_shape("ddim_step", x_t, n)?;
            Some(n.data())
        }
        None if sigma > 0.0 => return Err(Error::Contract("stochastic DDIM step needs noise".into())),
        _ => None,
    };
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sb * e) / sa;
            let mut v = sp * x0 + dir * e;
            if let Some(n) = noise {
                v += sigma * n[i] as f64;
            }
            v as f32
        })
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// DDIM step from `t` to `target`. With `eta = 0` the noise is ignored.
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    target: DdimTarget,
    eps_hat: &Tensor,
    eta: f64,
    s: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    s.check_t(t)?;
    let ab_prev = match target {
        DdimTarget::Step(p) if p >= t => {
            return Err(Error::Contract(format!("t_prev = {p} must be below t = {t}")));
        }
        DdimTarget::Step(p) => s.alpha_bar[p],
        DdimTarget::Clean => 1.0,
    };
    ddim_update(x_t, s.alpha_bar[t], ab_prev, eps_hat, eta, noise)
}
