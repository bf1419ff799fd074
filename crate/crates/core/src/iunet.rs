//! Per-expert iU-Net denoisers.
//!
//! Encoder stages stack iFormer blocks (plus a Res block on all but the last
//! stage) and downsample with a stride-2 convolution. The bottleneck is
//! `Res → self-attention → Res`. Decoder stages use Res blocks only, fed by a
//! skip concatenation from the matching encoder stage, and upsample with
//! nearest-neighbour interpolation followed by a 3×3 convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    sinusoidal_embedding, AttentionBlock, ChannelSplit, Conv, GroupNorm, IFormerBlock, ResBlock, ResidualInit,
};
use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::schedule::{DiffusionSchedule, EpsNetwork};

/// High-mixer fractions `d_h/d` per expert (rows) and encoder stage (columns)
/// for four experts over four stages.
/// Residual branches inside the network are fan-in initialized; only the
/// output head starts at zero, so every parameter receives gradient after
/// the first update.
const RESIDUAL: ResidualInit = ResidualInit::FanIn;

pub const SPLIT_TABLE: [[(u64, u64); 4]; 4] = [
    [(3, 4), (5, 8), (1, 2), (1, 4)],
    [(3, 4), (1, 2), (3, 8), (1, 8)],
    [(3, 4), (3, 8), (1, 4), (1, 16)],
    [(3, 4), (1, 4), (1, 8), (1, 16)],
];

fn table(row: usize, col: usize) -> Fraction {
    let (n, d) = SPLIT_TABLE[row][col];
    Fraction::new(n, d)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub num_iformer_blocks: usize,
    pub has_res_block: bool,
    pub split_fraction_high: Fraction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertArchConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub multipliers: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub time_embed_dim: usize,
}

impl ExpertArchConfig {
    /// Two iFormer blocks per stage, a Res block on every stage but the last,
    /// and every split fraction set to `fraction_high`.
    pub fn uniform(
        in_channels: usize,
        base_channels: usize,
        multipliers: &[usize],
        time_embed_dim: usize,
        fraction_high: Fraction,
    ) -> Self {
        let k = multipliers.len();
        Self {
            in_channels,
            base_channels,
            multipliers: multipliers.to_vec(),
            stages: (0..k)
                .map(|i| StageSpec {
                    num_iformer_blocks: 2,
                    has_res_block: i + 1 < k,
                    split_fraction_high: fraction_high,
                })
                .collect(),
            time_embed_dim,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels * self.multipliers[k]
    }

    pub fn split_fractions(&self) -> Vec<Fraction> {
        self.stages.iter().map(|s| s.split_fraction_high).collect()
    }

    /// The channel split used by every iFormer block of stage `k` (0-based).
    pub fn stage_split(&self, k: usize) -> Result<ChannelSplit> {
        ChannelSplit::from_fraction(self.stage_channels(k), self.stages[k].split_fraction_high)
    }

    /// Input extents must be divisible by this (pooling inside the deepest stage).
    pub fn spatial_multiple(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.stages.len() != self.multipliers.len() {
            return bad(format!(
                "{} stages but {} multipliers",
                self.stages.len(),
                self.multipliers.len()
            ));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.multipliers.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim {} must be even and ≥ 2", self.time_embed_dim));
        }
        for (k, s) in self.stages.iter().enumerate() {
            if s.split_fraction_high > Fraction::ONE {
                return bad(format!(
                    "stage {}: split fraction {} exceeds 1",
                    k + 1,
                    s.split_fraction_high
                ));
            }
            if k > 0 && s.split_fraction_high > self.stages[k - 1].split_fraction_high {
                return bad(format!("stage {}: split fraction increases with depth", k + 1));
            }
            self.stage_split(k)?;
        }
        Ok(())
    }
}

/// Split fraction for expert `n` of `experts` at 0-based stage `k` of `stages`.
///
/// Four experts over four stages read the table directly; other grids
/// interpolate it bilinearly (exactly, in rationals) at expert coordinate
/// `3(n-1)/(N-1)` and stage coordinate `3k/(K-1)`.
pub fn split_fraction(n: usize, experts: usize, k: usize, stages: usize) -> Result<Fraction> {
    if n == 0 || n > experts {
        return Err(Error::range("expert index", n, format!("1..={experts}")));
    }
    if k >= stages {
        return Err(Error::range("stage index", k, format!("0..{stages}")));
    }
    // coordinate (i, num/den) with integer part i
    let coord = |idx: usize, count: usize| -> (usize, u64, u64) {
        if count <= 1 {
            return (0, 0, 1);
        }
        let (num, den) = (3 * idx as u64, (count - 1) as u64);
        let i = (num / den) as usize;
        if i >= 3 {
            (3, 0, 1)
        } else {
            (i, num - i as u64 * den, den)
        }
    };
    let (ri, rn, rd) = coord(n - 1, experts);
    let (ci, cn, cd) = coord(k, stages);
    let along = |row: usize| {
        let next = (ci + 1).min(3);
        table(row, ci).lerp(table(row, next), cn, cd)
    };
    let top = along(ri);
    let bottom = along((ri + 1).min(3));
    Ok(top.lerp(bottom, rn, rd))
}

/// `base` with the split fractions of expert `n` out of `experts`.
pub fn expert_arch_for(n: usize, experts: usize, base: &ExpertArchConfig) -> Result<ExpertArchConfig> {
    let k = base.num_stages();
    let mut cfg = base.clone();
    for (i, s) in cfg.stages.iter_mut().enumerate() {
        s.split_fraction_high = split_fraction(n, experts, i, k)?;
    }
    Ok(cfg)
}

struct EncoderStage {
    iformers: Vec<IFormerBlock>,
    res: Option<ResBlock>,
    down: Option<Conv>,
}

struct DecoderStage {
    res: ResBlock,
    up: Option<Conv>,
}

struct Network {
    stem: Conv,
    encoder: Vec<EncoderStage>,
    mid: (ResBlock, AttentionBlock, ResBlock),
    /// Deepest stage first.
    decoder: Vec<DecoderStage>,
    head_norm: GroupNorm,
    head: Conv,
}

impl Network {
    fn build(cfg: &ExpertArchConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut pb = ParamBuilder::new(store, rng);
        let te = cfg.time_embed_dim;
        let k_total = cfg.num_stages();
        let c0 = cfg.stage_channels(0);
        let stem = Conv::new(&mut pb.scope("stem"), "conv", cfg.in_channels, c0, 3, 1, 1, false);

        let mut encoder = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let c = cfg.stage_channels(k);
            let split = cfg.stage_split(k)?;
            let spec = &cfg.stages[k];
            let mut stage = pb.scope(format!("enc{}", k + 1));
            let iformers = (0..spec.num_iformer_blocks)
                .map(|i| IFormerBlock::with_init(&mut stage.scope(i.to_string()), split, te, RESIDUAL))
                .collect();
            let res = spec.has_res_block.then(|| {
                ResBlock::with_init(
                    &mut stage.scope(spec.num_iformer_blocks.to_string()),
                    c,
                    c,
                    te,
                    RESIDUAL,
                )
            });
            let down = (k + 1 < k_total).then(|| {
                let next = cfg.stage_channels(k + 1);
                Conv::new(&mut stage.scope("down"), "conv", c, next, 4, 2, 1, false)
            });
            encoder.push(EncoderStage { iformers, res, down });
        }

        let cm = cfg.stage_channels(k_total - 1);
        let mut mid = pb.scope("mid");
        let mid = (
            ResBlock::with_init(&mut mid.scope("0"), cm, cm, te, RESIDUAL),
            AttentionBlock::with_init(&mut mid.scope("1"), cm, RESIDUAL),
            ResBlock::with_init(&mut mid.scope("2"), cm, cm, te, RESIDUAL),
        );

        let mut decoder = Vec::with_capacity(k_total);
        for k in (0..k_total).rev() {
            let c = cfg.stage_channels(k);
            let mut stage = pb.scope(format!("dec{}", k + 1));
            let res = ResBlock::with_init(&mut stage.scope("0"), 2 * c, c, te, RESIDUAL);
            let up = (k > 0).then(|| {
                let prev = cfg.stage_channels(k - 1);
                Conv::new(&mut stage.scope("up"), "conv", c, prev, 3, 1, 1, false)
            });
            decoder.push(DecoderStage { res, up });
        }

        let mut head = pb.scope("head");
        let head_norm = GroupNorm::new(&mut head, "norm", c0);
        let head = Conv::new(&mut head, "conv", c0, cfg.in_channels, 3, 1, 1, true);
        Ok(Self {
            stem,
            encoder,
            mid,
            decoder,
            head_norm,
            head,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        temb: Var,
        mut taps: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        let k_total = self.encoder.len();
        let mut h = self.stem.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(k_total);
        for (k, stage) in self.encoder.iter().enumerate() {
            for block in &stage.iformers {
                h = block.forward(tape, p, h, temb)?;
            }
            if let Some(res) = &stage.res {
                h = res.forward(tape, p, h, temb)?;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push((format!("enc#{}", k + 1), h));
            }
            skips.push(h);
            if let Some(down) = &stage.down {
                h = down.forward(tape, p, h)?;
            }
        }
        h = self.mid.0.forward(tape, p, h, temb)?;
        h = self.mid.1.forward(tape, p, h)?;
        h = self.mid.2.forward(tape, p, h, temb)?;
        for (i, stage) in self.decoder.iter().enumerate() {
            let k = k_total - 1 - i;
            let cat = tape.concat_channels(&[h, skips[k]])?;
            h = stage.res.forward(tape, p, cat, temb)?;
            if let Some(t) = taps.as_deref_mut() {
                t.push((format!("dec#{}", k + 1), h));
            }
            if let Some(up) = &stage.up {
                h = tape.upsample_nearest(h, 2)?;
                h = up.forward(tape, p, h)?;
            }
        }
        h = self.head_norm.forward(tape, p, h)?;
        h = tape.silu(h)?;
        self.head.forward(tape, p, h)
    }
}

/// A feature map captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tap {
    pub layer_id: String,
    pub value: Tensor,
}

/// An ε-predicting iU-Net with its parameters and schedule.
pub struct Denoiser {
    config: ExpertArchConfig,
    schedule: DiffusionSchedule,
    seed: u64,
    params: ParamStore,
    net: Network,
}

/// Builds a denoiser for the default linear schedule.
pub fn build_denoiser(config: &ExpertArchConfig, seed: u64) -> Result<Denoiser> {
    Denoiser::new(config, DiffusionSchedule::default_linear(), seed)
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser")
            .field("config", &self.config)
            .field("steps", &self.schedule.steps())
            .field("seed", &self.seed)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl Denoiser {
    pub fn new(config: &ExpertArchConfig, schedule: DiffusionSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(config, &mut params, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            schedule,
            seed,
            params,
            net,
        })
    }

    pub fn config(&self) -> &ExpertArchConfig {
        &self.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, shape: &[usize], ts: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *shape {
            [n, c, h, w] if c == self.config.in_channels && n == ts.len() => {
                if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
                    return Err(Error::shape(
                        "denoise",
                        format!("extents {h}×{w} are not divisible by {m}"),
                    ));
                }
            }
            _ => {
                return Err(Error::shape(
                    "denoise",
                    format!(
                        "input {shape:?} with {} time-steps; expected [N, {}, H, W] with N time-steps",
                        ts.len(),
                        self.config.in_channels
                    ),
                ))
            }
        }
        ts.iter().try_for_each(|&t| self.schedule.check_t(t))
    }

    /// Full forward pass with parameters bound as `p`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_t: Var, ts: &[usize]) -> Result<Var> {
        self.forward_inner(tape, p, x_t, ts, None)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        ts: &[usize],
        taps: Option<&mut Vec<(String, Var)>>,
    ) -> Result<Var> {
        self.check_input(tape.shape(x_t), ts)?;
        let temb = tape.constant(sinusoidal_embedding(ts, self.config.time_embed_dim));
        self.net.forward(tape, p, x_t, temb, taps)
    }

    /// Binds the parameters onto `tape` for a training or inference pass.
    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> BoundDenoiser<'a> {
        BoundDenoiser {
            model: self,
            params: self.params.bind(tape, requires_grad),
        }
    }

    /// ε̂ for a batch sharing one time-step.
    pub fn denoise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        self.denoise_batch(x_t, &vec![t; n])
    }

    /// ε̂ for a batch with per-sample time-steps.
    pub fn denoise_batch(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let y = self.forward(&mut tape, &p, x, ts)?;
        Ok(tape.value(y).clone())
    }

    /// ε̂ plus the feature maps after each encoder and decoder stage, in
    /// execution order (`enc#1..enc#K`, then `dec#K..dec#1`).
    pub fn denoise_with_taps(&self, x_t: &Tensor, t: usize) -> Result<(Tensor, Vec<Tap>)> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let mut raw = Vec::new();
        let y = self.forward_inner(&mut tape, &p, x, &vec![t; n], Some(&mut raw))?;
        let taps = raw
            .into_iter()
            .map(|(layer_id, v)| Tap {
                layer_id,
                value: tape.value(v).clone(),
            })
            .collect();
        Ok((tape.value(y).clone(), taps))
    }

    /// Tap labels in the order produced by [`Denoiser::denoise_with_taps`].
    pub fn tap_ids(&self) -> Vec<String> {
        let k = self.config.num_stages();
        (1..=k)
            .map(|i| format!("enc#{i}"))
            .chain((1..=k).rev().map(|i| format!("dec#{i}")))
            .collect()
    }
}

/// A [`Denoiser`] whose parameters live on a particular tape.
pub struct BoundDenoiser<'a> {
    pub model: &'a Denoiser,
    pub params: Bound,
}

impl EpsNetwork for BoundDenoiser<'_> {
    fn predict_eps_on(&self, tape: &mut Tape, x_t: Var, ts: &[usize]) -> Result<Var> {
        self.model.forward(tape, &self.params, x_t, ts)
    }
}

impl EpsNetwork for Denoiser {
    fn predict_eps_on(&self, tape: &mut Tape, x_t: Var, ts: &[usize]) -> Result<Var> {
        let p = self.params.bind(tape, true);
        self.forward(tape, &p, x_t, ts)
    }
}

/// Whole-model gradient check: a randomized single-stage iU-Net on an 8×8
/// input, all parameters and the input perturbed jointly along random
/// directions. Returns the relative error.
pub fn micro_model_gradcheck(seed: u64) -> Result<f64> {
    use crate::numerics::gradcheck::{check_directional, GradCheckOptions};
    let cfg = ExpertArchConfig::uniform(1, 8, &[1], 8, Fraction::new(1, 2));
    let mut model = build_denoiser(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let names = model.params().names().to_vec();
    for (name, v) in names.iter().zip(model.params_mut().values_mut()) {
        *v = Tensor::uniform(v.shape(), -0.5, 0.5, &mut rng);
        if name.ends_with("_g") {
            *v = v.map(|x| 1.0 + 0.2 * x);
        }
    }
    let np = model.params().len();
    let mut inputs = model.params().values().to_vec();
    inputs.push(Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng));
    let all: Vec<usize> = (0..inputs.len()).collect();
    let errs = check_directional(&inputs, &[all], 8, &GradCheckOptions::default(), |tape, vars| {
        let p = Bound::from_vars(vars[..np].to_vec());
        model.forward(tape, &p, vars[np], &[321])
    })?;
    Ok(errs[0])
}
