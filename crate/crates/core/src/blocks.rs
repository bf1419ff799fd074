//! Building blocks of the iU-Net: the iFormer block with its channel-split
//! frequency mixers, the Res block, MHSA, and time-embedding injection.
//!
//! An iFormer block splits its (normalized, time-conditioned) input by channel
//! into two high-frequency paths and one low-frequency path:
//!
//! * `Y_h1 = Up(GELU(FC(MaxPool(Z_h1))))`
//! * `Y_h2 = DConv(GELU(FC(Z_h2)))`
//! * `Y_l  = Up(MHSA(AvgPool(Z_l)))`
//!
//! and fuses them as `Y = FC(Y_c + DConv(Y_c))` with `Y_c = Concat(Y_h1, Y_h2, Y_l)`,
//! added back to the block input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::numerics::{PoolKind, Tape, Tensor, Var};
use crate::params::{Bound, ParamBuilder, ParamId};

/// Channels per attention head.
pub const HEAD_WIDTH: usize = 32;
pub const POOL_STRIDE: usize = 2;
pub const NORM_GROUPS: usize = 8;
/// Fewest channels a normalization group may hold.
pub const MIN_GROUP_WIDTH: usize = 4;
pub const DEFAULT_TIME_EMBED_DIM: usize = 128;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Group count for a normalization over `c` channels: the largest divisor of
/// `gcd(c, 8)` leaving at least four channels per group (8 groups from 32 channels on).
pub fn norm_groups(c: usize) -> usize {
    let g = gcd(c, NORM_GROUPS).max(1);
    (1..=g)
        .rev()
        .find(|&k| g.is_multiple_of(k) && c / k >= MIN_GROUP_WIDTH)
        .unwrap_or(1)
}

/// Largest head count `h ≤ max(1, d / 32)` that divides `d`.
pub fn heads_for(d: usize) -> usize {
    let cap = (d / HEAD_WIDTH).max(1);
    (1..=cap).rev().find(|h| d.is_multiple_of(*h)).unwrap_or(1)
}

/// Channel partition of an iFormer block: `d = d_h + d_l`, `d_h = d_h1 + d_h2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSplit {
    pub d: usize,
    pub d_h: usize,
    pub d_l: usize,
    pub d_h1: usize,
    pub d_h2: usize,
}

impl ChannelSplit {
    pub fn new(d: usize, d_h: usize) -> Result<Self> {
        if d_h > d {
            return Err(Error::Contract(format!("d_h = {d_h} exceeds d = {d}")));
        }
        let d_h1 = d_h / 2;
        Ok(Self {
            d,
            d_h,
            d_l: d - d_h,
            d_h1,
            d_h2: d_h - d_h1,
        })
    }

    /// Split with `d_h = round(fraction · d)`.
    pub fn from_fraction(d: usize, fraction_high: Fraction) -> Result<Self> {
        if fraction_high > Fraction::ONE {
            return Err(Error::range("split fraction", fraction_high, "[0, 1]"));
        }
        Self::new(d, fraction_high.round_mul(d))
    }

    pub fn heads(&self) -> usize {
        heads_for(self.d_l)
    }
}

/// Contiguous channel ranges `[0, d_h1)`, `[d_h1, d_h)`, `[d_h, d)`.
pub fn channel_split(tape: &mut Tape, z: Var, cs: &ChannelSplit) -> Result<(Var, Var, Var)> {
    let s = tape.shape(z);
    if s.len() < 2 || s[1] != cs.d {
        return Err(Error::shape(
            "channel_split",
            format!("input {s:?} does not have {} channels", cs.d),
        ));
    }
    let h1 = tape.slice_channels(z, 0, cs.d_h1)?;
    let h2 = tape.slice_channels(z, cs.d_h1, cs.d_h2)?;
    let l = tape.slice_channels(z, cs.d_h, cs.d_l)?;
    Ok((h1, h2, l))
}

/// Sinusoidal embedding of integer time-steps, `[N, dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (n, j) = (i / dim, i % dim);
        if j >= 2 * half {
            return 0.0;
        }
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = ts[n] as f64 * freq;
        (if j < half { arg.sin() } else { arg.cos() }) as f32
    })
}

/// Dense layer on rows, `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    w: ParamId,
    b: Option<ParamId>,
}

impl Dense {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize, zero: bool) -> Self {
        let w = if zero {
            pb.zeros(&format!("{name}_w"), &[d_in, d_out])
        } else {
            pb.fan_in(&format!("{name}_w"), &[d_in, d_out], d_in)
        };
        let b = Some(pb.zeros(&format!("{name}_b"), &[d_out]));
        Self { w, b }
    }

    pub fn without_bias<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: pb.fan_in(&format!("{name}_w"), &[d_in, d_out], d_in),
            b: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.b {
            Some(b) => tape.linear(x, p.var(self.w), p.var(b)),
            None => tape.matmul(x, p.var(self.w)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero: bool,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = if zero {
            pb.zeros(&format!("{name}_w"), &shape)
        } else {
            pb.fan_in(&format!("{name}_w"), &shape, c_in * k * k)
        };
        let b = pb.zeros(&format!("{name}_b"), &[c_out]);
        Self { w, b, stride, pad }
    }

    /// 1×1 channel-mixing layer (an FC over channels at every position).
    pub fn pointwise<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, c_in: usize, c_out: usize, zero: bool) -> Self {
        Self::new(pb, name, c_in, c_out, 1, 1, 0, zero)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// 3×3 depthwise convolution, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    w: ParamId,
    b: ParamId,
}

impl DepthwiseConv {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, c: usize) -> Self {
        let w = pb.fan_in(&format!("{name}_w"), &[c, 1, 3, 3], 9);
        let b = pb.zeros(&format!("{name}_b"), &[c]);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, p.var(self.w), Some(p.var(self.b)), 1)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, c: usize) -> Self {
        Self {
            gamma: pb.ones(&format!("{name}_g"), &[c]),
            beta: pb.zeros(&format!("{name}_b"), &[c]),
            groups: norm_groups(c),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta))
    }
}

/// Per-block projection of the sinusoidal embedding: `Dense → SiLU → Dense`.
#[derive(Clone, Debug)]
pub struct TimeProjection {
    l1: Dense,
    l2: Dense,
}

impl TimeProjection {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, embed_dim: usize, c: usize) -> Self {
        Self {
            l1: Dense::new(pb, "l1", embed_dim, c, false),
            l2: Dense::new(pb, "l2", c, c, false),
        }
    }

    /// `[N, embed_dim] -> [N, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, temb: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, temb)?;
        let h = tape.silu(h)?;
        self.l2.forward(tape, p, h)
    }
}

/// `[N, C, H, W] -> [N·H·W, C]`.
fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4("to_tokens")?;
    let r = tape.reshape(x, &[n, c, h * w])?;
    let r = tape.permute(r, &[0, 2, 1])?;
    tape.reshape(r, &[n * h * w, c])
}

fn from_tokens(tape: &mut Tape, x: Var, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
    let r = tape.reshape(x, &[n, h * w, c])?;
    let r = tape.permute(r, &[0, 2, 1])?;
    tape.reshape(r, &[n, c, h, w])
}

/// Multi-head self-attention over the spatial positions of an NCHW map.
#[derive(Clone, Debug)]
pub struct Mhsa {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    heads: usize,
    d: usize,
}

impl Mhsa {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize, heads: usize, zero_out: bool) -> Self {
        assert!(heads >= 1 && d.is_multiple_of(heads), "{d} channels into {heads} heads");
        Self {
            q: Dense::new(pb, "q", d, d, false),
            // a key bias shifts every score in a row equally
            k: Dense::without_bias(pb, "k", d, d),
            v: Dense::new(pb, "v", d, d, false),
            out: Dense::new(pb, "out", d, d, zero_out),
            heads,
            d,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Attention on `x[N, d, H, W]`; returns the output map and the
    /// `[N·heads, HW, HW]` attention weights.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = tape.value(x).dims4("mhsa")?;
        if c != self.d {
            return Err(Error::shape("mhsa", format!("{c} channels, expected {}", self.d)));
        }
        let (t, hd, dh) = (h * w, self.heads, self.d / self.heads);
        let tokens = to_tokens(tape, x)?;
        let split_heads = |tape: &mut Tape, y: Var| -> Result<Var> {
            let r = tape.reshape(y, &[n, t, hd, dh])?;
            let r = tape.permute(r, &[0, 2, 1, 3])?;
            tape.reshape(r, &[n * hd, t, dh])
        };
        let q = self.q.forward(tape, p, tokens)?;
        let q = split_heads(tape, q)?;
        let k = self.k.forward(tape, p, tokens)?;
        let k = split_heads(tape, k)?;
        let v = self.v.forward(tape, p, tokens)?;
        let v = split_heads(tape, v)?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax_last(scores)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[n, hd, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n * t, self.d])?;
        let out = self.out.forward(tape, p, ctx)?;
        Ok((from_tokens(tape, out, n, self.d, h, w)?, attn))
    }
}

/// Max-pool path and FC/depthwise path of the high-frequency mixer.
#[derive(Clone, Debug)]
pub struct HighMixer {
    fc1: Option<Conv>,
    fc2: Option<Conv>,
    dw2: Option<DepthwiseConv>,
}

impl HighMixer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_h1: usize, d_h2: usize) -> Self {
        let fc1 = (d_h1 > 0).then(|| Conv::pointwise(&mut pb.scope("high1"), "fc", d_h1, d_h1, false));
        let (fc2, dw2) = if d_h2 > 0 {
            let mut s = pb.scope("high2");
            (
                Some(Conv::pointwise(&mut s, "fc", d_h2, d_h2, false)),
                Some(DepthwiseConv::new(&mut s, "dconv", d_h2)),
            )
        } else {
            (None, None)
        };
        Self { fc1, fc2, dw2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z_h1: Var, z_h2: Var) -> Result<(Option<Var>, Option<Var>)> {
        let y1 = match &self.fc1 {
            Some(fc) => {
                let m = tape.pool2d(z_h1, PoolKind::Max, POOL_STRIDE)?;
                let m = fc.forward(tape, p, m)?;
                let m = tape.gelu(m)?;
                Some(tape.upsample_nearest(m, POOL_STRIDE)?)
            }
            None => None,
        };
        let y2 = match (&self.fc2, &self.dw2) {
            (Some(fc), Some(dw)) => {
                let h = fc.forward(tape, p, z_h2)?;
                let h = tape.gelu(h)?;
                Some(dw.forward(tape, p, h)?)
            }
            _ => None,
        };
        Ok((y1, y2))
    }
}

/// `Up(MHSA(AvgPool(Z_l)))` with a pre-attention group norm.
#[derive(Clone, Debug)]
pub struct LowMixer {
    norm: GroupNorm,
    attn: Mhsa,
}

impl LowMixer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_l: usize, heads: usize) -> Self {
        let mut s = pb.scope("low");
        Self {
            norm: GroupNorm::new(&mut s, "norm", d_l),
            attn: Mhsa::new(&mut s, d_l, heads, false),
        }
    }

    pub fn heads(&self) -> usize {
        self.attn.heads()
    }

    /// Returns `Y_l` and the attention weights.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z_l: Var) -> Result<(Var, Var)> {
        let pooled = tape.pool2d(z_l, PoolKind::Avg, POOL_STRIDE)?;
        let normed = self.norm.forward(tape, p, pooled)?;
        let (y, attn) = self.attn.forward(tape, p, normed)?;
        Ok((tape.upsample_nearest(y, POOL_STRIDE)?, attn))
    }
}

/// Initialization of the last layer of a residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualInit {
    /// Zero weights: the block starts as the identity map.
    Zero,
    /// Fan-in scaled weights like every other layer.
    FanIn,
}

impl ResidualInit {
    fn is_zero(self) -> bool {
        self == ResidualInit::Zero
    }
}

/// `Y = FC(Y_c + DConv(Y_c))`.
#[derive(Clone, Debug)]
pub struct Fuse {
    dw: DepthwiseConv,
    fc: Conv,
}

impl Fuse {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize) -> Self {
        Self::with_init(pb, d, ResidualInit::Zero)
    }

    pub fn with_init<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize, init: ResidualInit) -> Self {
        let mut s = pb.scope("fuse");
        Self {
            dw: DepthwiseConv::new(&mut s, "dconv", d),
            fc: Conv::pointwise(&mut s, "fc", d, d, init.is_zero()),
        }
    }

    /// Concatenates the present branches in `(h1, h2, l)` order and fuses them.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, branches: &[Option<Var>]) -> Result<Var> {
        let parts: Vec<Var> = branches.iter().flatten().copied().collect();
        let mut spatial = None;
        for v in &parts {
            let s = tape.shape(*v);
            let hw = (s[0], s[2], s[3]);
            if *spatial.get_or_insert(hw) != hw {
                return Err(Error::shape("fuse", format!("branch extents differ: {s:?}")));
            }
        }
        let yc = tape.concat_channels(&parts)?;
        let d = self.dw.forward(tape, p, yc)?;
        let s = tape.add(yc, d)?;
        self.fc.forward(tape, p, s)
    }
}

#[derive(Clone, Debug)]
pub struct IFormerBlock {
    split: ChannelSplit,
    temb: TimeProjection,
    norm: GroupNorm,
    high: HighMixer,
    low: Option<LowMixer>,
    fuse: Fuse,
}

impl IFormerBlock {
    /// Zero-initialized fuse FC, so the block starts as the identity.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, split: ChannelSplit, embed_dim: usize) -> Self {
        Self::with_init(pb, split, embed_dim, ResidualInit::Zero)
    }

    pub fn with_init<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        split: ChannelSplit,
        embed_dim: usize,
        init: ResidualInit,
    ) -> Self {
        let temb = TimeProjection::new(&mut pb.scope("temb"), embed_dim, split.d);
        let norm = GroupNorm::new(&mut pb.scope("norm"), "gn", split.d);
        let high = HighMixer::new(pb, split.d_h1, split.d_h2);
        let low = (split.d_l > 0).then(|| LowMixer::new(pb, split.d_l, split.heads()));
        let fuse = Fuse::with_init(pb, split.d, init);
        Self {
            split,
            temb,
            norm,
            high,
            low,
            fuse,
        }
    }

    pub fn split(&self) -> &ChannelSplit {
        &self.split
    }

    pub fn low_heads(&self) -> Option<usize> {
        self.low.as_ref().map(LowMixer::heads)
    }

    /// `Z + Fuse(mixers(GroupNorm(Z + proj(t_emb))))`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, temb: Var) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 4 || s[1] != self.split.d {
            return Err(Error::shape(
                "iformer_block",
                format!("input {s:?} does not have {} channels", self.split.d),
            ));
        }
        let e = self.temb.forward(tape, p, temb)?;
        let h = tape.add_sample_channel(z, e)?;
        let h = self.norm.forward(tape, p, h)?;
        let (h1, h2, l) = channel_split(tape, h, &self.split)?;
        let (y1, y2) = self.high.forward(tape, p, h1, h2)?;
        let yl = match &self.low {
            Some(low) => Some(low.forward(tape, p, l)?.0),
            None => None,
        };
        let y = self.fuse.forward(tape, p, &[y1, y2, yl])?;
        tape.add(z, y)
    }
}

/// `GN → SiLU → conv3×3 → (+t) → GN → SiLU → conv3×3`, plus a (1×1) shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: TimeProjection,
    norm2: GroupNorm,
    conv2: Conv,
    shortcut: Option<Conv>,
    c_out: usize,
}

impl ResBlock {
    /// Zero-initialized second conv.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, c_in: usize, c_out: usize, embed_dim: usize) -> Self {
        Self::with_init(pb, c_in, c_out, embed_dim, ResidualInit::Zero)
    }

    pub fn with_init<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        c_in: usize,
        c_out: usize,
        embed_dim: usize,
        init: ResidualInit,
    ) -> Self {
        let mut s = pb.scope("res");
        let norm1 = GroupNorm::new(&mut s, "norm1", c_in);
        let conv1 = Conv::new(&mut s, "conv1", c_in, c_out, 3, 1, 1, false);
        let norm2 = GroupNorm::new(&mut s, "norm2", c_out);
        let conv2 = Conv::new(&mut s, "conv2", c_out, c_out, 3, 1, 1, init.is_zero());
        let shortcut = (c_in != c_out).then(|| Conv::pointwise(&mut s, "skip", c_in, c_out, false));
        let temb = TimeProjection::new(&mut pb.scope("temb"), embed_dim, c_out);
        Self {
            norm1,
            conv1,
            temb,
            norm2,
            conv2,
            shortcut,
            c_out,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        let h = self.conv1.forward(tape, p, h)?;
        let e = self.temb.forward(tape, p, temb)?;
        let h = tape.add_sample_channel(h, e)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(tape, p, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// Residual self-attention block: `x + MHSA(GN(x))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm: GroupNorm,
    attn: Mhsa,
}

impl AttentionBlock {
    /// Zero-initialized output projection.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, c: usize) -> Self {
        Self::with_init(pb, c, ResidualInit::Zero)
    }

    pub fn with_init<R: Rng>(pb: &mut ParamBuilder<'_, R>, c: usize, init: ResidualInit) -> Self {
        let mut s = pb.scope("attn");
        Self {
            norm: GroupNorm::new(&mut s, "norm", c),
            attn: Mhsa::new(&mut s, c, heads_for(c), init.is_zero()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let (h, _) = self.attn.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests;
