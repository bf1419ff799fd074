//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and enough context to
//! replay its adjoint. [`Tape::backward`] consumes the tape and walks the nodes
//! in exact reverse order, so each leaf receives one accumulated gradient.

use super::kernels::{self, ConvGeom, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

const GN_EPS: f64 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    ChannelBias {
        x: Var,
        b: Var,
    },
    SampleChannelAdd {
        x: Var,
        e: Var,
    },
    Silu(Var),
    Gelu(Var),
    SoftmaxLast(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        stride: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the original [`Var`]s.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// Adds `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::shape("add_channel_bias", format!("x {xs:?}, bias {bs:?}")));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.push(out, Op::ChannelBias { x, b }, &[x, b], "add_channel_bias")
    }

    /// Adds a per-sample channel vector `e[N, C]` to every position of `x[N, C, H, W]`.
    pub fn add_sample_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e);
        if xs.len() < 2 || es != [xs[0], xs[1]] {
            return Err(Error::shape("add_sample_channel", format!("x {xs:?}, e {es:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let v = ev[i];
            chunk.iter_mut().for_each(|o| *o += v);
        }
        self.push(out, Op::SampleChannelAdd { x, e }, &[x, e], "add_sample_channel")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a], "silu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = v.clone();
        if last > 0 {
            for row in out.data_mut().chunks_mut(last) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x as f64;
                }
                let inv = (1.0 / z) as f32;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        self.push(out, Op::SoftmaxLast(a), &[a], "softmax")
    }

    /// Group normalization over `x[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("group_norm", format!("rank {} input", xs.len())));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", format!("{c} channels into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", "affine parameters must be [C]"));
        }
        let inner: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * inner;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; src.len()];
        let mut stats = Vec::with_capacity(n * groups);
        for (gi, (block, dst)) in src
            .chunks(m.max(1))
            .zip(out.chunks_mut(m.max(1)))
            .enumerate()
            .take(n * groups)
        {
            let mean = block.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = block.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let rstd = 1.0 / (var + GN_EPS).sqrt();
            stats.push((mean, rstd));
            let group = gi % groups;
            for (j, (s, d)) in block.iter().zip(dst.iter_mut()).enumerate() {
                let ch = group * cpg + j / inner.max(1);
                let xhat = (*s as f64 - mean) * rstd;
                *d = (xhat * g[ch] as f64 + b[ch] as f64) as f32;
            }
        }
        let out = Tensor::new(&xs, out)?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
            "group_norm",
        )
    }

    /// Concatenates along axis 1. Zero-channel parts are allowed.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", format!("rank {} input", s0.len())));
        }
        let inner: usize = s0[2..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            total += s[1];
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let n = s0[0];
        let mut data = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for p in parts {
                let v = self.value(*p);
                let per = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// Channels `[start, start + len)` of axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) of {s:?}", start + len),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let c = s[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            data.extend_from_slice(&src[(b * c + start) * inner..(b * c + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Slice { x, start, len }, &[x], "slice_channels")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("perm {perm:?} for shape {s:?}")));
        }
        let out = permute_tensor(self.value(x), perm);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x], "permute")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().map(|&v| v as f64).sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(x), &[x], "mean")
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            Mat::rows(self.value(a).data(), k),
            Mat::rows(self.value(b).data(), n),
            &mut out,
            0.0,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bt, m, k, n) = match (&sa[..], &sb[..]) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; bt * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            kernels::gemm(
                m,
                k,
                n,
                Mat::rows(&va[i * m * k..], k),
                Mat::rows(&vb[i * k * n..], n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(Tensor::new(&[bt, m, n], out)?, Op::Bmm(a, b), &[a, b], "bmm")
    }

    /// Fully-connected layer on rows: `x[M, K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_channel_bias(y, b)
    }

    /// Cross-correlation of `x[N, C, H, W]` with `w[O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, cw, kh, kw] = self.value(w).dims4("conv2d")?;
        if c != cw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} on padded {h}x{wd} (pad {pad})"),
            ));
        }
        if !(h + 2 * pad - kh).is_multiple_of(stride) || !(wd + 2 * pad - kw).is_multiple_of(stride) {
            return Err(Error::shape(
                "conv2d",
                format!("stride {stride} does not tile {h}x{wd} with kernel {kh}x{kw}, pad {pad}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} outputs", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![0.0; n * o * geom.ho * geom.wo];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), n, o, &geom, &mut out);
        if let Some(b) = b {
            add_bias_inplace(&mut out, self.value(b).data(), geom.ho * geom.wo);
        }
        let out = Tensor::new(&[n, o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &inputs, "conv2d")
    }

    /// Depthwise cross-correlation, stride 1, with `w[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4("depthwise_conv2d")?;
        let [cw, one, kh, kw] = self.value(w).dims4("depthwise_conv2d")?;
        if cw != c || one != 1 || kh != kw {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape("depthwise_conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::shape("depthwise_conv2d", "bias must be [C]"));
            }
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = vec![0.0; n * c * ho * wo];
        kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            n,
            c,
            h,
            wd,
            kh,
            pad,
            ho,
            wo,
            &mut out,
        );
        if let Some(b) = b {
            add_bias_inplace(&mut out, self.value(b).data(), ho * wo);
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Depthwise { x, w, b, pad }, &inputs, "depthwise_conv2d")
    }

    /// Non-overlapping `stride × stride` pooling.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("pool2d")?;
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(
                "pool2d",
                format!("{h}x{w} not divisible by stride {stride}"),
            ));
        }
        let (ho, wo) = (h / stride, w / stride);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let inv = 1.0 / (stride * stride) as f32;
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let o = p * ho * wo + oi * wo + oj;
                    match kind {
                        PoolKind::Max => {
                            let mut best = (f32::NEG_INFINITY, 0usize);
                            for di in 0..stride {
                                for dj in 0..stride {
                                    let idx = (oi * stride + di) * w + oj * stride + dj;
                                    if plane[idx] > best.0 {
                                        best = (plane[idx], idx);
                                    }
                                }
                            }
                            out[o] = best.0;
                            argmax.push((p * h * w + best.1) as u32);
                        }
                        PoolKind::Avg => {
                            let mut s = 0.0f32;
                            for di in 0..stride {
                                let row = (oi * stride + di) * w + oj * stride;
                                s += plane[row..row + stride].iter().sum::<f32>();
                            }
                            out[o] = s * inv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Avg => Op::AvgPool { x, stride },
        };
        self.push(out, op, &[x], "pool2d")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
        }
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest")?;
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                let srow = &src[p * h * w + (i / factor) * w..][..w];
                let drow = &mut out[p * ho * wo + i * wo..][..wo];
                for (j, d) in drow.iter_mut().enumerate() {
                    *d = srow[j / factor];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        self.push(out, Op::Upsample { x, factor }, &[x], "upsample_nearest")
    }

    /// Back-propagates from a rank-0 `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).rank() != 0 {
            return Err(Error::Contract(format!(
                "backward requires a rank-0 loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.adjoint(idx, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn adjoint(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, g, 1.0));
                acc(*b, &mut |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), v)| *d += g * v)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), v)| *d += g * v)
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| axpy(d, g, *s)),
            Op::AddScalar(a) => acc(*a, &mut |d| axpy(d, g, 1.0)),
            Op::ChannelBias { x, b } => {
                acc(*x, &mut |d| axpy(d, g, 1.0));
                let s = self.shape(*x);
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                acc(*b, &mut |d| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        d[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                });
            }
            Op::SampleChannelAdd { x, e } => {
                acc(*x, &mut |d| axpy(d, g, 1.0));
                let inner: usize = self.shape(*x)[2..].iter().product();
                acc(*e, &mut |d| {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        d[i] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                    }
                });
            }
            Op::Silu(a) => {
                let xa = self.value(*a).data();
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xa) {
                        let s = sigmoid(x);
                        *d += g * s * (1.0 + x * (1.0 - s));
                    }
                })
            }
            Op::Gelu(a) => {
                let xa = self.value(*a).data();
                acc(*a, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xa) {
                        let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d += g * (0.5 * (1.0 + th) + 0.5 * x * dth);
                    }
                })
            }
            Op::SoftmaxLast(a) => {
                let last = *node.value.shape().last().unwrap();
                acc(*a, &mut |d| {
                    if last == 0 {
                        return;
                    }
                    for ((drow, grow), yrow) in d.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(&g, &y)| (g * y) as f64).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot as f32);
                        }
                    }
                })
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => self.group_norm_adjoint(*x, *gamma, *beta, *groups, stats, g, grads),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1];
                let mut offset = 0;
                for p in parts {
                    let cp = self.shape(*p)[1];
                    acc(*p, &mut |d| {
                        for b in 0..s[0] {
                            let src = &g[(b * total + offset) * inner..(b * total + offset + cp) * inner];
                            axpy(&mut d[b * cp * inner..(b + 1) * cp * inner], src, 1.0);
                        }
                    });
                    offset += cp;
                }
            }
            Op::Slice { x, start, len } => {
                let s = self.shape(*x);
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                acc(*x, &mut |d| {
                    for b in 0..s[0] {
                        let dst = &mut d[(b * c + start) * inner..(b * c + start + len) * inner];
                        axpy(dst, &g[b * len * inner..(b + 1) * len * inner], 1.0);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| axpy(d, g, 1.0)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inv);
                acc(*x, &mut |d| axpy(d, back.data(), 1.0));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f32;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    kernels::gemm(m, n, k, Mat::rows(g, n), Mat::t(vb, n), d, 1.0)
                });
                acc(*b, &mut |d| {
                    kernels::gemm(k, m, n, Mat::t(va, k), Mat::rows(g, n), d, 1.0)
                });
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..bt {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            Mat::rows(&g[i * m * n..], n),
                            Mat::t(&vb[i * k * n..], n),
                            &mut d[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..bt {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            Mat::t(&va[i * m * k..], k),
                            Mat::rows(&g[i * m * n..], n),
                            &mut d[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let (nx, nw) = (self.nodes[x.0].needs_grad, self.nodes[w.0].needs_grad);
                let mut dx = nx.then(|| vec![0.0; vx.len()]);
                let mut dw = nw.then(|| vec![0.0; vw.len()]);
                kernels::conv2d_backward(vx, vw, g, n, o, geom, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |d| axpy(d, &dx, 1.0));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| axpy(d, &dw, 1.0));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| bias_grad(d, g, geom.ho * geom.wo));
                }
            }
            Op::Depthwise { x, w, b, pad } => {
                let [n, c, h, wd] = self.value(*x).dims4("depthwise").expect("rank 4");
                let k = self.shape(*w)[2];
                let [_, _, ho, wo] = node.value.dims4("depthwise").expect("rank 4");
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let (nx, nw) = (self.nodes[x.0].needs_grad, self.nodes[w.0].needs_grad);
                let mut dx = nx.then(|| vec![0.0; vx.len()]);
                let mut dw = nw.then(|| vec![0.0; vw.len()]);
                kernels::depthwise_backward(
                    vx,
                    vw,
                    g,
                    n,
                    c,
                    h,
                    wd,
                    k,
                    *pad,
                    ho,
                    wo,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |d| axpy(d, &dx, 1.0));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| axpy(d, &dw, 1.0));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| bias_grad(d, g, ho * wo));
                }
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i as usize] += gv;
                }
            }),
            Op::AvgPool { x, stride } => {
                let [n, c, h, w] = self.value(*x).dims4("avg_pool").expect("rank 4");
                let s = *stride;
                let (ho, wo) = (h / s, w / s);
                let inv = 1.0 / (s * s) as f32;
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for i in 0..h {
                            for j in 0..w {
                                d[p * h * w + i * w + j] += g[p * ho * wo + (i / s) * wo + j / s] * inv;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = self.value(*x).dims4("upsample").expect("rank 4");
                let f = *factor;
                let (ho, wo) = (h * f, w * f);
                acc(*x, &mut |d| {
                    for p in 0..n * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                d[p * h * w + (i / f) * w + j / f] += g[p * ho * wo + i * wo + j];
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_adjoint(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f64, f64)],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let s = self.shape(x);
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let cpg = c / groups;
        let m = cpg * inner;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let mut dx = vec![0.0f32; if self.nodes[x.0].needs_grad { xv.len() } else { 0 }];
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (gi, &(mean, rstd)) in stats.iter().enumerate() {
            let group = gi % groups;
            let base = gi * m;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for j in 0..m {
                let ch = group * cpg + j / inner.max(1);
                let xhat = (xv[base + j] as f64 - mean) * rstd;
                let gy = g[base + j] as f64;
                dgamma[ch] += gy * xhat;
                dbeta[ch] += gy;
                let dxhat = gy * gv[ch] as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            if !dx.is_empty() {
                let (mdx, mdxx) = (sum_dxhat / m as f64, sum_dxhat_xhat / m as f64);
                for j in 0..m {
                    let ch = group * cpg + j / inner.max(1);
                    let xhat = (xv[base + j] as f64 - mean) * rstd;
                    let dxhat = g[base + j] as f64 * gv[ch] as f64;
                    dx[base + j] = (rstd * (dxhat - mdx - xhat * mdxx)) as f32;
                }
            }
        }
        let mut put = |v: Var, vals: &[f32]| {
            if self.nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; vals.len()]);
                axpy(slot, vals, 1.0);
            }
        };
        if !dx.is_empty() {
            put(x, &dx);
        }
        put(gamma, &dgamma.iter().map(|&v| v as f32).collect::<Vec<_>>());
        put(beta, &dbeta.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    debug_assert_eq!(dst.len(), src.len());
    if a == 1.0 {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
    }
}

fn add_bias_inplace(out: &mut [f32], bias: &[f32], inner: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(d: &mut [f32], g: &[f32], inner: usize) {
    let c = d.len();
    for (i, chunk) in g.chunks(inner).enumerate() {
        d[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.numel());
    let src = t.data();
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data).expect("permute preserves numel")
}
