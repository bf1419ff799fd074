//! Central finite-difference oracle for tape gradients.
//!
//! The function under test is reduced to a scalar by a fixed random projection
//! `sum(w · f(x))`, accumulated in `f64` on the oracle side. Autodiff and the
//! oracle share only the forward evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f32,
    /// Probe at most this many entries per input (all when `None`).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            max_probes: None,
            seed: 0x5eed,
        }
    }
}

/// Relative error of autodiff vs finite differences for each input.
///
/// The error for one input is `max_j |auto_j - fd_j| / max_j |fd_j|` over the
/// probed entries, i.e. the L∞ discrepancy relative to the gradient's scale.
pub fn check_gradients<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        tape.value(y).shape().to_vec()
    };
    let weights = Tensor::uniform(&probe, -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let wy = tape.mul(y, w)?;
    let loss = tape.sum(wy)?;
    let mut grads = tape.backward(loss)?;

    let objective = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let auto = grads.take(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let n = inputs[i].numel();
        let indices: Vec<usize> = match opts.max_probes {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut xs = inputs.to_vec();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for j in indices {
            let orig = inputs[i].data()[j];
            let (hi, lo) = (orig + opts.step, orig - opts.step);
            xs[i].data_mut()[j] = hi;
            let fp = objective(&xs)?;
            xs[i].data_mut()[j] = lo;
            let fm = objective(&xs)?;
            xs[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (hi as f64 - lo as f64);
            worst = worst.max((auto.data()[j] as f64 - fd).abs());
            scale = scale.max(fd.abs());
        }
        errors.push(if scale > 1e-12 { worst / scale } else { worst });
    }
    Ok(errors)
}

/// Directional variant of [`check_gradients`]: each group of inputs is
/// perturbed jointly along `probes` random sign vectors, and `<grad, d>` is
/// compared with the central difference of the projected output along `d`.
///
/// The error for one group is `max_k |auto_k - fd_k| / max_k |fd_k|`. A
/// direction aggregates many entries per evaluation, so the check stays above
/// the f32 rounding floor of deep compositions where single-entry derivatives
/// drown in it.
pub fn check_directional<F>(
    inputs: &[Tensor],
    groups: &[Vec<usize>],
    probes: usize,
    opts: &GradCheckOptions,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        tape.value(y).shape().to_vec()
    };
    let weights = Tensor::uniform(&probe, -1.0, 1.0, &mut rng);
    let auto: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let wy = tape.mul(y, w)?;
        let loss = tape.sum(wy)?;
        let mut grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };
    let objective = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape
            .value(y)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    };

    let mut errors = Vec::with_capacity(groups.len());
    for group in groups {
        let (mut worst, mut scale) = (0.0f64, 0.0f64);
        for _ in 0..probes {
            let (mut hi, mut lo) = (inputs.to_vec(), inputs.to_vec());
            let mut dir = 0.0f64;
            for &i in group {
                for j in 0..inputs[i].numel() {
                    let d = if rng.random::<bool>() { opts.step } else { -opts.step };
                    let x = inputs[i].data()[j];
                    let (a, b) = (x + d, x - d);
                    hi[i].data_mut()[j] = a;
                    lo[i].data_mut()[j] = b;
                    // actual f32 displacement
                    dir += auto[i].data()[j] as f64 * (a as f64 - b as f64);
                }
            }
            let fd = objective(&hi)? - objective(&lo)?;
            worst = worst.max((dir - fd).abs());
            scale = scale.max(fd.abs());
        }
        errors.push(if scale > 1e-12 { worst / scale } else { worst });
    }
    Ok(errors)
}

/// Worst autodiff-vs-finite-difference error of one op across its inputs.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_err: f64,
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values spaced at least `gap` apart in random order, so max-pool winners
/// cannot flip under a finite-difference step.
fn spaced_t(shape: &[usize], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| -1.0 + i as f32 * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).expect("shape")
}

/// Runs the finite-difference suite over every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use super::tape::PoolKind;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let img = [2, 3, 6, 6];
    let mut out = Vec::new();
    let mut run = |op: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let errs = check_gradients(&inputs, &opts, f)?;
        out.push(OpCheck {
            op,
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
        Ok(())
    };
    let a = rand_t(&img, &mut rng);
    let b = rand_t(&img, &mut rng);
    run("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![a.clone()], &|t, v| t.scale(v[0], -1.7))?;
    run("add_scalar", vec![a.clone()], &|t, v| t.add_scalar(v[0], 0.3))?;
    run("silu", vec![a.clone()], &|t, v| t.silu(v[0]))?;
    run("gelu", vec![a.clone()], &|t, v| t.gelu(v[0]))?;
    run("add_channel_bias", vec![a.clone(), rand_t(&[3], &mut rng)], &|t, v| {
        t.add_channel_bias(v[0], v[1])
    })?;
    run(
        "add_sample_channel",
        vec![a.clone(), rand_t(&[2, 3], &mut rng)],
        &|t, v| t.add_sample_channel(v[0], v[1]),
    )?;
    run("softmax_last", vec![rand_t(&[3, 5, 7], &mut rng)], &|t, v| {
        t.softmax_last(v[0])
    })?;
    run(
        "group_norm",
        vec![
            rand_t(&[2, 16, 4, 4], &mut rng),
            rand_t(&[16], &mut rng),
            rand_t(&[16], &mut rng),
        ],
        &|t, v| t.group_norm(v[0], 8, v[1], v[2]),
    )?;
    run(
        "concat_channels",
        vec![rand_t(&[2, 2, 4, 4], &mut rng), rand_t(&[2, 3, 4, 4], &mut rng)],
        &|t, v| t.concat_channels(&[v[0], v[1]]),
    )?;
    run("slice_channels", vec![a.clone()], &|t, v| t.slice_channels(v[0], 1, 2))?;
    run("reshape", vec![a.clone()], &|t, v| t.reshape(v[0], &[6, 36]))?;
    run("permute", vec![rand_t(&[2, 3, 4, 5], &mut rng)], &|t, v| {
        t.permute(v[0], &[0, 2, 3, 1])
    })?;
    // Scalar reductions: the f32 rounding of the output is spread over every
    // input entry, so these use small inputs to keep per-entry gradients large.
    let (ra, rb) = (rand_t(&[3, 4], &mut rng), rand_t(&[3, 4], &mut rng));
    run("sum", vec![ra.clone()], &|t, v| t.sum(v[0]))?;
    run("mean", vec![ra.clone()], &|t, v| t.mean(v[0]))?;
    run("mse", vec![ra, rb], &|t, v| t.mse(v[0], v[1]))?;
    run(
        "matmul",
        vec![rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng)],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    run(
        "bmm",
        vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[2, 4, 5], &mut rng)],
        &|t, v| t.bmm(v[0], v[1]),
    )?;
    run(
        "linear",
        vec![
            rand_t(&[5, 4], &mut rng),
            rand_t(&[4, 3], &mut rng),
            rand_t(&[3], &mut rng),
        ],
        &|t, v| t.linear(v[0], v[1], v[2]),
    )?;
    run(
        "conv2d",
        vec![a.clone(), rand_t(&[4, 3, 3, 3], &mut rng), rand_t(&[4], &mut rng)],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?;
    run(
        "conv2d_stride2",
        vec![
            rand_t(&[2, 3, 8, 8], &mut rng),
            rand_t(&[4, 3, 4, 4], &mut rng),
            rand_t(&[4], &mut rng),
        ],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    )?;
    run(
        "conv2d_pointwise",
        vec![a.clone(), rand_t(&[5, 3, 1, 1], &mut rng)],
        &|t, v| t.conv2d(v[0], v[1], None, 1, 0),
    )?;
    run(
        "depthwise_conv2d",
        vec![a.clone(), rand_t(&[3, 1, 3, 3], &mut rng), rand_t(&[3], &mut rng)],
        &|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), 1),
    )?;
    run("max_pool2d", vec![spaced_t(&img, 0.01, &mut rng)], &|t, v| {
        t.pool2d(v[0], PoolKind::Max, 2)
    })?;
    run("avg_pool2d", vec![a.clone()], &|t, v| t.pool2d(v[0], PoolKind::Avg, 2))?;
    run("upsample_nearest", vec![a.clone()], &|t, v| t.upsample_nearest(v[0], 2))?;
    Ok(out)
}
