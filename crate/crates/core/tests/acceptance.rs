//! End-to-end acceptance suite.
//!
//! Runs every criterion in order, prints one `PASS`/`FAIL` line each and
//! exits non-zero when a hard criterion fails. The spectral-divergence report
//! is a soft gate: a non-positive margin is flagged but does not fail the run.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use meme_core::blocks::{sinusoidal_embedding, AttentionBlock, IFormerBlock, ResBlock};
use meme_core::cli::RunConfig;
use meme_core::experts::{
    generate, sample_timestep, MultiExpertConfig, OracleDenoiser, Paging, SampleOptions, SamplerKind,
};
use meme_core::fraction::Fraction;
use meme_core::iunet::{expert_arch_for, micro_model_gradcheck, Denoiser, ExpertArchConfig};
use meme_core::numerics::gradcheck::op_suite;
use meme_core::numerics::{Tape, Tensor};
use meme_core::params::{ParamBuilder, ParamStore};
use meme_core::pipeline::train::TrainOptions;
use meme_core::pipeline::{sample_run, train_all, train_expert, train_single, Dataset, DatasetSpec};
use meme_core::rng;
use meme_core::schedule::{forward_noise, DiffusionSchedule};
use meme_core::spectral::{
    delta_high_freq, feature_spectrum_report, input_spectrum_report, noise_profile, SpectralProfile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = meme_core::Result<Outcome>;

// ---------------------------------------------------------------------------
// 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let ops = op_suite(0)?;
    let worst = ops
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("ops");
    let failing: Vec<_> = ops.iter().filter(|c| c.max_rel_err >= 1e-3).map(|c| c.op).collect();
    let model = micro_model_gradcheck(9)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        failing.is_empty() && model < 1e-2 && secs < 120.0,
        format!(
            "{} ops, worst {} {:.2e} (< 1e-3){}; micro iU-Net {:.2e} (< 1e-2); {:.1}s (< 120s)",
            ops.len(),
            worst.op,
            worst.max_rel_err,
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {failing:?}")
            },
            model,
            secs
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2

fn forward_law() -> Check {
    let s = DiffusionSchedule::default_linear();
    let draws = 100_000;
    let x0v = 0.7f32;
    let x0 = Tensor::full(&[draws], x0v);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    let steps = s.steps();
    for (k, t) in [0, steps / 4, steps / 2, 3 * steps / 4, steps - 1]
        .into_iter()
        .enumerate()
    {
        let mut r = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let eps = Tensor::randn(&[draws], &mut r);
        let x = forward_noise(&x0, t, &eps, &s)?;
        let n = draws as f64;
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar()[t];
        let mu = ab.sqrt() * x0v as f64;
        let sigma2 = 1.0 - ab;
        // mean error relative to the larger of |mean| and the spread
        worst_mean = worst_mean.max((mean - mu).abs() / mu.abs().max(sigma2.sqrt()));
        worst_var = worst_var.max((var - sigma2).abs() / sigma2);
    }
    Ok(outcome(
        worst_mean < 0.02 && worst_var < 0.02,
        format!("10^5 draws at 5 time-steps: worst mean error {worst_mean:.4}, worst variance error {worst_var:.4} (< 0.02)"),
    ))
}

// ---------------------------------------------------------------------------
// 3

fn planted() -> Tensor {
    Tensor::from_fn(&[1, 4, 4], |i| 0.3 + 0.5 * ((i as f32) * 0.7).sin().abs())
}

fn oracle_recovery() -> Check {
    let s = DiffusionSchedule::default_linear();
    let x0 = planted();
    let oracle = OracleDenoiser {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for steps in [10, 50, 200] {
        let opts = SampleOptions {
            sampler: SamplerKind::Ddim,
            steps,
            eta: 0.0,
            count: 4,
            seed: 21,
            image_shape: vec![1, 4, 4],
            chunk: None,
        };
        let out = generate(&oracle, &s, &opts)?;
        let err = (0..4)
            .map(|i| out.batch_item(i).max_abs_diff(&x0))
            .fold(0.0f32, f32::max);
        pass &= err < 1e-3;
        parts.push(format!("DDIM {steps} L∞ {err:.1e}"));
    }
    let count = 1000;
    let opts = SampleOptions {
        sampler: SamplerKind::Ddpm,
        steps: s.steps(),
        eta: 0.0,
        count,
        seed: 22,
        image_shape: vec![1, 4, 4],
        chunk: Some(250),
    };
    let out = generate(&oracle, &s, &opts)?;
    let px = x0.numel();
    let mut worst = 0.0f64;
    for j in 0..px {
        let mean = (0..count).map(|i| out.data()[i * px + j] as f64).sum::<f64>() / count as f64;
        let target = x0.data()[j] as f64;
        worst = worst.max((mean - target).abs() / target.abs());
    }
    pass &= worst < 0.02;
    parts.push(format!(
        "DDPM 1000 trajectories worst relative mean error {worst:.1e} (< 0.02)"
    ));
    Ok(outcome(pass, parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 4

fn structure() -> Check {
    let base = ExpertArchConfig::uniform(1, 16, &[1, 2, 3, 4], 64, Fraction::ONE);
    let f = Fraction::new;
    let table = [
        [f(3, 4), f(5, 8), f(1, 2), f(1, 4)],
        [f(3, 4), f(1, 2), f(3, 8), f(1, 8)],
        [f(3, 4), f(3, 8), f(1, 4), f(1, 16)],
        [f(3, 4), f(1, 4), f(1, 8), f(1, 16)],
    ];
    let mut pass = true;
    let mut identity_blocks = 0;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=4 {
        let cfg = expert_arch_for(n, 4, &base)?;
        pass &= cfg.split_fractions() == table[n - 1];
        for k in 0..cfg.num_stages() {
            let split = cfg.stage_split(k)?;
            pass &= split.d_h + split.d_l == split.d;
            let d = split.d;
            let mut store = ParamStore::new();
            let mut pb = ParamBuilder::new(&mut store, &mut r);
            let iformer = IFormerBlock::new(&mut pb.scope("i"), split, 32);
            let res = ResBlock::new(&mut pb.scope("r"), d, d, 32);
            let attn = AttentionBlock::new(&mut pb.scope("a"), d);
            let mut data_rng = ChaCha8Rng::seed_from_u64(n as u64 * 10 + k as u64);
            let z = Tensor::randn(&[2, d, 8, 8], &mut data_rng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let zv = tape.constant(z.clone());
            let tv = tape.constant(sinusoidal_embedding(&[10, 900], 32));
            let outs = [
                iformer.forward(&mut tape, &p, zv, tv)?,
                res.forward(&mut tape, &p, zv, tv)?,
                attn.forward(&mut tape, &p, zv)?,
            ];
            for o in outs {
                pass &= *tape.value(o) == z;
                identity_blocks += 1;
            }
        }
    }
    Ok(outcome(
        pass,
        format!("4 experts × 4 stages: d_h + d_l = d, split fractions equal the table, {identity_blocks} zero-init blocks exact identities"),
    ))
}

// ---------------------------------------------------------------------------
// 5

fn mixture_law() -> Check {
    let cfg = micro_run_config(4, 10).multi_expert()?;
    let draws = 100_000;
    let mut pass = true;
    let mut got = Vec::new();
    for e in &cfg.experts {
        let mut r = rng::stream(55, &[e.n as u64]);
        let hits = (0..draws)
            .filter(|_| e.interval.contains(sample_timestep(e, cfg.steps(), &mut r)))
            .count();
        let freq = hits as f64 / draws as f64;
        let expected = e.p + (1.0 - e.p) / 4.0;
        pass &= (freq - expected).abs() <= 0.01;
        got.push(format!("{freq:.4}/{expected:.3}"));
    }
    Ok(outcome(
        pass,
        format!("P(t in own interval) observed/expected: {}", got.join(", ")),
    ))
}

// ---------------------------------------------------------------------------
// 6

fn input_spectrum() -> Check {
    let start = Instant::now();
    let spec = DatasetSpec::SyntheticPowerlaw {
        count: 500,
        size: 64,
        channels: 1,
        exponent: 2.0,
        amplitude_scale: 1.0,
        dc_offset_std: 0.25,
        seed: 61,
    };
    let data = Dataset::from_spec(&spec, Path::new("."))?;
    let s = DiffusionSchedule::default_linear();
    let ts: Vec<usize> = [1, 3, 5, 7].iter().map(|k| k * s.steps() / 8).collect();
    let report = input_spectrum_report(data.images(), &s, &ts, 500, 62)?;
    let hf: Vec<f64> = report.iter().map(|(_, p)| delta_high_freq(p)).collect();
    let monotone = hf.windows(2).all(|w| w[1] >= w[0]);
    let noise = delta_high_freq(&noise_profile(data.images(), ts[3], 500, 62)?);
    let gap = (hf[3] - noise).abs();
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        monotone && gap < 0.2 && secs < 300.0,
        format!(
            "Δ(π) at t={ts:?}: [{}]; pure noise {noise:.3}, gap {gap:.3} (< 0.2); {secs:.1}s (< 300s)",
            hf.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

// ---------------------------------------------------------------------------
// shared training runs (7, 9, 10)

const ITERATIONS: usize = 2000;

fn micro_base() -> ExpertArchConfig {
    ExpertArchConfig::uniform(1, 8, &[1, 2], 32, Fraction::ONE)
}

fn micro_run_config(experts: usize, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::with_experts(micro_base(), experts, iterations);
    cfg.training.batch_size = 8;
    cfg.dataset = DatasetSpec::SyntheticPowerlaw {
        count: 512,
        size: 32,
        channels: 1,
        exponent: 2.0,
        amplitude_scale: 1.0,
        dc_offset_std: 0.25,
        seed: 7,
    };
    cfg.sampler.count = 8;
    cfg
}

struct Trained {
    run_dir: PathBuf,
    config: RunConfig,
    data: Dataset,
    losses: Vec<Vec<f64>>,
    loss_ema: Vec<f64>,
    models: Vec<Denoiser>,
    secs: f64,
}

fn train_micro_run(root: &Path) -> meme_core::Result<Trained> {
    let config = micro_run_config(4, ITERATIONS);
    let run_dir = root.join("run");
    std::fs::create_dir_all(&run_dir).map_err(|e| meme_core::Error::Io {
        path: run_dir.clone(),
        source: e,
    })?;
    std::fs::write(run_dir.join("config.json"), config.to_json()?).expect("write config");
    let data = Dataset::from_spec(&config.dataset, root)?;
    let mcfg = config.multi_expert()?;
    let start = Instant::now();
    let out = train_all(&mcfg, &data, Some(&run_dir), &[], false, false)?;
    let secs = start.elapsed().as_secs_f64();
    let losses = out.experts.iter().map(|o| o.state.losses()).collect();
    let loss_ema = out
        .experts
        .iter()
        .map(|o| o.state.loss_ema.unwrap_or(f64::NAN))
        .collect();
    let models = out.experts.into_iter().map(|o| o.model).collect();
    Ok(Trained {
        run_dir,
        config,
        data,
        losses,
        loss_ema,
        models,
        secs,
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

// ---------------------------------------------------------------------------
// 7

fn training(run: &Trained) -> Check {
    let mut pass = run.secs < 3600.0;
    let mut parts = Vec::new();
    for (n, (l, ema)) in run.losses.iter().zip(&run.loss_ema).enumerate() {
        let q = l.len() / 4;
        let (first, last) = (median(&l[..q]), median(&l[l.len() - q..]));
        pass &= l.len() == ITERATIONS && *ema < 0.9 && last < first;
        parts.push(format!(
            "expert {}: EMA {ema:.3}, quartile medians {first:.3} → {last:.3}",
            n + 1
        ));
    }
    Ok(outcome(
        pass,
        format!("{}; {:.1} min (< 60 min)", parts.join("; "), run.secs / 60.0),
    ))
}

// ---------------------------------------------------------------------------
// 8

fn degenerate_n() -> Check {
    let mut config = micro_run_config(1, 30);
    config.schedule.steps = 100;
    let mcfg = config.multi_expert()?;
    let tmp = tempfile::tempdir().expect("tempdir");
    let data = Dataset::from_spec(&config.dataset, tmp.path())?;
    let multi = train_all(&mcfg, &data, Some(tmp.path()), &[], false, false)?;
    let schedule = mcfg.schedule.build()?;
    let single = train_single(
        &mcfg.experts[0].arch,
        &schedule,
        &mcfg.training,
        &data,
        TrainOptions::default(),
    )?;
    let m = &multi.experts[0];
    let same_train = m.model.params() == single.model.params() && m.state.losses() == single.state.losses();
    let mut same_sample = true;
    for (sampler, steps) in [(SamplerKind::Ddim, 20), (SamplerKind::Ddpm, 100)] {
        let mut opts = config.sample_options(config.image_shape());
        opts.sampler = sampler;
        opts.steps = steps;
        opts.count = 3;
        let a = sample_run(tmp.path(), &mcfg, &opts, &Paging::Resident)?;
        let b = generate(&single.model, &schedule, &opts)?;
        same_sample &= a.data() == b.data();
    }
    Ok(outcome(
        same_train && same_sample,
        format!("N=1 vs single model: parameters and losses identical {same_train}, DDIM and DDPM samples identical {same_sample}"),
    ))
}

// ---------------------------------------------------------------------------
// 9

fn sample_hash(run: &Trained, out: &Path, extra: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_meme"))
        .arg("sample")
        .arg("--run")
        .arg(&run.run_dir)
        .arg("--out")
        .arg(out)
        .args(["--sampler", "ddim", "--eta", "0", "--steps", "50", "--seed", "90"])
        .args(extra)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let bytes = std::fs::read(out.join("samples.memt")).map_err(|e| e.to_string())?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn determinism(run: &Trained, root: &Path) -> Check {
    let runs = [
        sample_hash(run, &root.join("s_a"), &[]),
        sample_hash(run, &root.join("s_b"), &[]),
        sample_hash(run, &root.join("s_seq"), &["--resident-experts", "1"]),
    ];
    let hashes: Vec<String> = match runs.into_iter().collect::<Result<_, _>>() {
        Ok(h) => h,
        Err(e) => return Ok(outcome(false, format!("sample failed: {e}"))),
    };
    // library path with different chunking
    let mcfg = run.config.multi_expert()?;
    let mut opts = run.config.sample_options(run.config.image_shape());
    opts.steps = 50;
    opts.seed = 90;
    opts.eta = 0.0;
    opts.chunk = Some(3);
    let chunked = sample_run(&run.run_dir, &mcfg, &opts, &Paging::Resident)?;
    let cli = meme_core::numerics::container::load_tensor(&root.join("s_a/samples.memt"))?;
    let all_eq = hashes.iter().all(|h| *h == hashes[0]) && chunked == cli;
    Ok(outcome(
        all_eq,
        format!(
            "sha256 resident run 1 {}…, run 2 {}…, sequential {}…; chunked library path identical {}",
            &hashes[0][..12],
            &hashes[1][..12],
            &hashes[2][..12],
            chunked == cli
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10

fn encoder_gap(rows: &[meme_core::spectral::FeatureRow], a: &str, b: &str) -> meme_core::Result<f64> {
    let find = |m: &str, layer: &str| -> &SpectralProfile {
        &rows
            .iter()
            .find(|r| r.model_id == m && r.layer_id == layer)
            .expect("row")
            .profile
    };
    let layers: Vec<&str> = rows
        .iter()
        .filter(|r| r.model_id == a && r.layer_id.starts_with("enc"))
        .map(|r| r.layer_id.as_str())
        .collect();
    let mut sum = 0.0;
    for l in &layers {
        sum += find(a, l).mean_abs_diff(find(b, l))?;
    }
    Ok(sum / layers.len() as f64)
}

fn feature_divergence(run: &Trained) -> Check {
    // expert 1's architecture trained on expert 4's interval and p
    let mcfg = run.config.multi_expert()?;
    let mut twin_cfg: MultiExpertConfig = mcfg.clone();
    twin_cfg.experts[3].arch = mcfg.experts[0].arch.clone();
    let twin = train_expert(&twin_cfg, 4, &run.data, TrainOptions::default())?;
    let t = 7 * mcfg.steps() / 8;
    let models: Vec<(&str, &Denoiser)> = vec![
        ("expert1", &run.models[0]),
        ("expert4", &run.models[3]),
        ("twin", &twin.model),
    ];
    let images: Vec<Tensor> = run.data.images()[..128].to_vec();
    let rows = feature_spectrum_report(&models, &[t], &images, 128, 101)?;
    let meme = encoder_gap(&rows, "expert1", "expert4")?;
    let same = encoder_gap(&rows, "expert1", "twin")?;
    let margin = meme - same;
    Ok(outcome(
        margin > 0.0,
        format!("t={t}: encoder-tap mean |ΔΔ| expert 1 vs 4 {meme:.4}, same-architecture pair {same:.4}, margin {margin:+.4}"),
    ))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, soft: bool, r: Check, failed: &mut Vec<usize>) {
    let (tag, detail) = match r {
        Ok(o) if o.pass => ("PASS", o.detail),
        Ok(o) if soft => ("FLAG", format!("{} (soft gate: margin not positive)", o.detail)),
        Ok(o) => ("FAIL", o.detail),
        Err(e) if soft => ("FLAG", format!("error: {e}")),
        Err(e) => ("FAIL", format!("error: {e}")),
    };
    if tag == "FAIL" {
        failed.push(id);
    }
    println!("criterion {id:>2} {tag} {name}: {detail}");
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and similar harness probes
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut failed = Vec::new();
    report(1, "gradient suite", false, gradient_suite(), &mut failed);
    report(2, "forward-process law", false, forward_law(), &mut failed);
    report(3, "oracle recovery", false, oracle_recovery(), &mut failed);
    report(4, "iFormer structure", false, structure(), &mut failed);
    report(5, "soft-expert mixture law", false, mixture_law(), &mut failed);
    report(6, "input spectrum", false, input_spectrum(), &mut failed);
    report(8, "degenerate N = 1", false, degenerate_n(), &mut failed);
    let root = tempfile::tempdir().expect("tempdir");
    match train_micro_run(root.path()) {
        Ok(run) => {
            report(7, "desk-scale training", false, training(&run), &mut failed);
            report(
                9,
                "determinism and paging",
                false,
                determinism(&run, root.path()),
                &mut failed,
            );
            report(
                10,
                "feature-spectrum divergence",
                true,
                feature_divergence(&run),
                &mut failed,
            );
        }
        Err(e) => {
            for (id, name) in [(7, "desk-scale training"), (9, "determinism and paging")] {
                report(
                    id,
                    name,
                    false,
                    Err(meme_core::Error::Contract(format!("training failed: {e}"))),
                    &mut failed,
                );
            }
            report(10, "feature-spectrum divergence", true, Err(e), &mut failed);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
