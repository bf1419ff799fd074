//! The `meme` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing artifact,
//! 4 numerical abort or failed numerical gate.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

use crate::error::Error;
use crate::experts::{Paging, SamplerKind};
use crate::iunet::{micro_model_gradcheck, Denoiser};
use crate::numerics::container::{load_tensor, save_tensor};
use crate::numerics::gradcheck::op_suite;
use crate::numerics::Tensor;
use crate::pipeline::checkpoint::{expert_dir, load_denoiser, read_manifest, MANIFEST};
use crate::pipeline::pgm::{plane_to_greymap_stretched, write_pgm};
use crate::pipeline::train::{RunManifest, RUN_MANIFEST};
use crate::pipeline::{evaluate, sample_run, train_all, write_samples, Dataset};
use crate::spectral::{
    feature_spectrum_report, input_log_amplitude_maps, input_rows, input_spectrum_report, write_profile_csv,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Per-op and whole-model finite-difference thresholds.
pub const OP_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;

const RUN_CONFIG: &str = "config.json";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

/// Exit code for an engine error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingExpert { .. } | Error::Io { .. } => EXIT_MISSING,
        Error::NumericalAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "meme",
    version,
    about = "Multi-architecture multi-expert diffusion at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train all experts of a run, or selected ones.
    Train(TrainArgs),
    /// Generate images from a trained run.
    Sample(SampleArgs),
    /// Spectral analyses, gradient checks and run reports.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Write the configured dataset as PGM files plus a MEMT dump.
    GenData(GenDataArgs),
    /// Compare generated samples with the configured reference dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Train only these experts (1-based; repeatable).
    #[arg(long)]
    pub expert: Vec<usize>,
    /// Overwrite existing checkpoints.
    #[arg(long)]
    pub force: bool,
    /// Continue existing checkpoints up to the configured iteration count.
    #[arg(long)]
    pub resume: bool,
    /// One thread per expert.
    #[arg(long)]
    pub concurrent: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplerArg {
    Ddpm,
    Ddim,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ddpm => SamplerKind::Ddpm,
            SamplerArg::Ddim => SamplerKind::Ddim,
        }
    }
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory for PGM files and `samples.memt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Configuration (defaults to the copy stored in the run directory).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectories evaluated together.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Experts held in memory at once; fewer than N pages experts one at a
    /// time and spools intermediate x_t to disk.
    #[arg(long)]
    pub resident_experts: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct SpectrumArgs {
    /// Comma-separated time-steps (defaults to the configured list).
    #[arg(long, value_delimiter = ',')]
    pub t: Option<Vec<usize>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeKind {
    /// Δ log-amplitude profiles of forward-noised data.
    InputSpectrum {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: SpectrumArgs,
        /// Also write centered log-amplitude maps as PGM files here.
        #[arg(long)]
        pgm_dir: Option<PathBuf>,
    },
    /// Δ log-amplitude profiles of each model's feature taps.
    FeatureSpectrum {
        /// Comma-separated models: expert indices of `--run`, or checkpoint directories.
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Dataset source (defaults to the run's configuration).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: SpectrumArgs,
    },
    /// Finite-difference suite over every op and a micro iU-Net.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summary of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `samples.memt` or a directory containing it.
    #[arg(long)]
    pub samples: PathBuf,
    /// Configuration providing the reference dataset.
    #[arg(long)]
    pub config: PathBuf,
    /// Metrics JSON output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn guard_file(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(CliError::usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| CliError::usage(e.to_string()))
}

fn config_dir(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn load_dataset(cfg: &RunConfig, config_path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::from_spec(&cfg.dataset, config_dir(config_path))?)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let mcfg = cfg.multi_expert()?;
    let which: Vec<usize> = if a.expert.is_empty() {
        (1..=mcfg.num_experts()).collect()
    } else {
        a.expert.clone()
    };
    for &n in &which {
        mcfg.expert(n).map_err(|e| CliError::usage(e.to_string()))?;
        let m = expert_dir(&a.out, n).join(MANIFEST);
        if m.exists() && !a.force && !a.resume {
            return Err(CliError::usage(format!(
                "{} exists; pass --force to overwrite or --resume to continue",
                m.display()
            )));
        }
    }
    let stored = a.out.join(RUN_CONFIG);
    if stored.exists() {
        let previous = load_config(&stored)?;
        if previous != cfg && !a.force {
            return Err(CliError::usage(format!(
                "{} holds a different configuration; pass --force to replace it",
                stored.display()
            )));
        }
    }
    let data = load_dataset(&cfg, &a.config)?;
    write_text(&stored, &cfg.to_json()?)?;
    let outcome = train_all(&mcfg, &data, Some(&a.out), &which, a.concurrent, a.resume)?;
    for e in &outcome.manifest.experts {
        println!(
            "expert {}: {} steps, loss EMA {:.4}, {:.1}s",
            e.n,
            e.iterations,
            e.final_loss_ema.unwrap_or(f64::NAN),
            e.wall_clock_secs
        );
    }
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> CliResult {
    let config_path = a.config.clone().unwrap_or_else(|| a.run.join(RUN_CONFIG));
    if !config_path.exists() {
        return Err(CliError {
            code: EXIT_MISSING,
            message: format!("{} not found (not a run directory?)", config_path.display()),
        });
    }
    let cfg = load_config(&config_path)?;
    let mcfg = cfg.multi_expert()?;
    let mut opts = cfg.sample_options(cfg.image_shape());
    if let Some(s) = a.sampler {
        opts.sampler = s.into();
    }
    if let Some(v) = a.steps {
        opts.steps = v;
    }
    if let Some(v) = a.eta {
        opts.eta = v;
    }
    if let Some(v) = a.count {
        opts.count = v;
    }
    if let Some(v) = a.seed {
        opts.seed = v;
    }
    if a.chunk.is_some() {
        opts.chunk = a.chunk;
    }
    guard_file(&a.out.join("samples.memt"), a.force)?;
    let paging = match a.resident_experts {
        Some(0) => return Err(CliError::usage("--resident-experts must be at least 1")),
        Some(k) if k < mcfg.num_experts() => Paging::Sequential {
            spool_dir: a.out.join(".spool"),
        },
        _ => Paging::Resident,
    };
    let batch = sample_run(&a.run, &mcfg, &opts, &paging)?;
    if let Paging::Sequential { spool_dir } = &paging {
        let _ = fs::remove_dir(spool_dir);
    }
    let files = write_samples(&a.out, &batch)?;
    println!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn write_csv(path: &Path, rows: &[crate::spectral::FeatureRow]) -> CliResult {
    let mut buf = Vec::new();
    write_profile_csv(&mut buf, rows).expect("in-memory write");
    write_text(path, std::str::from_utf8(&buf).expect("ascii csv"))
}

fn cmd_input_spectrum(config: &Path, c: &SpectrumArgs, pgm_dir: Option<&Path>) -> CliResult {
    let cfg = load_config(config)?;
    guard_file(&c.out, c.force)?;
    let data = load_dataset(&cfg, config)?;
    let s = cfg.schedule.build()?;
    let t_list = c.t.clone().unwrap_or_else(|| cfg.analysis.t_list.clone());
    let samples = c.samples.unwrap_or(cfg.analysis.samples);
    let seed = c.seed.unwrap_or(cfg.analysis.seed);
    let report = input_spectrum_report(data.images(), &s, &t_list, samples, seed)?;
    write_csv(&c.out, &input_rows(&report))?;
    if let Some(dir) = pgm_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, map) in input_log_amplitude_maps(data.images(), &s, &t_list, samples, seed)? {
            let (h, w) = (map.shape()[0], map.shape()[1]);
            write_pgm(
                &dir.join(format!("logamp_t{t}.pgm")),
                &plane_to_greymap_stretched(map.data(), h, w),
            )?;
        }
    }
    println!("wrote {} profiles to {}", report.len(), c.out.display());
    Ok(())
}

fn resolve_model(item: &str, run: Option<&Path>) -> CliResult<PathBuf> {
    match (item.parse::<usize>(), run) {
        (Ok(n), Some(r)) => Ok(expert_dir(r, n)),
        (Ok(_), None) => Err(CliError::usage(format!(
            "model `{item}` is an expert index but no --run was given"
        ))),
        (Err(_), _) => Ok(PathBuf::from(item)),
    }
}

fn cmd_feature_spectrum(models: &[String], run: Option<&Path>, config: Option<&Path>, c: &SpectrumArgs) -> CliResult {
    let config_path = match (config, run) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.join(RUN_CONFIG),
        (None, None) => return Err(CliError::usage("feature-spectrum needs --config or --run")),
    };
    let cfg = load_config(&config_path)?;
    guard_file(&c.out, c.force)?;
    let data = load_dataset(&cfg, &config_path)?;
    let mut loaded: Vec<(String, Denoiser)> = Vec::new();
    for item in models {
        let dir = resolve_model(item, run)?;
        if !dir.join(MANIFEST).is_file() {
            return Err(CliError {
                code: EXIT_MISSING,
                message: format!("model `{item}`: no checkpoint at {}", dir.display()),
            });
        }
        loaded.push((item.clone(), load_denoiser(&dir)?.0));
    }
    let refs: Vec<(&str, &Denoiser)> = loaded.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let t_list = c.t.clone().unwrap_or_else(|| cfg.analysis.t_list.clone());
    let samples = c.samples.unwrap_or(cfg.analysis.samples);
    let seed = c.seed.unwrap_or(cfg.analysis.seed);
    let rows = feature_spectrum_report(&refs, &t_list, data.images(), samples, seed)?;
    write_csv(&c.out, &rows)?;
    println!("wrote {} profiles to {}", rows.len(), c.out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> CliResult {
    let mut ok = true;
    for c in op_suite(seed)? {
        let pass = c.max_rel_err < OP_TOLERANCE;
        ok &= pass;
        println!(
            "{:<22} {:.3e}  {}",
            c.op,
            c.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let e = micro_model_gradcheck(seed)?;
    let pass = e < MODEL_TOLERANCE;
    ok &= pass;
    println!("{:<22} {:.3e}  {}", "micro_iunet", e, if pass { "ok" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: "gradient check failed".into(),
        })
    }
}

fn cmd_report(run: &Path, csv: Option<&Path>) -> CliResult {
    let path = run.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(Error::from)?;
    let mut table = String::from("expert,interval_lo,interval_hi,p,iterations,loss_ema,parameters,wall_clock_secs\n");
    println!(
        "run {}: {} experts, T = {}",
        run.display(),
        manifest.num_experts,
        manifest.steps
    );
    println!(
        "{:>6} {:>12} {:>6} {:>10} {:>10} {:>10} {:>9}",
        "expert", "interval", "p", "steps", "loss_ema", "params", "secs"
    );
    for e in &manifest.experts {
        let m = read_manifest(&expert_dir(run, e.n))?;
        let iv = m.interval.map(|i| (i.lo, i.hi)).unwrap_or((0, 0));
        let params: usize = m.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let ema = m.loss_ema.unwrap_or(f64::NAN);
        let p = m.p.unwrap_or(f64::NAN);
        println!(
            "{:>6} {:>12} {:>6.3} {:>10} {:>10.4} {:>10} {:>9.1}",
            e.n,
            format!("[{}, {})", iv.0, iv.1),
            p,
            m.iterations,
            ema,
            params,
            e.wall_clock_secs
        );
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.n, iv.0, iv.1, p, m.iterations, ema, params, e.wall_clock_secs
        ));
    }
    for (n, msg) in &manifest.failures {
        println!("expert {n} failed: {msg}");
    }
    if let Some(p) = csv {
        write_text(p, &table)?;
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let raw = a.out.join("dataset.memt");
    guard_file(&raw, a.force)?;
    let data = load_dataset(&cfg, &a.config)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let all: Vec<f32> = data.images().iter().flat_map(|x| x.data().iter().copied()).collect();
    let lo = all.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = all.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let shape = data.image_shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    for (i, img) in data.images().iter().enumerate() {
        for (c, plane) in img.data().chunks_exact(h * w).enumerate() {
            // shared range so relative brightness survives
            let mut with_range = plane.to_vec();
            with_range.extend([lo, hi]);
            let mut g = plane_to_greymap_stretched(&with_range, 1, h * w + 2);
            g.pixels.truncate(h * w);
            g.width = w;
            g.height = h;
            let name = if shape[0] == 1 {
                format!("img_{i:04}.pgm")
            } else {
                format!("img_{i:04}_c{c}.pgm")
            };
            write_pgm(&a.out.join(name), &g)?;
        }
    }
    save_tensor(&raw, &Tensor::stack(data.images())?)?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let path = if a.samples.is_dir() {
        a.samples.join("samples.memt")
    } else {
        a.samples.clone()
    };
    let batch = load_tensor(&path)?;
    if batch.rank() != 4 {
        return Err(CliError::usage(format!(
            "{}: expected [N, C, H, W] samples",
            path.display()
        )));
    }
    let generated: Vec<Tensor> = (0..batch.shape()[0]).map(|i| batch.batch_item(i)).collect();
    let data = load_dataset(&cfg, &a.config)?;
    let metrics = evaluate(&generated, data.images())?;
    let json = serde_json::to_string_pretty(&metrics).map_err(Error::from)? + "\n";
    match &a.out {
        Some(p) => {
            guard_file(p, a.force)?;
            write_text(p, &json)?;
        }
        None => print!("{json}"),
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Analyze { kind } => match kind {
            AnalyzeKind::InputSpectrum {
                config,
                common,
                pgm_dir,
            } => cmd_input_spectrum(config, common, pgm_dir.as_deref()),
            AnalyzeKind::FeatureSpectrum {
                models,
                run,
                config,
                common,
            } => cmd_feature_spectrum(models, run.as_deref(), config.as_deref(), common),
            AnalyzeKind::Gradcheck { seed } => cmd_gradcheck(*seed),
            AnalyzeKind::Report { run, csv } => cmd_report(run, csv.as_deref()),
        },
        Command::GenData(a) => cmd_gen_data(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests;
