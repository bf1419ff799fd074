//! Generation from a checkpointed run, and sample output files.

use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{expert_dir, load_denoiser, MANIFEST};
use super::pgm::{plane_to_greymap, write_pgm};
use crate::error::{Error, Result};
use crate::experts::{multi_expert_generate, EpsPredictor, MultiExpertConfig, Paging, SampleOptions};
use crate::numerics::container::save_tensor;
use crate::numerics::Tensor;

/// Loads expert `n` of the run in `run_dir`, checking it belongs to `cfg`.
pub fn load_expert(run_dir: &Path, cfg: &MultiExpertConfig, n: usize) -> Result<crate::iunet::Denoiser> {
    let dir = expert_dir(run_dir, n);
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::MissingExpert {
            expert: n,
            reason: format!("no checkpoint at {}", dir.display()),
        });
    }
    let (model, manifest) = load_denoiser(&dir).map_err(|e| Error::MissingExpert {
        expert: n,
        reason: e.to_string(),
    })?;
    let spec = cfg.expert(n)?;
    if manifest.arch != spec.arch || manifest.schedule != cfg.schedule || manifest.interval != Some(spec.interval) {
        return Err(Error::Config(format!(
            "checkpoint {} does not match expert {n} of the configuration",
            dir.display()
        )));
    }
    Ok(model)
}

/// Multi-expert generation with experts read from `run_dir`.
pub fn sample_run(run_dir: &Path, cfg: &MultiExpertConfig, opts: &SampleOptions, paging: &Paging) -> Result<Tensor> {
    multi_expert_generate(
        cfg,
        |n| Ok(Box::new(load_expert(run_dir, cfg, n)?) as Box<dyn EpsPredictor>),
        opts,
        paging,
    )
}

/// Writes one 8-bit PGM per sample and channel plus a raw `samples.memt` dump.
pub fn write_samples(out_dir: &Path, batch: &Tensor) -> Result<Vec<PathBuf>> {
    let s = batch.shape();
    let (n, c, h, w) = match *s {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::shape(
                "write_samples",
                format!("expected [N, C, H, W], got {s:?}"),
            ))
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(n * c + 1);
    for (i, plane) in batch.data().chunks_exact(h * w).enumerate() {
        let (img, ch) = (i / c, i % c);
        let name = if c == 1 {
            format!("sample_{img:04}.pgm")
        } else {
            format!("sample_{img:04}_c{ch}.pgm")
        };
        let path = out_dir.join(name);
        write_pgm(&path, &plane_to_greymap(plane, h, w))?;
        written.push(path);
    }
    let raw = out_dir.join("samples.memt");
    save_tensor(&raw, batch)?;
    written.push(raw);
    Ok(written)
}
