//! Training images: synthetic power-law fields or a folder of greymaps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pgm::read_pgm;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::spectral::{gen_powerlaw_image, PowerLawSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Power-law fields, each shifted by a Gaussian brightness offset of
    /// standard deviation `dc_offset_std` before global normalization.
    SyntheticPowerlaw {
        count: usize,
        size: usize,
        channels: usize,
        exponent: f64,
        amplitude_scale: f64,
        dc_offset_std: f64,
        seed: u64,
    },
    ImageFolder {
        path: PathBuf,
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    SyntheticPowerlaw,
    ImageFolder(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Dataset {
    /// Wraps `[C, H, W]` images of one shape with power-of-two extents.
    pub fn new(images: Vec<Tensor>, provenance: Provenance, seed: u64) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Contract("empty dataset".into()))?;
        let shape = first.shape().to_vec();
        match shape[..] {
            [_, h, w] if h.is_power_of_two() && w.is_power_of_two() => {}
            _ => {
                return Err(Error::shape(
                    "dataset",
                    format!("images must be [C, H, W] with power-of-two extents, got {shape:?}"),
                ))
            }
        }
        if let Some(bad) = images.iter().position(|x| x.shape() != shape.as_slice()) {
            return Err(Error::shape("dataset", format!("image {bad} differs from {shape:?}")));
        }
        Ok(Self {
            images,
            provenance,
            seed,
        })
    }

    pub fn from_spec(spec: &DatasetSpec, base_dir: &Path) -> Result<Self> {
        match spec {
            DatasetSpec::SyntheticPowerlaw {
                count,
                size,
                channels,
                exponent,
                amplitude_scale,
                dc_offset_std,
                seed,
            } => synthetic_powerlaw(
                &PowerLawSpec {
                    amplitude_scale: *amplitude_scale,
                    exponent: *exponent,
                },
                *count,
                *size,
                *channels,
                *dc_offset_std,
                *seed,
            ),
            DatasetSpec::ImageFolder { path, size } => {
                let p = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                load_image_folder(&p, *size)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    /// Stacks the selected images into `[N, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::range("image index", i, format!("[0, {})", self.len())))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }
}

/// Shifts and scales every value so the whole collection has zero mean and
/// unit variance.
pub fn normalize_global(images: &mut [Tensor]) {
    let n: usize = images.iter().map(|x| x.numel()).sum();
    let mean = images.iter().flat_map(|x| x.data()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(|x| x.data())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    for x in images {
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
    }
}

pub fn synthetic_powerlaw(
    spec: &PowerLawSpec,
    count: usize,
    size: usize,
    channels: usize,
    dc_offset_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 || channels == 0 {
        return Err(Error::Config(
            "synthetic dataset needs count ≥ 1 and channels ≥ 1".into(),
        ));
    }
    if !(dc_offset_std >= 0.0 && dc_offset_std.is_finite()) {
        return Err(Error::range("dc_offset_std", dc_offset_std, "≥ 0"));
    }
    let mut images = (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            let planes: Vec<Tensor> = (0..channels)
                .map(|_| {
                    let img = gen_powerlaw_image(spec, size, size, &mut r)?;
                    let c = (dc_offset_std * r.sample::<f64, _>(StandardNormal)) as f32;
                    Ok(img.map(|v| v + c))
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&planes)
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_global(&mut images);
    Dataset::new(images, Provenance::SyntheticPowerlaw, seed)
}

fn center_crop_box_downsample(pixels: &[f64], w: usize, h: usize, size: usize) -> Option<Vec<f64>> {
    let side = w.min(h);
    let factor = side / size;
    if factor == 0 {
        return None;
    }
    let crop = factor * size;
    let (x0, y0) = ((w - crop) / 2, (h - crop) / 2);
    let k = (factor * factor) as f64;
    let mut out = vec![0.0; size * size];
    for (i, o) in out.iter_mut().enumerate() {
        let (oy, ox) = (i / size, i % size);
        let mut acc = 0.0;
        for dy in 0..factor {
            let row = (y0 + oy * factor + dy) * w;
            for dx in 0..factor {
                acc += pixels[row + x0 + ox * factor + dx];
            }
        }
        *o = acc / k;
    }
    Some(out)
}

/// Every `*.pgm` in `dir`, ordered by file name, center-cropped to a square,
/// box-downsampled to `size × size` and normalized globally.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<Dataset> {
    if !size.is_power_of_two() {
        return Err(Error::range("image size", size, "a power of two"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no .pgm files".into(),
        });
    }
    let mut images = files
        .iter()
        .map(|path| {
            let g = read_pgm(path)?;
            let scale = g.max_value as f64;
            let px: Vec<f64> = g.pixels.iter().map(|&p| p as f64 / scale).collect();
            let out = center_crop_box_downsample(&px, g.width, g.height, size).ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("{}×{} is smaller than {size}×{size}", g.width, g.height),
            })?;
            Tensor::new(&[1, size, size], out.into_iter().map(|v| v as f32).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_global(&mut images);
    Dataset::new(images, Provenance::ImageFolder(dir.to_path_buf()), 0)
}
