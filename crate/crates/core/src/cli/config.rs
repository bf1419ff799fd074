//! The declarative run file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{default_probabilities, MultiExpertConfig, SampleOptions, SamplerKind, TrainingConfig};
use crate::fraction::Fraction;
use crate::iunet::{expert_arch_for, ExpertArchConfig};
use crate::pipeline::DatasetSpec;
use crate::schedule::{DiffusionSchedule, ScheduleDescriptor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertEntry {
    /// Expertization probability.
    pub p: f64,
    pub arch: ExpertArchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub t_list: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

/// Everything a run needs; the expert count is the length of `experts` and
/// intervals are the uniform partition of `[0, T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleDescriptor,
    pub experts: Vec<ExpertEntry>,
    pub training: TrainingConfig,
    pub dataset: DatasetSpec,
    pub sampler: SamplerSpec,
    pub analysis: AnalysisSpec,
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("field `{}`: {}", e.path(), e.inner()),
        })?;
        cfg.multi_expert().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn multi_expert(&self) -> Result<MultiExpertConfig> {
        let p: Vec<f64> = self.experts.iter().map(|e| e.p).collect();
        let archs = self.experts.iter().map(|e| e.arch.clone()).collect();
        MultiExpertConfig::new(self.schedule.clone(), &p, archs, self.training.clone())
    }

    pub fn sample_options(&self, image_shape: Vec<usize>) -> SampleOptions {
        SampleOptions {
            sampler: self.sampler.kind,
            steps: self.sampler.steps,
            eta: self.sampler.eta,
            count: self.sampler.count,
            seed: self.sampler.seed,
            image_shape,
            chunk: self.sampler.chunk,
        }
    }

    /// `[C, H, W]` of generated images.
    pub fn image_shape(&self) -> Vec<usize> {
        let c = self.experts.first().map_or(1, |e| e.arch.in_channels);
        match &self.dataset {
            DatasetSpec::SyntheticPowerlaw { size, channels, .. } => vec![*channels, *size, *size],
            DatasetSpec::ImageFolder { size, .. } => vec![c, *size, *size],
        }
    }

    /// Four experts on 32×32 power-law data: base width 16, multipliers
    /// [1, 2], split fractions from the expert table, p = [0.8, 0.4, 0.2, 0.1].
    pub fn desk() -> Self {
        let base = ExpertArchConfig::uniform(1, 16, &[1, 2], 64, Fraction::ONE);
        Self::with_experts(base, 4, 2000)
    }

    /// `n` experts of the table-interpolated family built on `base`.
    pub fn with_experts(base: ExpertArchConfig, n: usize, iterations: usize) -> Self {
        let schedule = DiffusionSchedule::default_linear().descriptor().clone();
        let experts = default_probabilities(n)
            .into_iter()
            .enumerate()
            .map(|(i, p)| ExpertEntry {
                p,
                arch: expert_arch_for(i + 1, n, &base).expect("valid base architecture"),
            })
            .collect();
        Self {
            schedule,
            experts,
            training: TrainingConfig::new(20240601, iterations),
            dataset: DatasetSpec::SyntheticPowerlaw {
                count: 512,
                size: 32,
                channels: 1,
                exponent: 2.0,
                amplitude_scale: 1.0,
                dc_offset_std: 0.25,
                seed: 7,
            },
            sampler: SamplerSpec {
                kind: SamplerKind::Ddim,
                steps: 50,
                eta: 0.0,
                count: 16,
                seed: 1234,
                chunk: None,
            },
            analysis: AnalysisSpec {
                t_list: vec![125, 375, 625, 875],
                samples: 200,
                seed: 99,
            },
        }
    }
}
