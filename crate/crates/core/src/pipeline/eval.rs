//! Sample-quality summaries against a reference set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::spectral::mean_profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub generated: usize,
    pub reference: usize,
    /// Mean over pixels of `|mean_gen − mean_ref|`.
    pub mean_gap: f64,
    /// Mean over pixels of `|std_gen − std_ref|`.
    pub std_gap: f64,
    /// Mean `|Δ log amp|` difference between the sets' average profiles.
    pub spectral_distance: f64,
    /// Mean L2 distance from each generated sample to its nearest other sample.
    pub diversity: f64,
}

fn pixel_stats(images: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let n = images.len() as f64;
    let len = images[0].numel();
    let mut mean = vec![0.0; len];
    for x in images {
        mean.iter_mut().zip(x.data()).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for x in images {
        var.iter_mut()
            .zip(x.data())
            .zip(&mean)
            .for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

fn mean_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean nearest-neighbour L2 distance; 0 for fewer than two samples.
pub fn diversity(images: &[Tensor]) -> f64 {
    if images.len() < 2 {
        return 0.0;
    }
    let dist = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let total: f64 = (0..images.len())
        .map(|i| {
            (0..images.len())
                .filter(|&j| j != i)
                .map(|j| dist(&images[i], &images[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / images.len() as f64
}

/// Compares generated `[C, H, W]` samples to reference images of the same shape.
pub fn evaluate(generated: &[Tensor], reference: &[Tensor]) -> Result<Metrics> {
    let (g0, r0) = match (generated.first(), reference.first()) {
        (Some(g), Some(r)) => (g, r),
        _ => {
            return Err(Error::Contract(
                "evaluation needs non-empty generated and reference sets".into(),
            ))
        }
    };
    if g0.shape() != r0.shape()
        || generated.iter().any(|x| x.shape() != g0.shape())
        || reference.iter().any(|x| x.shape() != r0.shape())
    {
        return Err(Error::shape(
            "evaluate",
            format!("generated {:?} vs reference {:?}", g0.shape(), r0.shape()),
        ));
    }
    let (gm, gs) = pixel_stats(generated);
    let (rm, rs) = pixel_stats(reference);
    let spectral_distance = mean_profile(generated)?.mean_abs_diff(&mean_profile(reference)?)?;
    Ok(Metrics {
        generated: generated.len(),
        reference: reference.len(),
        mean_gap: mean_abs_gap(&gm, &rm),
        std_gap: mean_abs_gap(&gs, &rs),
        spectral_distance,
        diversity: diversity(generated),
    })
}
