//! Fourier analysis of images and feature maps, and power-law image synthesis.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iunet::Denoiser;
use crate::numerics::Tensor;
use crate::rng;
use crate::schedule::{forward_noise_batch, DiffusionSchedule};

/// Amplitudes are clamped to this before taking logs.
pub const AMP_FLOOR: f64 = 1e-12;

const TAG_EPS: u64 = 0xe95;
const FEATURE_CHUNK: usize = 16;

/// Δ log amplitude along the half-diagonal, DC to Nyquist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub freq: Vec<f64>,
    pub delta_log_amp: Vec<f64>,
}

impl SpectralProfile {
    pub fn new(freq: Vec<f64>, delta_log_amp: Vec<f64>) -> Result<Self> {
        if freq.len() != delta_log_amp.len() || freq.is_empty() {
            return Err(Error::Contract(format!(
                "profile with {} frequencies and {} values",
                freq.len(),
                delta_log_amp.len()
            )));
        }
        if freq.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("profile frequencies must increase".into()));
        }
        Ok(Self { freq, delta_log_amp })
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    /// Mean absolute pointwise difference to another profile on the same axis.
    pub fn mean_abs_diff(&self, other: &SpectralProfile) -> Result<f64> {
        if self.freq != other.freq {
            return Err(Error::Contract("profiles sampled on different axes".into()));
        }
        let n = self.len() as f64;
        Ok(self
            .delta_log_amp
            .iter()
            .zip(&other.delta_log_amp)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }
}

fn check_pow2(what: &'static str, h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::range(what, format!("{h}×{w}"), "power-of-two extents"));
    }
    Ok(())
}

/// Separable 2-D transform over a row-major `h × w` grid.
pub struct Fft2 {
    h: usize,
    w: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        check_pow2("fft extent", h, w)?;
        let mut p = FftPlanner::new();
        Ok(Self {
            h,
            w,
            rows: p.plan_fft_forward(w),
            cols: p.plan_fft_forward(h),
            inv_rows: p.plan_fft_inverse(w),
            inv_cols: p.plan_fft_inverse(h),
            scratch: vec![Complex64::default(); h],
        })
    }

    fn run(&mut self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (rows, cols) = if inverse {
            (&self.inv_rows, &self.inv_cols)
        } else {
            (&self.rows, &self.cols)
        };
        rows.process(buf);
        for x in 0..w {
            for y in 0..h {
                self.scratch[y] = buf[y * w + x];
            }
            cols.process(&mut self.scratch);
            for y in 0..h {
                buf[y * w + x] = self.scratch[y];
            }
        }
    }

    /// Unnormalized forward transform.
    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    /// Inverse transform including the `1/(h·w)` factor.
    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.run(buf, true);
        let k = 1.0 / (self.h * self.w) as f64;
        buf.iter_mut().for_each(|v| *v *= k);
    }

    /// `|X(f)|` with DC moved to `(h/2, w/2)`.
    pub fn centered_amplitude(&mut self, x: &[f32]) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        self.forward(&mut buf);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[((y + h / 2) % h) * w + (x + w / 2) % w] = buf[y * w + x].norm();
            }
        }
        out
    }
}

fn log_floor(a: f64) -> f64 {
    a.max(AMP_FLOOR).ln()
}

fn as_plane(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(
            "spectrum",
            format!("expected [H, W], got {:?}", x.shape()),
        )),
    }
}

/// Centered `log(max(|FFT2(x)|, 1e-12))`.
pub fn fft2_log_amplitude(x: &Tensor) -> Result<Tensor> {
    let (h, w) = as_plane(x)?;
    let amp = Fft2::new(h, w)?.centered_amplitude(x.data());
    Tensor::new(&[h, w], amp.into_iter().map(|a| log_floor(a) as f32).collect())
}

fn profile_of(map: &[f64], h: usize, w: usize) -> Result<SpectralProfile> {
    if h != w {
        return Err(Error::shape("half_diagonal_profile", format!("non-square {h}×{w}")));
    }
    let c = h / 2;
    let at = |k: usize| map[((c + k) % h) * w + (c + k) % w];
    let dc = at(0);
    let freq = (0..=c).map(|k| PI * k as f64 / c.max(1) as f64).collect();
    let delta = (0..=c).map(|k| at(k) - dc).collect();
    SpectralProfile::new(freq, delta)
}

/// Samples a centered log-amplitude map from DC to the corner (`H/2 + 1`
/// points) relative to the DC value.
pub fn half_diagonal_profile(logamp_centered: &Tensor) -> Result<SpectralProfile> {
    let (h, w) = as_plane(logamp_centered)?;
    let map: Vec<f64> = logamp_centered.data().iter().map(|&v| v as f64).collect();
    profile_of(&map, h, w)
}

/// Δ log amplitude at `f = π`.
pub fn delta_high_freq(profile: &SpectralProfile) -> f64 {
    *profile.delta_log_amp.last().expect("profiles are non-empty")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawSpec {
    pub amplitude_scale: f64,
    pub exponent: f64,
}

impl PowerLawSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale.is_finite()) {
            return Err(Error::range("amplitude scale", self.amplitude_scale, "> 0"));
        }
        if !(self.exponent > 0.0 && self.exponent <= 4.0) {
            return Err(Error::range("spectral exponent", self.exponent, "(0, 4]"));
        }
        Ok(())
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter_mut().for_each(|x| *x /= sd);
    }
}

/// Real image whose expected power spectrum is `A_s / ‖f‖^α`, normalized to
/// zero mean and unit variance (DC removed).
///
/// White Gaussian noise is shaped by the real, even filter `sqrt(A_s/‖f‖^α)`,
/// which is the same as drawing a Hermitian-symmetric complex Gaussian spectrum.
pub fn gen_powerlaw_image<R: Rng + ?Sized>(spec: &PowerLawSpec, h: usize, w: usize, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let mut fft = Fft2::new(h, w)?;
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft.forward(&mut buf);
    for y in 0..h {
        let fy = signed_freq(y, h);
        for x in 0..w {
            let fx = signed_freq(x, w);
            let r2 = fy * fy + fx * fx;
            let gain = if r2 == 0.0 {
                0.0
            } else {
                (spec.amplitude_scale / r2.powf(spec.exponent / 2.0)).sqrt()
            };
            buf[y * w + x] *= gain;
        }
    }
    fft.inverse(&mut buf);
    let mut v: Vec<f64> = buf.iter().map(|c| c.re).collect();
    normalize(&mut v);
    Tensor::new(&[h, w], v.into_iter().map(|x| x as f32).collect())
}

/// Least-squares slope of log radially-averaged power against log radius,
/// over integer radii `1..=min(H, W)/2`, for the mean power of `images`.
pub fn radial_power_slope(images: &[Tensor]) -> Result<f64> {
    let first = images.first().ok_or_else(|| Error::Contract("no images".into()))?;
    let (h, w) = as_plane(first)?;
    let mut fft = Fft2::new(h, w)?;
    let mut power = vec![0.0; h * w];
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("radial_power_slope", "images differ in shape"));
        }
        let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
        fft.forward(&mut buf);
        power.iter_mut().zip(&buf).for_each(|(p, c)| *p += c.norm_sqr());
    }
    let rmax = h.min(w) / 2;
    let mut sums = vec![(0.0, 0usize); rmax + 1];
    for y in 0..h {
        for x in 0..w {
            let r = (signed_freq(y, h).hypot(signed_freq(x, w))).round() as usize;
            if (1..=rmax).contains(&r) {
                sums[r].0 += power[y * w + x];
                sums[r].1 += 1;
            }
        }
    }
    let pts: Vec<(f64, f64)> = (1..=rmax)
        .filter(|&r| sums[r].1 > 0)
        .map(|r| ((r as f64).ln(), (sums[r].0 / sums[r].1 as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Running mean of centered per-plane spectra.
struct SpectrumAccumulator {
    h: usize,
    w: usize,
    fft: Fft2,
    sum: Vec<f64>,
    count: usize,
    log_first: bool,
}

impl SpectrumAccumulator {
    /// `log_first` averages log amplitudes; otherwise amplitudes are averaged
    /// and the log is taken at the end.
    fn new(h: usize, w: usize, log_first: bool) -> Result<Self> {
        Ok(Self {
            h,
            w,
            fft: Fft2::new(h, w)?,
            sum: vec![0.0; h * w],
            count: 0,
            log_first,
        })
    }

    /// Adds every `[H, W]` plane of an `[N, C, H, W]` or `[C, H, W]` tensor.
    fn add_planes(&mut self, x: &Tensor) -> Result<()> {
        let plane = self.h * self.w;
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] != self.h || s[s.len() - 1] != self.w {
            return Err(Error::shape(
                "spectrum",
                format!("{s:?} vs planes {}×{}", self.h, self.w),
            ));
        }
        for p in x.data().chunks_exact(plane) {
            let amp = self.fft.centered_amplitude(p);
            for (acc, a) in self.sum.iter_mut().zip(amp) {
                *acc += if self.log_first { log_floor(a) } else { a };
            }
            self.count += 1;
        }
        Ok(())
    }

    fn log_map(&self) -> Vec<f64> {
        let k = 1.0 / self.count.max(1) as f64;
        self.sum
            .iter()
            .map(|&s| if self.log_first { s * k } else { log_floor(s * k) })
            .collect()
    }

    fn profile(&self) -> Result<SpectralProfile> {
        profile_of(&self.log_map(), self.h, self.w)
    }
}

fn plane_dims(images: &[Tensor]) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| Error::Contract("empty dataset".into()))?;
    let s = first.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "spectrum",
            format!("expected [C, H, W] images, got {s:?}"),
        ));
    }
    Ok((s[1], s[2]))
}

/// Profile of the mean log-amplitude map over every channel of every image.
pub fn mean_profile(images: &[Tensor]) -> Result<SpectralProfile> {
    let (h, w) = plane_dims(images)?;
    let mut acc = SpectrumAccumulator::new(h, w, true)?;
    for img in images {
        acc.add_planes(img)?;
    }
    acc.profile()
}

/// Mean centered log-amplitude map over every channel of every image.
pub fn mean_log_amplitude(images: &[Tensor]) -> Result<Tensor> {
    let (h, w) = plane_dims(images)?;
    let mut acc = SpectrumAccumulator::new(h, w, true)?;
    for img in images {
        acc.add_planes(img)?;
    }
    Tensor::new(&[h, w], acc.log_map().into_iter().map(|v| v as f32).collect())
}

/// The ε used for sample `i` at step `t`; identical across models and reports
/// sharing a seed.
pub fn report_noise(seed: u64, t: usize, i: usize, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, &mut rng::stream(seed, &[TAG_EPS, t as u64, i as u64]))
}

fn noisy_batch(
    images: &[Tensor],
    s: &DiffusionSchedule,
    t: usize,
    range: std::ops::Range<usize>,
    seed: u64,
) -> Result<Tensor> {
    let shape = images[0].shape().to_vec();
    let x0: Vec<Tensor> = range.clone().map(|i| images[i % images.len()].clone()).collect();
    let eps: Vec<Tensor> = range.clone().map(|i| report_noise(seed, t, i, &shape)).collect();
    let ts = vec![t; range.len()];
    forward_noise_batch(&Tensor::stack(&x0)?, &ts, &Tensor::stack(&eps)?, s)
}

fn check_report_args(images: &[Tensor], s: &DiffusionSchedule, t_list: &[usize], samples: usize) -> Result<()> {
    plane_dims(images)?;
    if samples == 0 {
        return Err(Error::range("samples", 0, "≥ 1"));
    }
    t_list.iter().try_for_each(|&t| s.check_t(t))
}

fn input_accumulators(
    images: &[Tensor],
    s: &DiffusionSchedule,
    t_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<(usize, SpectrumAccumulator)>> {
    check_report_args(images, s, t_list, samples)?;
    let (h, w) = plane_dims(images)?;
    t_list
        .iter()
        .map(|&t| {
            let mut acc = SpectrumAccumulator::new(h, w, true)?;
            for start in (0..samples).step_by(FEATURE_CHUNK) {
                acc.add_planes(&noisy_batch(
                    images,
                    s,
                    t,
                    start..(start + FEATURE_CHUNK).min(samples),
                    seed,
                )?)?;
            }
            Ok((t, acc))
        })
        .collect()
}

/// For each `t`: profile of the mean log-amplitude map of
/// `forward_noise(x0, t, ε)` over `samples` draws (images cycled in order).
pub fn input_spectrum_report(
    images: &[Tensor],
    s: &DiffusionSchedule,
    t_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<(usize, SpectralProfile)>> {
    input_accumulators(images, s, t_list, samples, seed)?
        .into_iter()
        .map(|(t, acc)| Ok((t, acc.profile()?)))
        .collect()
}

/// The centered mean log-amplitude maps behind [`input_spectrum_report`].
pub fn input_log_amplitude_maps(
    images: &[Tensor],
    s: &DiffusionSchedule,
    t_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<(usize, Tensor)>> {
    input_accumulators(images, s, t_list, samples, seed)?
        .into_iter()
        .map(|(t, acc)| {
            let map = acc.log_map().into_iter().map(|v| v as f32).collect();
            Ok((t, Tensor::new(&[acc.h, acc.w], map)?))
        })
        .collect()
}

/// Profile of the noise draws alone (the `t → ∞` limit of the input report).
pub fn noise_profile(images: &[Tensor], t: usize, samples: usize, seed: u64) -> Result<SpectralProfile> {
    let (h, w) = plane_dims(images)?;
    let shape = images[0].shape().to_vec();
    let mut acc = SpectrumAccumulator::new(h, w, true)?;
    for i in 0..samples {
        acc.add_planes(&report_noise(seed, t, i, &shape))?;
    }
    acc.profile()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub model_id: String,
    pub layer_id: String,
    pub t: usize,
    pub profile: SpectralProfile,
}

/// Per-tap profiles of channel-averaged amplitude spectra of the denoisers'
/// feature maps on forward-noised inputs. Every model sees the same inputs.
pub fn feature_spectrum_report(
    models: &[(&str, &Denoiser)],
    t_list: &[usize],
    images: &[Tensor],
    samples: usize,
    seed: u64,
) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for &(model_id, model) in models {
        let s = model.schedule();
        check_report_args(images, s, t_list, samples)?;
        for &t in t_list {
            let mut accs: Vec<(String, SpectrumAccumulator)> = Vec::new();
            for start in (0..samples).step_by(FEATURE_CHUNK) {
                let x = noisy_batch(images, s, t, start..(start + FEATURE_CHUNK).min(samples), seed)?;
                let (_, taps) = model.denoise_with_taps(&x, t)?;
                if accs.is_empty() {
                    for tap in &taps {
                        let sh = tap.value.shape();
                        let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
                        accs.push((tap.layer_id.clone(), SpectrumAccumulator::new(h, w, false)?));
                    }
                }
                for ((_, acc), tap) in accs.iter_mut().zip(&taps) {
                    acc.add_planes(&tap.value)?;
                }
            }
            for (layer_id, acc) in accs {
                rows.push(FeatureRow {
                    model_id: model_id.to_string(),
                    layer_id,
                    t,
                    profile: acc.profile()?,
                });
            }
        }
    }
    Ok(rows)
}

/// `model_id,layer_id,t,freq,delta_log_amp`, one line per profile point.
pub fn write_profile_csv<W: Write>(out: &mut W, rows: &[FeatureRow]) -> std::io::Result<()> {
    writeln!(out, "model_id,layer_id,t,freq,delta_log_amp")?;
    for r in rows {
        for (f, d) in r.profile.freq.iter().zip(&r.profile.delta_log_amp) {
            writeln!(out, "{},{},{},{f:.6},{d:.6}", r.model_id, r.layer_id, r.t)?;
        }
    }
    Ok(())
}

/// Rows for an input report, tagged as model `input`, layer `x_t`.
pub fn input_rows(report: &[(usize, SpectralProfile)]) -> Vec<FeatureRow> {
    report
        .iter()
        .map(|(t, p)| FeatureRow {
            model_id: "input".into(),
            layer_id: "x_t".into(),
            t: *t,
            profile: p.clone(),
        })
        .collect()
}
