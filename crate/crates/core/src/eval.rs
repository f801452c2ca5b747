//! Reference metrics, temporal profiles, training-dynamics statistics and the
//! model evaluation loop.
//!
//! Warping error uses the analytic flow of the synthetic scenes rather than an
//! estimated flow, so absolute values are not comparable with numbers computed
//! on real footage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{gt_flow, hf_energy, warp_back, FlowField, VideoPair};
use crate::denoiser::{Codec, DenoiserParams};
use crate::dual::one_step_generate;
use crate::error::{shape_err, Error, Result};
use crate::flow::{cfg_velocity, sample, uniform_schedule, ConditionBundle, VelocityField};
use crate::rng::{normal_video, prng, Stream};
use crate::train::map_indexed;
use crate::video::{LatentVideo, Timestep};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Reporting scale of the warping error.
pub const WARP_SCALE: f64 = 1e3;

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`] for identical inputs.
pub fn psnr(a: &LatentVideo, b: &LatentVideo, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak {peak} must be positive")));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP))
}

/// Mean SSIM over all `window x window` patches of every frame and channel,
/// with uniform weights and data range 1.
pub fn ssim(a: &LatentVideo, b: &LatentVideo, window: usize) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let s = a.shape();
    let w = window.min(s.height).min(s.width);
    if w == 0 {
        return Err(Error::Domain("ssim window must be positive".into()));
    }
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..s.frames {
        for c in 0..s.channels {
            for y0 in 0..=s.height - w {
                for x0 in 0..=s.width - w {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y0 + w {
                        for x in x0..x0 + w {
                            let (p, q) = (a.at(f, y, x, c), b.at(f, y, x, c));
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference between frame `k` and frame `k + 1` warped back by
/// the flow, over valid pixels, times [`WARP_SCALE`].
pub fn warp_error_gt(video: &LatentVideo, flow: &FlowField) -> Result<f64> {
    let s = video.shape();
    if flow.pairs + 1 != s.frames || flow.height != s.height || flow.width != s.width {
        return Err(shape_err((s.frames - 1, s.height, s.width), (flow.pairs, flow.height, flow.width)));
    }
    let (mut acc, mut n) = (0.0, 0usize);
    for k in 0..flow.pairs {
        let warped = warp_back(video, flow, k);
        for y in 0..s.height {
            for x in 0..s.width {
                if !flow.is_valid(k, y, x) {
                    continue;
                }
                for c in 0..s.channels {
                    let d = warped[(y * s.width + x) * s.channels + c] - video.at(k, y, x, c);
                    acc += d * d;
                    n += 1;
                }
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { WARP_SCALE * acc / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Line {
    Row(usize),
    Column(usize),
}

/// A stacked pixel line: `rows = frames`, `cols = line length`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Profile {
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.cols + c) * self.channels + ch]
    }
}

pub fn temporal_profile(video: &LatentVideo, line: Line) -> Result<Profile> {
    let s = video.shape();
    let (len, ok) = match line {
        Line::Row(y) => (s.width, y < s.height),
        Line::Column(x) => (s.height, x < s.width),
    };
    if !ok {
        return Err(Error::Domain(format!("{line:?} is outside a {}x{} frame", s.height, s.width)));
    }
    let mut data = Vec::with_capacity(s.frames * len * s.channels);
    for f in 0..s.frames {
        for i in 0..len {
            for c in 0..s.channels {
                data.push(match line {
                    Line::Row(y) => video.at(f, y, i, c),
                    Line::Column(x) => video.at(f, i, x, c),
                });
            }
        }
    }
    Ok(Profile { rows: s.frames, cols: len, channels: s.channels, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStats {
    pub len: usize,
    pub mean: f64,
    pub variance: f64,
    pub median: f64,
    pub max_over_median: f64,
}

pub fn trace_stats(trace: &[f64]) -> Result<TraceStats> {
    if trace.is_empty() {
        return Err(Error::Domain("empty trace".into()));
    }
    let n = trace.len() as f64;
    let mean = trace.iter().sum::<f64>() / n;
    let variance = trace.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = trace.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    let max = sorted[m - 1];
    let max_over_median = if median > 0.0 { max / median } else { f64::INFINITY };
    Ok(TraceStats { len: trace.len(), mean, variance, median, max_over_median })
}

/// Gradient-norm statistics of two stage-2 runs (typically with and without
/// stage-1 initialization). Diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub a: TraceStats,
    pub b: TraceStats,
}

impl StabilityReport {
    /// `variance(b) / variance(a)`.
    pub fn variance_ratio(&self) -> f64 {
        self.b.variance / self.a.variance
    }
}

pub fn stability_diagnostic(trace_a: &[f64], trace_b: &[f64]) -> Result<StabilityReport> {
    Ok(StabilityReport { a: trace_stats(trace_a)?, b: trace_stats(trace_b)? })
}

/// How outputs are produced for evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Sampler<'a> {
    /// `ẑ0 = eps - v(eps, 1, cond)`.
    OneStep(&'a DenoiserParams),
    /// Euler integration on a uniform grid, optionally guided.
    MultiStep { params: &'a DenoiserParams, steps: usize, guidance: f64 },
    /// The upscaled LR input itself.
    Upscaled,
}

struct Guided<'a> {
    params: &'a DenoiserParams,
    w: f64,
}

impl VelocityField for Guided<'_> {
    fn velocity(&self, z: &LatentVideo, t: Timestep, cond: &ConditionBundle) -> Result<LatentVideo> {
        let vc = self.params.velocity(z, t, cond)?;
        if self.w == 0.0 {
            return Ok(vc);
        }
        let vu = self.params.velocity(z, t, &cond.to_null())?;
        cfg_velocity(&vc, &vu, self.w)
    }
}

/// Output of `sampler` for one item, decoded and clamped to `[0, 1]`.
pub fn restore(sampler: Sampler<'_>, pair: &VideoPair, codec: &dyn Codec, eps: LatentVideo) -> Result<LatentVideo> {
    let cond = pair.condition();
    let cond = ConditionBundle::new(codec.encode(&cond.lr_latent)?, cond.label);
    let z = match sampler {
        Sampler::Upscaled => return Ok(pair.lr_up.clone()),
        Sampler::OneStep(p) => one_step_generate(p, &eps, &cond)?,
        Sampler::MultiStep { params, steps, guidance } => {
            sample(&Guided { params, w: guidance }, &cond, &uniform_schedule(steps)?, eps)?
        }
    };
    Ok(codec.decode(&z)?.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scaled by [`WARP_SCALE`].
    pub warp: f64,
    /// `hf_energy(output) / hf_energy(hr)`.
    pub hf_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub seed: u64,
    pub items: Vec<ItemMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub warp: f64,
    pub hf_ratio: f64,
}

pub fn item_metrics(index: usize, output: &LatentVideo, pair: &VideoPair) -> Result<ItemMetrics> {
    let hf_hr = hf_energy(&pair.hr);
    Ok(ItemMetrics {
        index,
        psnr: psnr(output, &pair.hr, 1.0)?,
        ssim: ssim(output, &pair.hr, SSIM_WINDOW)?,
        warp: warp_error_gt(output, &gt_flow(&pair.scene))?,
        hf_ratio: if hf_hr > 0.0 { hf_energy(output) / hf_hr } else { 0.0 },
    })
}

pub fn aggregate(label: &str, seed: u64, items: Vec<ItemMetrics>) -> MetricsReport {
    let n = items.len().max(1) as f64;
    let mean = |f: fn(&ItemMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        label: label.into(),
        seed,
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        warp: mean(|m| m.warp),
        hf_ratio: mean(|m| m.hf_ratio),
        items,
    }
}

/// Evaluates `sampler` on `pairs` with per-item noise drawn from `(seed, index)`.
pub fn evaluate_model(
    label: &str,
    sampler: Sampler<'_>,
    pairs: &[VideoPair],
    codec: &dyn Codec,
    seed: u64,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let items = map_indexed(pairs.len(), |i| {
        let pair = &pairs[i];
        let mut rng = prng(seed, Stream::Eval, i as u64);
        let eps = normal_video(codec.latent_shape(pair.hr.shape()), &mut rng);
        let out = restore(sampler, pair, codec, eps)?;
        item_metrics(i, &out, pair)
    })?;
    Ok(aggregate(label, seed, items))
}
