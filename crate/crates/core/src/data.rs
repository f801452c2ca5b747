//! Deterministic synthetic videos: textured sprites translating over a static
//! textured background, an analytic optical-flow field with occlusion mask, and
//! a blur → downsample → noise → upsample degradation chain that produces the
//! LR conditioning video at HR resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{CondLabel, ConditionBundle};
use crate::rng::{derive_seed, normal, prng, uniform, Prng, Stream};
use crate::video::{LatentVideo, Shape};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SpriteShape {
    Rect,
    Disk,
}

/// Sinusoidal texture: `0.5 + sum_k amp_k * sin(fy_k y + fx_k x + phase_k,c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub waves: Vec<[f64; 6]>,
}

impl Texture {
    /// Random texture with wave periods in `[min_period, max_period]` pixels.
    pub fn random(seed: u64, waves: usize, min_period: f64, max_period: f64, amplitude: f64) -> Self {
        let mut rng = prng(seed, Stream::Scene, 0x7E7);
        let waves = (0..waves)
            .map(|_| {
                let period = uniform(&mut rng, min_period, max_period);
                let angle = uniform(&mut rng, 0.0, core::f64::consts::PI);
                let k = 2.0 * core::f64::consts::PI / period;
                [
                    k * libm::sin(angle),
                    k * libm::cos(angle),
                    uniform(&mut rng, 0.0, 6.3),
                    uniform(&mut rng, 0.0, 6.3),
                    uniform(&mut rng, 0.0, 6.3),
                    amplitude * uniform(&mut rng, 0.5, 1.0),
                ]
            })
            .collect();
        Self { waves }
    }

    pub fn sample(&self, y: f64, x: f64, c: usize) -> f64 {
        let mut v = 0.5;
        for w in &self.waves {
            v += w[5] * libm::sin(w[0] * y + w[1] * x + w[2 + (c % 3)]);
        }
        v.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Sprite {
    pub shape: SpriteShape,
    pub texture_seed: u64,
    /// Edge length (rect) or diameter (disk) in pixels.
    pub size: usize,
    /// Top-left corner at frame 0, `(x, y)`.
    pub start: (i64, i64),
    /// Pixels per frame, `(dx, dy)`.
    pub velocity: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub sprites: Vec<Sprite>,
    pub background_seed: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SceneRanges {
    pub sprites: (usize, usize),
    pub size: (usize, usize),
    pub max_speed: i64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self { sprites: (1, 3), size: (6, 12), max_speed: 2 }
    }
}

impl SceneRanges {
    pub fn validate(&self, shape: Shape) -> Result<()> {
        if self.sprites.0 > self.sprites.1 || self.size.0 == 0 || self.size.0 > self.size.1 || self.max_speed < 0 {
            return Err(Error::InvalidConfig(format!("scene ranges {self:?} are empty or negative")));
        }
        if self.size.0 > shape.height.min(shape.width) {
            return Err(Error::InvalidConfig(format!(
                "smallest sprite size {} does not fit a {}x{} frame",
                self.size.0, shape.height, shape.width
            )));
        }
        Ok(())
    }
}

impl SceneSpec {
    /// Random scene for `seed`; sprite texture seeds are derived from the scene seed.
    pub fn random(seed: u64, shape: Shape, ranges: &SceneRanges) -> Self {
        let mut rng = prng(seed, Stream::Scene, 0);
        let count = rng.random_range(ranges.sprites.0..=ranges.sprites.1);
        let sprites = (0..count)
            .map(|i| {
                let size = rng.random_range(ranges.size.0..=ranges.size.1.min(shape.height).min(shape.width));
                let shape_kind = if rng.random::<bool>() { SpriteShape::Rect } else { SpriteShape::Disk };
                Sprite {
                    shape: shape_kind,
                    texture_seed: derive_seed(seed, Stream::Scene, 1 + i as u64),
                    size,
                    start: (
                        rng.random_range(0..=(shape.width - size) as i64),
                        rng.random_range(0..=(shape.height - size) as i64),
                    ),
                    velocity: (
                        rng.random_range(-ranges.max_speed..=ranges.max_speed),
                        rng.random_range(-ranges.max_speed..=ranges.max_speed),
                    ),
                }
            })
            .collect();
        Self {
            height: shape.height,
            width: shape.width,
            frames: shape.frames,
            channels: shape.channels,
            sprites,
            background_seed: derive_seed(seed, Stream::Scene, 0xB6),
            seed,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.frames, self.height, self.width, self.channels)
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("scene dimensions must be positive".into()));
        }
        for s in &self.sprites {
            if s.size == 0 || s.size > self.height || s.size > self.width {
                return Err(Error::InvalidConfig(format!(
                    "sprite of size {} does not fit a {}x{} canvas",
                    s.size, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Top-left corner of sprite `i` at frame `k`, clamped to the canvas.
    pub fn position(&self, i: usize, k: usize) -> (i64, i64) {
        let s = &self.sprites[i];
        let x = (s.start.0 + k as i64 * s.velocity.0).clamp(0, (self.width - s.size) as i64);
        let y = (s.start.1 + k as i64 * s.velocity.1).clamp(0, (self.height - s.size) as i64);
        (x, y)
    }

    fn covers(&self, i: usize, k: usize, y: usize, x: usize) -> Option<(f64, f64)> {
        let s = &self.sprites[i];
        let (px, py) = self.position(i, k);
        let (ly, lx) = (y as i64 - py, x as i64 - px);
        if ly < 0 || lx < 0 || ly >= s.size as i64 || lx >= s.size as i64 {
            return None;
        }
        if s.shape == SpriteShape::Disk {
            let r = s.size as f64 / 2.0;
            let (dy, dx) = (ly as f64 + 0.5 - r, lx as f64 + 0.5 - r);
            if dy * dy + dx * dx > r * r {
                return None;
            }
        }
        Some((ly as f64, lx as f64))
    }

    /// Index of the topmost object at a pixel: `0` background, `i + 1` sprite `i`.
    fn owner(&self, k: usize, y: usize, x: usize) -> (usize, Option<(f64, f64)>) {
        for i in (0..self.sprites.len()).rev() {
            if let Some(local) = self.covers(i, k, y, x) {
                return (i + 1, Some(local));
            }
        }
        (0, None)
    }
}

pub fn render_scene(spec: &SceneSpec) -> Result<LatentVideo> {
    spec.validate()?;
    let bg = Texture::random(spec.background_seed, 3, 8.0, 32.0, 0.12);
    let tex: Vec<Texture> = spec.sprites.iter().map(|s| Texture::random(s.texture_seed, 3, 2.5, 8.0, 0.22)).collect();
    let shape = spec.shape();
    let mut out = LatentVideo::zeros(shape);
    let data = out.as_mut_slice();
    for k in 0..spec.frames {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (own, local) = spec.owner(k, y, x);
                for c in 0..spec.channels {
                    data[shape.index(k, y, x, c)] = match local {
                        Some((ly, lx)) => tex[own - 1].sample(ly, lx, c),
                        None => bg.sample(y as f64, x as f64, c),
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Exact displacement of every pixel's content between consecutive frames,
/// with a mask of pixels whose content is visible in both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub pairs: usize,
    pub height: usize,
    pub width: usize,
    /// `(pairs, height, width, 2)` with components `(dx, dy)`.
    pub flow: Vec<f64>,
    /// `(pairs, height, width)`; `true` where the warp is valid.
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn at(&self, k: usize, y: usize, x: usize) -> (f64, f64) {
        let i = ((k * self.height + y) * self.width + x) * 2;
        (self.flow[i], self.flow[i + 1])
    }

    pub fn is_valid(&self, k: usize, y: usize, x: usize) -> bool {
        self.valid[(k * self.height + y) * self.width + x]
    }

    /// All-valid zero flow for a static video.
    pub fn zeros(pairs: usize, height: usize, width: usize) -> Self {
        Self { pairs, height, width, flow: vec![0.0; pairs * height * width * 2], valid: vec![true; pairs * height * width] }
    }
}

pub fn gt_flow(spec: &SceneSpec) -> FlowField {
    let pairs = spec.frames.saturating_sub(1);
    let (h, w) = (spec.height, spec.width);
    let mut field = FlowField::zeros(pairs, h, w);
    for k in 0..pairs {
        for y in 0..h {
            for x in 0..w {
                let (own, _) = spec.owner(k, y, x);
                let (dx, dy) = if own == 0 {
                    (0, 0)
                } else {
                    let a = spec.position(own - 1, k);
                    let b = spec.position(own - 1, k + 1);
                    (b.0 - a.0, b.1 - a.1)
                };
                let i = (k * h + y) * w + x;
                field.flow[2 * i] = dx as f64;
                field.flow[2 * i + 1] = dy as f64;
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                field.valid[i] = tx >= 0
                    && ty >= 0
                    && (tx as usize) < w
                    && (ty as usize) < h
                    && spec.owner(k + 1, ty as usize, tx as usize).0 == own;
            }
        }
    }
    field
}

/// Frame `k + 1` sampled at `p + flow_k(p)` (nearest pixel, edge-clamped).
pub fn warp_back(video: &LatentVideo, flow: &FlowField, k: usize) -> Vec<f64> {
    let s = video.shape();
    let mut out = Vec::with_capacity(s.height * s.width * s.channels);
    for y in 0..s.height {
        for x in 0..s.width {
            let (dx, dy) = flow.at(k, y, x);
            let tx = (libm::round(x as f64 + dx) as i64).clamp(0, s.width as i64 - 1) as usize;
            let ty = (libm::round(y as f64 + dy) as i64).clamp(0, s.height as i64 - 1) as usize;
            for c in 0..s.channels {
                out.push(video.at(k + 1, ty, tx, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Upsampler {
    Bicubic,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DegradationConfig {
    pub blur_sigma: (f64, f64),
    pub factor: usize,
    pub noise_sigma: (f64, f64),
    pub upsampler: Upsampler,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { blur_sigma: (0.4, 2.0), factor: 4, noise_sigma: (0.0, 0.08), upsampler: Upsampler::Bicubic }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let (b0, b1) = self.blur_sigma;
        let (n0, n1) = self.noise_sigma;
        if !(b0 >= 0.0 && b1 >= b0 && n0 >= 0.0 && n1 >= n0) {
            return Err(Error::InvalidConfig("sigma ranges must be non-negative and ordered".into()));
        }
        if self.factor < 2 {
            return Err(Error::InvalidConfig("downsample factor must be at least 2".into()));
        }
        Ok(())
    }

    /// Condition class in `0..4`: (strong blur) * 2 + (strong noise).
    pub fn class_of(&self, blur: f64, noise: f64) -> u32 {
        let strong_blur = blur > 0.5 * (self.blur_sigma.0 + self.blur_sigma.1);
        let strong_noise = noise > 0.5 * (self.noise_sigma.0 + self.noise_sigma.1);
        (strong_blur as u32) * 2 + strong_noise as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DegradationDraw {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub class: u32,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur of one `(h, w)` plane with edge clamping.
fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return plane.to_vec();
    }
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn area_down(plane: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (lh, lw) = (h / f, w / f);
    let mut out = vec![0.0; lh * lw];
    let norm = 1.0 / (f * f) as f64;
    for y in 0..lh {
        for x in 0..lw {
            let mut acc = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    acc += plane[(y * f + dy) * w + x * f + dx];
                }
            }
            out[y * lw + x] = acc * norm;
        }
    }
    out
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resampling taps (source indices and normalized weights) along one axis.
fn resample_taps(out_len: usize, in_len: usize, kind: Upsampler) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = libm::floor(src) as i64;
            let frac = src - base as f64;
            let mut taps: Vec<(usize, f64)> = match kind {
                Upsampler::Bicubic => (-1..=2)
                    .map(|j| ((base + j).clamp(0, in_len as i64 - 1) as usize, cubic(j as f64 - frac)))
                    .collect(),
                Upsampler::Bilinear => vec![
                    (base.clamp(0, in_len as i64 - 1) as usize, 1.0 - frac),
                    ((base + 1).clamp(0, in_len as i64 - 1) as usize, frac),
                ],
            };
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps
        })
        .collect()
}

fn upsample(plane: &[f64], lh: usize, lw: usize, h: usize, w: usize, kind: Upsampler) -> Vec<f64> {
    let ty = resample_taps(h, lh, kind);
    let tx = resample_taps(w, lw, kind);
    let mut tmp = vec![0.0; lh * w];
    for y in 0..lh {
        for (x, taps) in tx.iter().enumerate() {
            tmp[y * w + x] = taps.iter().map(|&(i, wt)| wt * plane[y * lw + i]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..w {
            out[y * w + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * w + x]).sum();
        }
    }
    out
}

fn planes(v: &LatentVideo) -> Vec<Vec<f64>> {
    let s = v.shape();
    let mut out = Vec::with_capacity(s.frames * s.channels);
    for f in 0..s.frames {
        for c in 0..s.channels {
            let mut p = Vec::with_capacity(s.height * s.width);
            for y in 0..s.height {
                for x in 0..s.width {
                    p.push(v.at(f, y, x, c));
                }
            }
            out.push(p);
        }
    }
    out
}

fn from_planes(s: Shape, planes: &[Vec<f64>]) -> LatentVideo {
    LatentVideo::from_fn(s, |f, y, x, c| planes[f * s.channels + c][y * s.width + x])
}

/// Plain upscale of an LR video (the classical baseline).
pub fn upscale(lr: &LatentVideo, factor: usize, kind: Upsampler) -> LatentVideo {
    let s = lr.shape();
    let big = Shape::new(s.frames, s.height * factor, s.width * factor, s.channels);
    let ups: Vec<Vec<f64>> = planes(lr).iter().map(|p| upsample(p, s.height, s.width, big.height, big.width, kind)).collect();
    from_planes(big, &ups).clamp(0.0, 1.0)
}

/// Blur, area-downsample, add noise, upsample back, clamp to `[0, 1]`.
pub fn degrade(hr: &LatentVideo, cfg: &DegradationConfig, seed: u64) -> Result<(LatentVideo, DegradationDraw)> {
    cfg.validate()?;
    let s = hr.shape();
    if s.height % cfg.factor != 0 || s.width % cfg.factor != 0 {
        return Err(Error::InvalidConfig(format!("factor {} must divide {}x{}", cfg.factor, s.height, s.width)));
    }
    let mut rng = prng(seed, Stream::Degrade, 0);
    let blur_sigma = uniform(&mut rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
    let noise_sigma = uniform(&mut rng, cfg.noise_sigma.0, cfg.noise_sigma.1);
    let noise_seed = derive_seed(seed, Stream::Degrade, 1);
    let mut noise_rng: Prng = prng(noise_seed, Stream::Degrade, 2);
    let kernel = gaussian_kernel(blur_sigma);
    let (lh, lw) = (s.height / cfg.factor, s.width / cfg.factor);
    let out: Vec<Vec<f64>> = planes(hr)
        .iter()
        .map(|p| {
            let b = blur_plane(p, s.height, s.width, &kernel);
            let mut d = area_down(&b, s.height, s.width, cfg.factor);
            if noise_sigma > 0.0 {
                d.iter_mut().for_each(|v| *v += noise_sigma * normal(&mut noise_rng));
            }
            upsample(&d, lh, lw, s.height, s.width, cfg.upsampler)
        })
        .collect();
    let draw = DegradationDraw { blur_sigma, noise_sigma, noise_seed, class: cfg.class_of(blur_sigma, noise_sigma) };
    Ok((from_planes(s, &out).clamp(0.0, 1.0), draw))
}

/// Mean squared 4-neighbour Laplacian over interior pixels of every frame/channel.
pub fn hf_energy(v: &LatentVideo) -> f64 {
    let s = v.shape();
    if s.height < 3 || s.width < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for f in 0..s.frames {
        for y in 1..s.height - 1 {
            for x in 1..s.width - 1 {
                for c in 0..s.channels {
                    let l = v.at(f, y - 1, x, c) + v.at(f, y + 1, x, c) + v.at(f, y, x - 1, c) + v.at(f, y, x + 1, c)
                        - 4.0 * v.at(f, y, x, c);
                    acc += l * l;
                    n += 1;
                }
            }
        }
    }
    acc / n as f64
}

/// Separable Gaussian blur of every frame/channel plane.
pub fn blur_video(v: &LatentVideo, sigma: f64) -> LatentVideo {
    let s = v.shape();
    let k = gaussian_kernel(sigma);
    let out: Vec<Vec<f64>> = planes(v).iter().map(|p| blur_plane(p, s.height, s.width, &k)).collect();
    from_planes(s, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPair {
    pub hr: LatentVideo,
    pub lr_up: LatentVideo,
    pub scene: SceneSpec,
    pub draw: DegradationDraw,
}

impl VideoPair {
    pub fn condition(&self) -> ConditionBundle {
        ConditionBundle::new(self.lr_up.clone(), CondLabel::Class(self.draw.class))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DatasetConfig {
    pub shape: Shape,
    pub scene: SceneRanges,
    pub degradation: DegradationConfig,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            shape: Shape::new(8, 32, 32, 3),
            scene: SceneRanges::default(),
            degradation: DegradationConfig::default(),
            val: 32,
            test: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<VideoPair>,
    pub val: usize,
    pub test: usize,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.items.len() - self.val - self.test
    }

    /// Index-based split: train first, then validation, then test.
    pub fn split_of(&self, i: usize) -> Split {
        let tr = self.train_len();
        if i < tr {
            Split::Train
        } else if i < tr + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn split(&self, which: Split) -> &[VideoPair] {
        let tr = self.train_len();
        match which {
            Split::Train => &self.items[..tr],
            Split::Val => &self.items[tr..tr + self.val],
            Split::Test => &self.items[tr + self.val..],
        }
    }

    pub fn train(&self) -> &[VideoPair] {
        self.split(Split::Train)
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.frames == 0 || s.height == 0 || s.width == 0 || s.channels == 0 {
            return Err(Error::InvalidConfig(format!("clip shape {s:?} has an empty axis")));
        }
        self.scene.validate(s)?;
        self.degradation.validate()
    }
}

pub fn make_item(i: usize, cfg: &DatasetConfig, seed: u64) -> Result<VideoPair> {
    let scene_seed = derive_seed(seed, Stream::Scene, i as u64);
    let scene = SceneSpec::random(scene_seed, cfg.shape, &cfg.scene);
    let hr = render_scene(&scene)?;
    let (lr_up, draw) = degrade(&hr, &cfg.degradation, derive_seed(seed, Stream::Degrade, i as u64))?;
    Ok(VideoPair { hr, lr_up, scene, draw })
}

pub fn make_dataset(n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    if cfg.val + cfg.test >= n {
        return Err(Error::InvalidConfig(format!("val {} + test {} leaves no training items of {n}", cfg.val, cfg.test)));
    }
    cfg.validate()?;
    let items = (0..n).map(|i| make_item(i, cfg, seed)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, val: cfg.val, test: cfg.test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Shape {
        Shape::new(4, 16, 16, 3)
    }

    fn one_sprite(velocity: (i64, i64), shape: SpriteShape) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 24,
            frames: 5,
            channels: 3,
            sprites: vec![Sprite { shape, texture_seed: 11, size: 8, start: (4, 6), velocity }],
            background_seed: 5,
            seed: 0,
        }
    }

    #[test]
    fn render_is_deterministic_and_bounded() {
        let spec = SceneSpec::random(3, small(), &SceneRanges::default());
        let a = render_scene(&spec).unwrap();
        let b = render_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn static_sprite_gives_identical_frames() {
        let v = render_scene(&one_sprite((0, 0), SpriteShape::Rect)).unwrap();
        for k in 1..5 {
            assert_eq!(v.frame(0), v.frame(k));
        }
    }

    #[test]
    fn oversized_sprite_is_rejected() {
        let mut spec = one_sprite((0, 0), SpriteShape::Rect);
        spec.sprites[0].size = 30;
        assert!(render_scene(&spec).is_err());
    }

    /// Brute-force cross-correlation peak between frame 0 and frame k over
    /// integer shifts; the sprite texture dominates the correlation.
    #[test]
    fn translating_sprite_shifts_by_velocity() {
        let spec = one_sprite((1, 0), SpriteShape::Rect);
        let v = render_scene(&spec).unwrap();
        let s = v.shape();
        let patch = |k: usize, ox: i64, oy: i64| -> f64 {
            // Correlate the sprite window of frame 0 against frame k shifted by (ox, oy).
            let (px, py) = spec.position(0, 0);
            let mut acc = 0.0;
            for y in 0..8i64 {
                for x in 0..8i64 {
                    let (yy, xx) = ((py + y + oy) as usize, (px + x + ox) as usize);
                    for c in 0..3 {
                        let a = v.at(0, (py + y) as usize, (px + x) as usize, c) - 0.5;
                        let b = v.at(k, yy.min(s.height - 1), xx.min(s.width - 1), c) - 0.5;
                        acc += a * b;
                    }
                }
            }
            acc
        };
        for k in 1..4 {
            let mut best = (i64::MIN, 0, f64::NEG_INFINITY);
            for ox in -3..=6 {
                for oy in -3..=3 {
                    let c = patch(k, ox, oy);
                    if c > best.2 {
                        best = (ox, oy, c);
                    }
                }
            }
            assert_eq!((best.0, best.1), (k as i64, 0), "frame {k}");
        }
    }

    #[test]
    fn flow_examples() {
        let f = gt_flow(&one_sprite((0, 0), SpriteShape::Disk));
        assert!(f.flow.iter().all(|&v| v == 0.0));
        let spec = one_sprite((2, 1), SpriteShape::Rect);
        let f = gt_flow(&spec);
        let (px, py) = spec.position(0, 0);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(f.at(0, (py + y) as usize, (px + x) as usize), (2.0, 1.0));
            }
        }
        assert_eq!(f.at(0, 0, 0), (0.0, 0.0));
    }

    #[test]
    fn warping_by_gt_flow_reproduces_previous_frame() {
        for seed in 0..10 {
            let spec = SceneSpec::random(seed, Shape::new(6, 24, 24, 3), &SceneRanges::default());
            let v = render_scene(&spec).unwrap();
            let f = gt_flow(&spec);
            let s = v.shape();
            let (mut acc, mut n) = (0.0, 0usize);
            for k in 0..s.frames - 1 {
                let w = warp_back(&v, &f, k);
                for y in 0..s.height {
                    for x in 0..s.width {
                        if f.is_valid(k, y, x) {
                            for c in 0..3 {
                                let d = w[(y * s.width + x) * 3 + c] - v.at(k, y, x, c);
                                acc += d * d;
                                n += 1;
                            }
                        }
                    }
                }
            }
            assert!(acc / (n as f64) < 1e-6, "scene {seed}");
        }
    }

    #[test]
    fn degradation_is_noop_on_constants() {
        let hr = LatentVideo::filled(small(), 0.37);
        let cfg = DegradationConfig { blur_sigma: (0.0, 0.0), noise_sigma: (0.0, 0.0), ..Default::default() };
        let (lr, draw) = degrade(&hr, &cfg, 1).unwrap();
        assert_eq!(draw.blur_sigma, 0.0);
        for (a, b) in lr.as_slice().iter().zip(hr.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degradation_is_deterministic_and_shape_preserving() {
        let spec = SceneSpec::random(4, small(), &SceneRanges::default());
        let hr = render_scene(&spec).unwrap();
        let cfg = DegradationConfig::default();
        let (a, da) = degrade(&hr, &cfg, 9).unwrap();
        let (b, db) = degrade(&hr, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(a.shape(), hr.shape());
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = DegradationConfig { factor: 3, ..Default::default() };
        assert!(degrade(&hr, &bad, 9).is_err());
        let bad = DegradationConfig { factor: 1, ..Default::default() };
        assert!(degrade(&hr, &bad, 9).is_err());
    }

    #[test]
    fn degradation_removes_high_frequencies() {
        let cfg = DegradationConfig::default();
        let shape = Shape::new(2, 32, 32, 3);
        let passed = (0..100u64)
            .filter(|&seed| {
                let hr = render_scene(&SceneSpec::random(seed, shape, &SceneRanges::default())).unwrap();
                let (lr, _) = degrade(&hr, &cfg, seed).unwrap();
                hf_energy(&lr) < hf_energy(&hr)
            })
            .count();
        assert!(passed >= 99, "{passed}/100");
    }

    #[test]
    fn dataset_contract() {
        let cfg = DatasetConfig { shape: Shape::new(2, 16, 16, 3), val: 2, test: 2, ..Default::default() };
        let a = make_dataset(10, &cfg, 5).unwrap();
        let b = make_dataset(10, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train().len() + a.split(Split::Val).len() + a.split(Split::Test).len(), 10);
        assert_eq!(a.split_of(9), Split::Test);
        let mut seeds = std::collections::BTreeSet::new();
        for item in &a.items {
            for s in &item.scene.sprites {
                assert!(seeds.insert(s.texture_seed));
            }
        }
        assert!(make_dataset(0, &cfg, 5).is_err());
        let tiny = DatasetConfig { shape: Shape::new(2, 4, 4, 1), val: 1, test: 1, ..Default::default() };
        assert!(matches!(make_dataset(5, &tiny, 0), Err(Error::InvalidConfig(_))));
        let fits = DatasetConfig { scene: SceneRanges { size: (2, 3), ..Default::default() }, ..tiny };
        make_dataset(5, &fits, 0).unwrap();
    }
}
