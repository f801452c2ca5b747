//! Velocity network shared by the teacher, student, real-score and fake-score
//! models: spatio-temporal patch tokens, full self-attention blocks with
//! adaptive layer-norm modulation from the timestep and condition embedding,
//! and feature taps after selected blocks.
//!
//! The noisy latent and the LR latent are concatenated along channels before
//! patch embedding, and both also reach the output through a modulated
//! per-token skip.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::flow::{CondLabel, ConditionBundle, VelocityField};
use crate::params::ParamSet;
use crate::rng::{prng, Stream};
use crate::tape::{Tape, Var};
use crate::video::{LatentVideo, Shape, Timestep};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    /// Latent channels `C`.
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Spatial patch edge.
    pub patch: usize,
    /// Frames per token.
    pub temporal_patch: usize,
    /// Condition-embedding dimension.
    pub cond_dim: usize,
    /// Number of learned condition classes (the null embedding is extra).
    pub num_classes: usize,
    pub time_dim: usize,
    /// 1-based block indices whose outputs are tapped.
    pub feature_taps: Vec<usize>,
}

/// Tap positions at depth fractions 0.3/0.6/0.9 (layers 9/18/27 of a 30-layer
/// backbone), rounded and deduplicated.
pub fn default_taps(depth: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = [0.3, 0.6, 0.9]
        .iter()
        .map(|f| (libm::round(f * depth as f64) as usize).clamp(1, depth.max(1)))
        .collect();
    taps.dedup();
    taps
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            depth: 6,
            width: 32,
            heads: 2,
            mlp_ratio: 2,
            patch: 4,
            temporal_patch: 2,
            cond_dim: 16,
            num_classes: 4,
            time_dim: 32,
            feature_taps: default_taps(6),
        }
    }
}

impl DenoiserConfig {
    /// Depth-2 / width-8 model used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 1,
            depth: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            patch: 2,
            temporal_patch: 1,
            cond_dim: 4,
            num_classes: 2,
            time_dim: 8,
            feature_taps: default_taps(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let positive = [
            ("channels", self.channels),
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch", self.patch),
            ("temporal_patch", self.temporal_patch),
            ("cond_dim", self.cond_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be a positive even number".into());
        }
        if self.feature_taps.is_empty() {
            return bad("at least one feature tap is required".into());
        }
        if self.feature_taps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("feature_taps must be strictly increasing".into());
        }
        if self.feature_taps.iter().any(|&k| k == 0 || k > self.depth) {
            return bad(format!("feature_taps must lie in [1, {}]", self.depth));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.temporal_patch * self.patch * self.patch * self.channels
    }

    /// Token grid `(frames, rows, cols)` for a latent of `shape`.
    pub fn token_grid(&self, shape: Shape) -> Result<(usize, usize, usize)> {
        if shape.channels != self.channels {
            return Err(shape_err(self.channels, shape.channels));
        }
        if shape.frames % self.temporal_patch != 0 || shape.height % self.patch != 0 || shape.width % self.patch != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("frames % {} == 0 and height, width % {} == 0", self.temporal_patch, self.patch),
                got: format!("{shape:?}"),
            });
        }
        Ok((shape.frames / self.temporal_patch, shape.height / self.patch, shape.width / self.patch))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ada_w: usize,
    ada_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    mlp1_w: usize,
    mlp1_b: usize,
    mlp2_w: usize,
    mlp2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    in_w: usize,
    in_b: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    cond_table: usize,
    cond_null: usize,
    cond_w: usize,
    cond_b: usize,
    blocks: Vec<BlockIdx>,
    out_ada_w: usize,
    out_ada_b: usize,
    out_w: usize,
    out_b: usize,
    skip_w: usize,
    skip_b: usize,
}

fn xavier(fan_in: usize) -> Init {
    Init::Normal(1.0 / libm::sqrt(fan_in as f64))
}

impl Layout {
    /// Walks the parameter list in storage order; `push` receives each array.
    fn build(c: &DenoiserConfig, mut push: impl FnMut(&str, usize, usize, Init) -> usize) -> Self {
        let w = c.width;
        let hidden = w * c.mlp_ratio;
        let pin = 2 * c.patch_dim();
        let in_w = push("in.w", pin, w, xavier(pin));
        let in_b = push("in.b", 1, w, Init::Zeros);
        let time_w1 = push("time.w1", c.time_dim, w, xavier(c.time_dim));
        let time_b1 = push("time.b1", 1, w, Init::Zeros);
        let time_w2 = push("time.w2", w, w, xavier(w));
        let time_b2 = push("time.b2", 1, w, Init::Zeros);
        let cond_table = push("cond.table", c.num_classes, c.cond_dim, Init::Normal(1.0));
        let cond_null = push("cond.null", 1, c.cond_dim, Init::Normal(1.0));
        let cond_w = push("cond.w", c.cond_dim, w, xavier(c.cond_dim));
        let cond_b = push("cond.b", 1, w, Init::Zeros);
        let blocks = (0..c.depth)
            .map(|i| {
                let n = |s: &str| format!("blk{i}.{s}");
                BlockIdx {
                    ada_w: push(&n("ada.w"), w, 6 * w, Init::Normal(0.1 / libm::sqrt(w as f64))),
                    ada_b: push(&n("ada.b"), 1, 6 * w, Init::Zeros),
                    qkv_w: push(&n("qkv.w"), w, 3 * w, xavier(w)),
                    qkv_b: push(&n("qkv.b"), 1, 3 * w, Init::Zeros),
                    proj_w: push(&n("proj.w"), w, w, xavier(w)),
                    proj_b: push(&n("proj.b"), 1, w, Init::Zeros),
                    mlp1_w: push(&n("mlp1.w"), w, hidden, xavier(w)),
                    mlp1_b: push(&n("mlp1.b"), 1, hidden, Init::Zeros),
                    mlp2_w: push(&n("mlp2.w"), hidden, w, xavier(hidden)),
                    mlp2_b: push(&n("mlp2.b"), 1, w, Init::Zeros),
                }
            })
            .collect();
        let out_ada_w = push("out.ada.w", w, 2 * w, Init::Normal(0.1 / libm::sqrt(w as f64)));
        let out_ada_b = push("out.ada.b", 1, 2 * w, Init::Zeros);
        let out_w = push("out.w", w, c.patch_dim(), Init::Normal(0.1 / libm::sqrt(w as f64)));
        let out_b = push("out.b", 1, c.patch_dim(), Init::Zeros);
        let skip_w = push("skip.w", w, 2 * c.patch_dim(), Init::Zeros);
        let skip_b = push("skip.b", 1, 2 * c.patch_dim(), Init::Zeros);
        Self {
            in_w,
            in_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            cond_table,
            cond_null,
            cond_w,
            cond_b,
            blocks,
            out_ada_w,
            out_ada_b,
            out_w,
            out_b,
            skip_w,
            skip_b,
        }
    }

    fn of(c: &DenoiserConfig) -> Self {
        let mut n = 0;
        Self::build(c, |_, _, _, _| {
            n += 1;
            n - 1
        })
    }
}

/// Parameters of one velocity model plus the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub set: ParamSet,
}

/// Tapped block outputs, one `tokens x channels` array per tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub grid: (usize, usize, usize),
    pub channels: usize,
    pub levels: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }
}

/// Output handles of one forward pass recorded on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Velocity, `1 x numel`, in video layout.
    pub velocity: Var,
    /// Block outputs at the configured taps, each `tokens x width`.
    pub taps: Vec<Var>,
    pub grid: (usize, usize, usize),
}

pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let mut rng = prng(seed, Stream::Init, 0);
    let mut set = ParamSet::new();
    Layout::build(config, |name, r, c, init| match init {
        Init::Normal(std) => set.push_normal(name, r, c, std, &mut rng),
        Init::Zeros => set.push_zeros(name, r, c),
    });
    Ok(DenoiserParams { config: config.clone(), set })
}

/// `out[token, within-patch] = video index` for the configured patching.
fn patch_index(c: &DenoiserConfig, shape: Shape) -> Vec<u32> {
    let (gt, gy, gx) = (shape.frames / c.temporal_patch, shape.height / c.patch, shape.width / c.patch);
    let mut idx = Vec::with_capacity(shape.numel());
    for ft in 0..gt {
        for by in 0..gy {
            for bx in 0..gx {
                for dt in 0..c.temporal_patch {
                    for dy in 0..c.patch {
                        for dx in 0..c.patch {
                            for ch in 0..shape.channels {
                                let i = shape.index(ft * c.temporal_patch + dt, by * c.patch + dy, bx * c.patch + dx, ch);
                                idx.push(i as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

fn inverse(perm: &[u32]) -> Vec<u32> {
    let mut inv = alloc::vec![0u32; perm.len()];
    for (pos, &src) in perm.iter().enumerate() {
        inv[src as usize] = pos as u32;
    }
    inv
}

fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        out.push(libm::cos(1000.0 * t * freq));
    }
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        out.push(libm::sin(1000.0 * t * freq));
    }
    out
}

fn position_table(grid: (usize, usize, usize), width: usize) -> Vec<f64> {
    let (gt, gy, gx) = grid;
    let per_axis = width.div_ceil(3);
    let mut out = Vec::with_capacity(gt * gy * gx * width);
    for a in 0..gt {
        for b in 0..gy {
            for c in 0..gx {
                for j in 0..width {
                    let pos = [a, b, c][j % 3] as f64;
                    let k = j / 3;
                    let freq = libm::pow(100.0, -((k / 2) as f64) * 2.0 / per_axis as f64);
                    out.push(if k % 2 == 0 { libm::sin(pos * freq) } else { libm::cos(pos * freq) });
                }
            }
        }
    }
    out
}

impl DenoiserParams {
    pub fn num_scalars(&self) -> usize {
        self.set.num_scalars()
    }

    /// Records a forward pass on `tape`. `vars` are this model's parameters as
    /// returned by [`ParamSet::load`]; `z_t` is a `1 x numel` video node.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z_t: Var, t: Timestep, cond: &ConditionBundle) -> Result<Forward> {
        let c = &self.config;
        let shape = cond.lr_latent.shape();
        let grid = c.token_grid(shape)?;
        if tape.shape(z_t) != (1, shape.numel()) {
            return Err(shape_err((1, shape.numel()), tape.shape(z_t)));
        }
        if vars.len() != self.set.len() {
            return Err(shape_err(self.set.len(), vars.len()));
        }
        if !tape.value(z_t).iter().all(|v| v.is_finite()) || !cond.lr_latent.is_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        let lay = Layout::of(c);
        let p = |i: usize| vars[i];
        let w = c.width;
        let tokens = grid.0 * grid.1 * grid.2;
        let pd = c.patch_dim();
        let hd = w / c.heads;

        let pidx = patch_index(c, shape);
        let xz = tape.gather(z_t, tokens, pd, pidx.clone());
        let lr = tape.constant(1, shape.numel(), cond.lr_latent.as_slice().to_vec());
        let xl = tape.gather(lr, tokens, pd, pidx.clone());
        let x = tape.concat_cols(&[xz, xl]);
        let h = tape.matmul(x, p(lay.in_w));
        let h = tape.add_row(h, p(lay.in_b));
        let pos = tape.constant(tokens, w, position_table(grid, w));
        let mut h = tape.add(h, pos);

        let tf = tape.constant(1, c.time_dim, timestep_features(t.get(), c.time_dim));
        let e = tape.matmul(tf, p(lay.time_w1));
        let e = tape.add_row(e, p(lay.time_b1));
        let e = tape.silu(e);
        let e = tape.matmul(e, p(lay.time_w2));
        let temb = tape.add_row(e, p(lay.time_b2));
        let label = match cond.label {
            CondLabel::Null => p(lay.cond_null),
            CondLabel::Class(k) => {
                if k as usize >= c.num_classes {
                    return Err(Error::Contract(format!("condition class {k} >= {}", c.num_classes)));
                }
                let start = k * c.cond_dim as u32;
                tape.gather(p(lay.cond_table), 1, c.cond_dim, (start..start + c.cond_dim as u32).collect())
            }
        };
        let ce = tape.matmul(label, p(lay.cond_w));
        let ce = tape.add_row(ce, p(lay.cond_b));
        let cvec = tape.add(temb, ce);
        let sc = tape.silu(cvec);

        let attn_scale = 1.0 / libm::sqrt(hd as f64);
        let mut taps = Vec::with_capacity(c.feature_taps.len());
        for (bi, b) in lay.blocks.iter().enumerate() {
            let m = tape.matmul(sc, p(b.ada_w));
            let m = tape.add_row(m, p(b.ada_b));
            let chunk: Vec<Var> = (0..6).map(|k| tape.slice_cols(m, k * w, w)).collect();
            let (shift1, scale1, gate1, shift2, scale2, gate2) = (chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5]);

            let a = tape.layer_norm(h);
            let a = tape.modulate(a, scale1, shift1);
            let qkv = tape.matmul(a, p(b.qkv_w));
            let qkv = tape.add_row(qkv, p(b.qkv_b));
            let mut outs = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let q = tape.slice_cols(qkv, head * hd, hd);
                let q = tape.scale(q, attn_scale);
                let k = tape.slice_cols(qkv, w + head * hd, hd);
                let v = tape.slice_cols(qkv, 2 * w + head * hd, hd);
                let s = tape.matmul_t(q, k);
                let s = tape.softmax_rows(s);
                outs.push(tape.matmul(s, v));
            }
            let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = tape.matmul(o, p(b.proj_w));
            let o = tape.add_row(o, p(b.proj_b));
            let o = tape.mul_row(o, gate1);
            h = tape.add(h, o);

            let a = tape.layer_norm(h);
            let a = tape.modulate(a, scale2, shift2);
            let f = tape.matmul(a, p(b.mlp1_w));
            let f = tape.add_row(f, p(b.mlp1_b));
            let f = tape.silu(f);
            let f = tape.matmul(f, p(b.mlp2_w));
            let f = tape.add_row(f, p(b.mlp2_b));
            let f = tape.mul_row(f, gate2);
            h = tape.add(h, f);

            if c.feature_taps.contains(&(bi + 1)) {
                taps.push(h);
            }
        }

        let m = tape.matmul(sc, p(lay.out_ada_w));
        let m = tape.add_row(m, p(lay.out_ada_b));
        let shift = tape.slice_cols(m, 0, w);
        let scale = tape.slice_cols(m, w, w);
        let a = tape.layer_norm(h);
        let a = tape.modulate(a, scale, shift);
        let o = tape.matmul(a, p(lay.out_w));
        let o = tape.add_row(o, p(lay.out_b));
        // Per-position gains on the noisy and LR inputs, set by the time and
        // condition embedding. The width bottleneck cannot carry the inputs
        // through to the output on its own.
        let g = tape.matmul(sc, p(lay.skip_w));
        let g = tape.add_row(g, p(lay.skip_b));
        let (gz, gl) = (tape.slice_cols(g, 0, pd), tape.slice_cols(g, pd, pd));
        let sz = tape.mul_row(xz, gz);
        let sl = tape.mul_row(xl, gl);
        let o = tape.add(o, sz);
        let o = tape.add(o, sl);
        let velocity = tape.gather(o, 1, shape.numel(), inverse(&pidx));
        Ok(Forward { velocity, taps, grid })
    }
}

pub(crate) fn video_node(tape: &mut Tape, v: &LatentVideo, track: bool) -> Var {
    let data = v.as_slice().to_vec();
    if track {
        tape.leaf(1, v.len(), data)
    } else {
        tape.constant(1, v.len(), data)
    }
}

fn check_pair(z_t: &LatentVideo, cond: &ConditionBundle) -> Result<()> {
    z_t.ensure_same_shape(&cond.lr_latent)
}

/// Velocity prediction `v(z_t, t, lr, c)`.
pub fn denoise(params: &DenoiserParams, z_t: &LatentVideo, t: Timestep, cond: &ConditionBundle) -> Result<LatentVideo> {
    check_pair(z_t, cond)?;
    let mut tape = Tape::new();
    let vars = params.set.load(&mut tape, false);
    let x = video_node(&mut tape, z_t, false);
    let out = params.forward(&mut tape, &vars, x, t, cond)?;
    let v = LatentVideo::from_raw(z_t.shape(), tape.value(out.velocity).to_vec());
    if !v.is_finite() {
        return Err(Error::NonFinite("denoise output".into()));
    }
    Ok(v)
}

pub fn denoise_with_features(
    params: &DenoiserParams,
    z_t: &LatentVideo,
    t: Timestep,
    cond: &ConditionBundle,
) -> Result<(LatentVideo, FeatureStack)> {
    check_pair(z_t, cond)?;
    let mut tape = Tape::new();
    let vars = params.set.load(&mut tape, false);
    let x = video_node(&mut tape, z_t, false);
    let out = params.forward(&mut tape, &vars, x, t, cond)?;
    let v = LatentVideo::from_raw(z_t.shape(), tape.value(out.velocity).to_vec());
    let levels = out.taps.iter().map(|&tap| tape.value(tap).to_vec()).collect();
    Ok((v, FeatureStack { grid: out.grid, channels: params.config.width, levels }))
}

impl VelocityField for DenoiserParams {
    fn velocity(&self, z_t: &LatentVideo, t: Timestep, cond: &ConditionBundle) -> Result<LatentVideo> {
        denoise(self, z_t, t, cond)
    }
}

/// Encoder/decoder pair standing in for a video VAE.
pub trait Codec: Send + Sync {
    fn latent_shape(&self, video: Shape) -> Shape;
    fn encode(&self, video: &LatentVideo) -> Result<LatentVideo>;
    fn decode(&self, latent: &LatentVideo) -> Result<LatentVideo>;
}

/// `encode(x) = x`, `decode(z) = z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn latent_shape(&self, video: Shape) -> Shape {
        video
    }

    fn encode(&self, video: &LatentVideo) -> Result<LatentVideo> {
        Ok(video.clone())
    }

    fn decode(&self, latent: &LatentVideo) -> Result<LatentVideo> {
        Ok(latent.clone())
    }
}

/// `encode(x) = scale * x + offset`. The pipeline default maps pixels in
/// `[0, 1]` to latents in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AffineCodec {
    pub scale: f64,
    pub offset: f64,
}

impl Default for AffineCodec {
    fn default() -> Self {
        Self { scale: 2.0, offset: -1.0 }
    }
}

impl Codec for AffineCodec {
    fn latent_shape(&self, video: Shape) -> Shape {
        video
    }

    fn encode(&self, video: &LatentVideo) -> Result<LatentVideo> {
        if self.scale == 0.0 {
            return Err(Error::InvalidConfig("codec scale must be non-zero".into()));
        }
        Ok(video.map(|x| self.scale * x + self.offset))
    }

    fn decode(&self, latent: &LatentVideo) -> Result<LatentVideo> {
        if self.scale == 0.0 {
            return Err(Error::InvalidConfig("codec scale must be non-zero".into()));
        }
        Ok(latent.map(|z| (z - self.offset) / self.scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_video;

    fn tiny_inputs(seed: u64) -> (LatentVideo, ConditionBundle) {
        let shape = Shape::new(2, 4, 4, 1);
        let mut rng = prng(seed, Stream::Eval, 0);
        let z = normal_video(shape, &mut rng);
        let lr = normal_video(shape, &mut rng);
        (z, ConditionBundle::new(lr, CondLabel::Class(1)))
    }

    #[test]
    fn default_taps_follow_depth_fractions() {
        assert_eq!(default_taps(30), alloc::vec![9, 18, 27]);
        assert_eq!(default_taps(6), alloc::vec![2, 4, 5]);
        assert_eq!(default_taps(2), alloc::vec![1, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::tiny();
        c.feature_taps = alloc::vec![2, 1];
        assert!(init_params(&c, 0).is_err());
        c.feature_taps = alloc::vec![3];
        assert!(init_params(&c, 0).is_err());
        c = DenoiserConfig::tiny();
        c.width = 7;
        assert!(matches!(init_params(&c, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = DenoiserConfig::tiny();
        let a = init_params(&c, 3).unwrap();
        let b = init_params(&c, 3).unwrap();
        let d = init_params(&c, 4).unwrap();
        assert!(a.set.bitwise_eq(&b.set));
        assert!(!a.set.bitwise_eq(&d.set));
        assert!(a.set.is_finite());
        assert!(a.set.position("cond.null").is_some());
    }

    #[test]
    fn forward_shape_determinism_and_conditioning() {
        let c = DenoiserConfig::tiny();
        let p = init_params(&c, 1).unwrap();
        let (z, cond) = tiny_inputs(2);
        let v1 = denoise(&p, &z, Timestep::new(0.4).unwrap(), &cond).unwrap();
        let v2 = denoise(&p, &z, Timestep::new(0.4).unwrap(), &cond).unwrap();
        assert_eq!(v1.shape(), z.shape());
        assert_eq!(v1, v2);
        let vn = denoise(&p, &z, Timestep::new(0.4).unwrap(), &cond.to_null()).unwrap();
        assert_ne!(v1, vn);
        let zeros = LatentVideo::zeros(z.shape());
        let zc = ConditionBundle::new(zeros.clone(), CondLabel::Null);
        assert!(denoise(&p, &zeros, Timestep::ONE, &zc).unwrap().is_finite());
    }

    #[test]
    fn features_agree_with_plain_forward() {
        let c = DenoiserConfig::tiny();
        let p = init_params(&c, 1).unwrap();
        let (z, cond) = tiny_inputs(5);
        let t = Timestep::new(0.7).unwrap();
        let v = denoise(&p, &z, t, &cond).unwrap();
        let (v2, feats) = denoise_with_features(&p, &z, t, &cond).unwrap();
        assert_eq!(v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   v2.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(feats.len(), c.feature_taps.len());
        assert_eq!(feats.levels[0].len(), feats.tokens() * c.width);
        let (_, again) = denoise_with_features(&p, &z, t, &cond).unwrap();
        assert_eq!(feats, again);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = init_params(&DenoiserConfig::tiny(), 1).unwrap();
        let (z, cond) = tiny_inputs(1);
        let other = LatentVideo::zeros(Shape::new(2, 4, 2, 1));
        assert!(denoise(&p, &other, Timestep::ONE, &cond).is_err());
        let odd = LatentVideo::zeros(Shape::new(2, 3, 3, 1));
        let oc = ConditionBundle::new(odd.clone(), CondLabel::Null);
        assert!(denoise(&p, &odd, Timestep::ONE, &oc).is_err());
        let bad = ConditionBundle::new(cond.lr_latent.clone(), CondLabel::Class(9));
        assert!(denoise(&p, &z, Timestep::ONE, &bad).is_err());
    }

    #[test]
    fn identity_codec_round_trips() {
        let (z, _) = tiny_inputs(9);
        let c = IdentityCodec;
        let enc = c.encode(&z).unwrap();
        assert_eq!(enc.shape(), z.shape());
        assert_eq!(c.latent_shape(z.shape()), z.shape());
        assert_eq!(c.decode(&enc).unwrap(), z);
        let a = AffineCodec::default();
        let back = a.decode(&a.encode(&z).unwrap()).unwrap();
        assert!(back.as_slice().iter().zip(z.as_slice()).all(|(p, q)| (p - q).abs() < 1e-15));
        assert!(AffineCodec { scale: 0.0, offset: 0.0 }.encode(&z).is_err());
    }
}
