//! Dual-stream distillation: distribution matching against a frozen real-score
//! model and a trainable fake-score model, plus an adversarial stream whose
//! discriminator heads read concatenated real/fake backbone features of
//! diffused samples.
//!
//! Updates alternate in blocks: `N` auxiliary updates (fake score by diffusion
//! loss, heads by hinge loss on stop-gradient features), then one student update
//! by `λ_DMD L_DMD + λ_GAN L_G + λ_FM L_FM`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::denoiser::{video_node, DenoiserParams, FeatureStack};
use crate::error::{shape_err, Error, Result};
use crate::flow::{diffuse, predict_clean, ConditionBundle, VelocityField};
use crate::heads::{init_heads, DiscriminatorHeads, HeadConfig};
use crate::params::{Adam, AdamConfig, Gradient};
use crate::rng::{derive_seed, normal_video, prng, uniform, Stream};
use crate::tape::{Tape, Var};
use crate::train::{check_finite, map_indexed, sample_indices, LogRow, TrainItem, TrainLog};
use crate::video::{LatentVideo, Timestep};

pub const LOG_COLUMNS: [&str; 6] = ["l_diff", "l_d", "l_dmd", "l_g", "l_fm", "student_grad_norm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StreamMode {
    Dual,
    /// `λ_GAN = λ_FM = 0` and no head updates.
    DmdOnly,
    /// `λ_DMD = 0`.
    GanOnly,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage2Config {
    pub lambda_dmd: f64,
    pub lambda_gan: f64,
    pub lambda_fm: f64,
    /// Auxiliary updates per student update.
    pub interval: usize,
    /// Total updates (auxiliary plus student).
    pub iterations: u64,
    pub batch: usize,
    pub student_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub head_adam: AdamConfig,
    pub t_range: (f64, f64),
    pub eps_guard: f64,
    pub head_hidden: usize,
    pub mode: StreamMode,
    /// Stop-gradient on student features inside `L_G`, as written in the
    /// pseudo-code. Off by default: the adversarial gradient then reaches the
    /// student through heads and backbones.
    pub literal_stop_grad: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_dmd: 1.0,
            lambda_gan: 0.1,
            lambda_fm: 0.05,
            interval: 3,
            iterations: 300,
            batch: 2,
            student_adam: AdamConfig { lr: 2e-5, ..AdamConfig::default() },
            fake_adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            head_adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            t_range: (0.2, 0.98),
            eps_guard: 1e-6,
            head_hidden: 32,
            mode: StreamMode::Dual,
            literal_stop_grad: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (n, v) in [("lambda_dmd", self.lambda_dmd), ("lambda_gan", self.lambda_gan), ("lambda_fm", self.lambda_fm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{n} must be finite and >= 0, got {v}"));
            }
        }
        if self.interval == 0 {
            return bad("interval N must be >= 1".into());
        }
        if !(self.eps_guard > 0.0) {
            return bad("eps_guard must be > 0".into());
        }
        if self.batch == 0 || self.head_hidden == 0 {
            return bad("batch and head_hidden must be positive".into());
        }
        let (lo, hi) = self.t_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("t_range {:?} must satisfy 0 < lo <= hi < 1", self.t_range));
        }
        for a in [&self.student_adam, &self.fake_adam, &self.head_adam] {
            if !(a.lr > 0.0 && a.eps > 0.0) {
                return bad(format!("invalid optimizer settings {a:?}"));
            }
        }
        Ok(())
    }

    /// `(λ_DMD, λ_GAN, λ_FM)` after applying the stream mode.
    pub fn weights(&self) -> (f64, f64, f64) {
        match self.mode {
            StreamMode::Dual => (self.lambda_dmd, self.lambda_gan, self.lambda_fm),
            StreamMode::DmdOnly => (self.lambda_dmd, 0.0, 0.0),
            StreamMode::GanOnly => (0.0, self.lambda_gan, self.lambda_fm),
        }
    }

    pub fn updates_heads(&self) -> bool {
        self.mode != StreamMode::DmdOnly
    }
}

/// `ẑ0 = eps - v_S(eps, 1, cond)`.
pub fn one_step_generate(student: &DenoiserParams, eps: &LatentVideo, cond: &ConditionBundle) -> Result<LatentVideo> {
    let v = student.velocity(eps, Timestep::ONE, cond)?;
    let z = eps.sub(&v)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("one-step output".into()));
    }
    Ok(z)
}

/// Records the fake-score diffusion loss on a detached `ẑ0_S` node. Returns
/// the loss and the fake model's forward handles at `ẑ_t^S`.
fn fake_score_graph(
    fake: &DenoiserParams,
    tape: &mut Tape,
    fake_vars: &[Var],
    z0s: Var,
    t: Timestep,
    eps2: &LatentVideo,
    cond: &ConditionBundle,
) -> Result<(Var, crate::denoiser::Forward)> {
    if tape.shape(z0s) != (1, eps2.len()) {
        return Err(shape_err((1, eps2.len()), tape.shape(z0s)));
    }
    let z0 = tape.stop_grad(z0s);
    let e = video_node(tape, eps2, false);
    let zt = tape.combine(&[(1.0 - t.get(), z0), (t.get(), e)]);
    let target = tape.combine(&[(1.0, e), (-1.0, z0)]);
    let out = fake.forward(tape, fake_vars, zt, t, cond)?;
    Ok((tape.mse(out.velocity, target), out))
}

/// `mse(v_F(ẑ_t^S, t, cond), eps2 - ẑ0_S)` with `ẑ_t^S = (1 - t) ẑ0_S + t eps2`.
pub fn fake_score_loss(fake: &DenoiserParams, z0s: &LatentVideo, t: Timestep, eps2: &LatentVideo, cond: &ConditionBundle) -> Result<f64> {
    z0s.ensure_same_shape(eps2)?;
    let mut tape = Tape::new();
    let vars = fake.set.load(&mut tape, false);
    let z = video_node(&mut tape, z0s, false);
    let (l, _) = fake_score_graph(fake, &mut tape, &vars, z, t, eps2, cond)?;
    Ok(tape.scalar(l))
}

pub fn fake_score_grad(
    fake: &DenoiserParams,
    z0s: &LatentVideo,
    t: Timestep,
    eps2: &LatentVideo,
    cond: &ConditionBundle,
) -> Result<(f64, Gradient)> {
    z0s.ensure_same_shape(eps2)?;
    let mut tape = Tape::new();
    let vars = fake.set.load(&mut tape, true);
    let z = video_node(&mut tape, z0s, false);
    let (l, _) = fake_score_graph(fake, &mut tape, &vars, z, t, eps2, cond)?;
    let grads = tape.backward(l);
    let mut g = fake.set.zeros_like();
    g.accumulate(&grads, &vars, 1.0);
    Ok((tape.scalar(l), g))
}

/// `(ẑ0_F - ẑ0_R) / max(mean|ẑ0_S - ẑ0_R|, guard)`; one video is one sample.
pub fn dmd_grad(z0s: &LatentVideo, z0f: &LatentVideo, z0r: &LatentVideo, guard: f64) -> Result<LatentVideo> {
    z0s.ensure_same_shape(z0f)?;
    z0s.ensure_same_shape(z0r)?;
    let denom = z0s.sub(z0r)?.mean_abs().max(guard);
    Ok(z0f.sub(z0r)?.map(|x| x / denom))
}

/// `mse(ẑ0_S, sg(ẑ0_S - grad))`, numerically `mean(grad^2)`.
pub fn dmd_loss(z0s: &LatentVideo, grad: &LatentVideo) -> Result<f64> {
    let target = z0s.sub(grad)?;
    z0s.mse(&target)
}

fn dmd_graph(tape: &mut Tape, z0s: Var, grad: &LatentVideo) -> Result<Var> {
    if tape.shape(z0s) != (1, grad.len()) {
        return Err(shape_err((1, grad.len()), tape.shape(z0s)));
    }
    let target: Vec<f64> = tape.value(z0s).iter().zip(grad.as_slice()).map(|(z, g)| z - g).collect();
    let target = tape.constant(1, grad.len(), target);
    Ok(tape.mse(z0s, target))
}

/// Loss and `d loss / d ẑ0_S` of [`dmd_loss`].
pub fn dmd_loss_input_grad(z0s: &LatentVideo, grad: &LatentVideo) -> Result<(f64, LatentVideo)> {
    z0s.ensure_same_shape(grad)?;
    let mut tape = Tape::new();
    let z = video_node(&mut tape, z0s, true);
    let l = dmd_graph(&mut tape, z, grad)?;
    let g = tape.backward(l).get(z).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; z0s.len()]);
    Ok((tape.scalar(l), LatentVideo::new(z0s.shape(), g)?))
}

/// Per-level concatenation `[real | fake]` of tapped features.
fn concat_levels(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Vec<Var> {
    assert_eq!(real.len(), fake.len(), "real and fake backbones must expose the same taps");
    real.iter().zip(fake).map(|(&r, &f)| tape.concat_cols(&[r, f])).collect()
}

fn stack_of(tape: &Tape, levels: &[Var], grid: (usize, usize, usize)) -> FeatureStack {
    let channels = tape.shape(levels[0]).1;
    FeatureStack { grid, channels, levels: levels.iter().map(|&v| tape.value(v).to_vec()).collect() }
}

/// Real- and fake-score features of `z_t`, concatenated per level.
pub fn extract_disc_features(
    real: &DenoiserParams,
    fake: &DenoiserParams,
    z_t: &LatentVideo,
    t: Timestep,
    cond: &ConditionBundle,
) -> Result<FeatureStack> {
    if real.config != fake.config {
        return Err(Error::Contract("real and fake score models must share a configuration".into()));
    }
    if t.get() <= 0.0 {
        return Err(Error::Contract("discriminator features need a diffused sample (t > 0)".into()));
    }
    let mut tape = Tape::new();
    let rv = real.set.load(&mut tape, false);
    let fv = fake.set.load(&mut tape, false);
    let x = video_node(&mut tape, z_t, false);
    let r = real.forward(&mut tape, &rv, x, t, cond)?;
    let f = fake.forward(&mut tape, &fv, x, t, cond)?;
    let levels = concat_levels(&mut tape, &r.taps, &f.taps);
    Ok(stack_of(&tape, &levels, r.grid))
}

pub fn gan_d_loss(d_real: f64, d_fake: f64) -> f64 {
    (1.0 - d_real).max(0.0) + (1.0 + d_fake).max(0.0)
}

pub fn gan_g_loss(d_fake: f64) -> f64 {
    -d_fake
}

/// Mean over levels of the per-level mean squared difference.
pub fn feature_matching_loss(h_s: &FeatureStack, h_hr: &FeatureStack) -> Result<f64> {
    if h_s.levels.len() != h_hr.levels.len() {
        return Err(shape_err(h_hr.levels.len(), h_s.levels.len()));
    }
    if h_s.levels.is_empty() {
        return Err(Error::Contract("feature stacks are empty".into()));
    }
    let mut total = 0.0;
    for (a, b) in h_s.levels.iter().zip(&h_hr.levels) {
        if a.len() != b.len() {
            return Err(shape_err(b.len(), a.len()));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / h_s.levels.len() as f64)
}

/// Everything trained or frozen in stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamState {
    pub student: DenoiserParams,
    pub real: DenoiserParams,
    pub fake: DenoiserParams,
    pub heads: DiscriminatorHeads,
    pub opt_student: Adam,
    pub opt_fake: Adam,
    pub opt_heads: Adam,
    pub iteration: u64,
    pub aux_updates: u64,
    pub student_updates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AuxRecord {
    pub l_diff: f64,
    pub l_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// Largest `|∂L_D/∂(backbone parameter)|` over both backbones.
    pub backbone_grad_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StudentRecord {
    pub l_dmd: f64,
    pub l_g: f64,
    pub l_fm: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Randomness of one update for one batch element.
#[derive(Debug, Clone)]
pub struct Draw {
    pub item: usize,
    pub eps: LatentVideo,
    pub t: Timestep,
    pub eps2: LatentVideo,
}

pub fn draw_batch(cfg: &Stage2Config, train: &[TrainItem], seed: u64, iteration: u64) -> Result<Vec<Draw>> {
    let mut rng = prng(seed, Stream::Stage2, iteration);
    let idx = sample_indices(&mut rng, train.len(), cfg.batch);
    idx.into_iter()
        .map(|item| {
            let shape = train[item].z_hr.shape();
            let eps = normal_video(shape, &mut rng);
            let t = Timestep::new(uniform(&mut rng, cfg.t_range.0, cfg.t_range.1))?;
            let eps2 = normal_video(shape, &mut rng);
            Ok(Draw { item, eps, t, eps2 })
        })
        .collect()
}

struct AuxParts {
    record: AuxRecord,
    g_fake: Gradient,
    g_heads: Gradient,
}

struct StudentParts {
    record: StudentRecord,
    grad: Gradient,
}

impl DualStreamState {
    /// Real and fake scores start from `teacher`; heads from `seed`.
    pub fn new(student: DenoiserParams, teacher: &DenoiserParams, cfg: &Stage2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if student.config != teacher.config {
            return Err(Error::Contract("student and teacher configurations differ".into()));
        }
        let hc = HeadConfig {
            levels: teacher.config.feature_taps.len(),
            in_channels: 2 * teacher.config.width,
            hidden: cfg.head_hidden,
        };
        let heads = init_heads(&hc, derive_seed(seed, Stream::Init, 0x4EAD))?;
        Ok(Self {
            opt_student: Adam::new(cfg.student_adam, &student.set),
            opt_fake: Adam::new(cfg.fake_adam, &teacher.set),
            opt_heads: Adam::new(cfg.head_adam, &heads.set),
            student,
            real: teacher.clone(),
            fake: teacher.clone(),
            heads,
            iteration: 0,
            aux_updates: 0,
            student_updates: 0,
        })
    }

    /// Whether the next call to [`Self::step`] is a student update.
    pub fn next_is_student(&self, cfg: &Stage2Config) -> bool {
        self.iteration % (cfg.interval as u64 + 1) == cfg.interval as u64
    }

    fn aux_item(&self, cfg: &Stage2Config, item: &TrainItem, d: &Draw) -> Result<AuxParts> {
        let z0s = one_step_generate(&self.student, &d.eps, &item.cond)?;
        let z_hr_t = diffuse(&item.z_hr, &d.eps2, d.t)?;
        let mut tape = Tape::new();
        let rv = self.real.set.load(&mut tape, true);
        let fv = self.fake.set.load(&mut tape, true);
        let hv = self.heads.set.load(&mut tape, true);
        let zs = video_node(&mut tape, &z0s, false);
        let (l_diff, fake_s) = fake_score_graph(&self.fake, &mut tape, &fv, zs, d.t, &d.eps2, &item.cond)?;

        let mut record = AuxRecord { l_diff: tape.scalar(l_diff), ..Default::default() };
        let mut g_heads = self.heads.set.zeros_like();
        if cfg.updates_heads() {
            let zts = diffuse(&z0s, &d.eps2, d.t)?;
            let xs = video_node(&mut tape, &zts, false);
            let xh = video_node(&mut tape, &z_hr_t, false);
            let real_s = self.real.forward(&mut tape, &rv, xs, d.t, &item.cond)?;
            let real_h = self.real.forward(&mut tape, &rv, xh, d.t, &item.cond)?;
            let fake_h = self.fake.forward(&mut tape, &fv, xh, d.t, &item.cond)?;
            let h_s = concat_levels(&mut tape, &real_s.taps, &fake_s.taps);
            let h_hr = concat_levels(&mut tape, &real_h.taps, &fake_h.taps);
            let h_s: Vec<Var> = h_s.into_iter().map(|v| tape.stop_grad(v)).collect();
            let h_hr: Vec<Var> = h_hr.into_iter().map(|v| tape.stop_grad(v)).collect();
            let (_, d_fake) = self.heads.forward(&mut tape, &hv, &h_s, real_s.grid)?;
            let (_, d_real) = self.heads.forward(&mut tape, &hv, &h_hr, real_s.grid)?;
            let neg_real = tape_neg(&mut tape, d_real);
            let m_real = tape.offset(neg_real, 1.0);
            let m_real = tape.relu(m_real);
            let m_fake = tape.offset(d_fake, 1.0);
            let m_fake = tape.relu(m_fake);
            let l_d = tape.add(m_real, m_fake);
            record.l_d = tape.scalar(l_d);
            record.d_real = tape.scalar(d_real);
            record.d_fake = tape.scalar(d_fake);
            let grads = tape.backward(l_d);
            g_heads.accumulate(&grads, &hv, 1.0);
            record.backbone_grad_max = rv
                .iter()
                .chain(&fv)
                .filter_map(|&v| grads.get(v))
                .flat_map(|g| g.iter())
                .fold(0.0f64, |m, x| m.max(x.abs()));
        }
        let grads = tape.backward(l_diff);
        let mut g_fake = self.fake.set.zeros_like();
        g_fake.accumulate(&grads, &fv, 1.0);
        Ok(AuxParts { record, g_fake, g_heads })
    }

    fn student_item(&self, cfg: &Stage2Config, item: &TrainItem, d: &Draw) -> Result<StudentParts> {
        let (w_dmd, w_gan, w_fm) = cfg.weights();
        let t = d.t;
        let mut tape = Tape::new();
        let sv = self.student.set.load(&mut tape, true);
        let rv = self.real.set.load(&mut tape, false);
        let fv = self.fake.set.load(&mut tape, false);
        let hv = self.heads.set.load(&mut tape, false);
        let e = video_node(&mut tape, &d.eps, false);
        let vs = self.student.forward(&mut tape, &sv, e, Timestep::ONE, &item.cond)?.velocity;
        let z0s = tape.sub(e, vs);
        let e2 = video_node(&mut tape, &d.eps2, false);
        let zts = tape.combine(&[(1.0 - t.get(), z0s), (t.get(), e2)]);
        let real_s = self.real.forward(&mut tape, &rv, zts, t, &item.cond)?;
        let fake_s = self.fake.forward(&mut tape, &fv, zts, t, &item.cond)?;

        let shape = d.eps.shape();
        let val = |tape: &Tape, v: Var| LatentVideo::new(shape, tape.value(v).to_vec());
        let zts_v = val(&tape, zts)?;
        let z0s_v = val(&tape, z0s)?;
        if !z0s_v.is_finite() {
            return Err(Error::NonFinite("one-step output".into()));
        }
        let z0r = predict_clean(&zts_v, &val(&tape, real_s.velocity)?, t)?;
        let z0f = predict_clean(&zts_v, &val(&tape, fake_s.velocity)?, t)?;
        let grad = dmd_grad(&z0s_v, &z0f, &z0r, cfg.eps_guard)?;
        let l_dmd = dmd_graph(&mut tape, z0s, &grad)?;

        let mut terms = vec![(w_dmd, l_dmd)];
        let mut record = StudentRecord { l_dmd: tape.scalar(l_dmd), ..Default::default() };
        if w_gan > 0.0 || w_fm > 0.0 {
            let h_s = concat_levels(&mut tape, &real_s.taps, &fake_s.taps);
            if w_gan > 0.0 {
                let inputs: Vec<Var> = if cfg.literal_stop_grad {
                    h_s.iter().map(|&v| tape.stop_grad(v)).collect()
                } else {
                    h_s.clone()
                };
                let (_, d_fake) = self.heads.forward(&mut tape, &hv, &inputs, real_s.grid)?;
                let l_g = tape_neg(&mut tape, d_fake);
                record.l_g = tape.scalar(l_g);
                terms.push((w_gan, l_g));
            }
            if w_fm > 0.0 {
                let z_hr_t = diffuse(&item.z_hr, &d.eps2, t)?;
                let xh = video_node(&mut tape, &z_hr_t, false);
                let real_h = self.real.forward(&mut tape, &rv, xh, t, &item.cond)?;
                let fake_h = self.fake.forward(&mut tape, &fv, xh, t, &item.cond)?;
                let h_hr = concat_levels(&mut tape, &real_h.taps, &fake_h.taps);
                let per_level: Vec<Var> = h_s.iter().zip(&h_hr).map(|(&a, &b)| tape.mse(a, b)).collect();
                let k = 1.0 / per_level.len() as f64;
                let weighted: Vec<(f64, Var)> = per_level.iter().map(|&v| (k, v)).collect();
                let l_fm = tape.combine(&weighted);
                record.l_fm = tape.scalar(l_fm);
                terms.push((w_fm, l_fm));
            }
        }
        let total = tape.combine(&terms);
        record.total = tape.scalar(total);
        let grads = tape.backward(total);
        let mut g = self.student.set.zeros_like();
        g.accumulate(&grads, &sv, 1.0);
        Ok(StudentParts { record, grad: g })
    }

    /// Auxiliary losses of one draw with the fake-score and head gradients,
    /// without updating anything.
    pub fn auxiliary_objective(&self, cfg: &Stage2Config, item: &TrainItem, draw: &Draw) -> Result<(AuxRecord, Gradient, Gradient)> {
        let p = self.aux_item(cfg, item, draw)?;
        Ok((p.record, p.g_fake, p.g_heads))
    }

    /// Student losses of one draw with the student gradient, without updating
    /// anything.
    pub fn student_objective(&self, cfg: &Stage2Config, item: &TrainItem, draw: &Draw) -> Result<(StudentRecord, Gradient)> {
        let p = self.student_item(cfg, item, draw)?;
        Ok((p.record, p.grad))
    }

    /// One auxiliary update on the given draws.
    pub fn auxiliary_update(&mut self, cfg: &Stage2Config, train: &[TrainItem], draws: &[Draw]) -> Result<AuxRecord> {
        let parts = map_indexed(draws.len(), |k| self.aux_item(cfg, &train[draws[k].item], &draws[k]))?;
        let n = parts.len() as f64;
        let mut rec = AuxRecord::default();
        let mut g_fake = self.fake.set.zeros_like();
        let mut g_heads = self.heads.set.zeros_like();
        for p in &parts {
            rec.l_diff += p.record.l_diff / n;
            rec.l_d += p.record.l_d / n;
            rec.d_real += p.record.d_real / n;
            rec.d_fake += p.record.d_fake / n;
            rec.backbone_grad_max = rec.backbone_grad_max.max(p.record.backbone_grad_max);
            g_fake.add_assign(&p.g_fake);
            g_heads.add_assign(&p.g_heads);
        }
        g_fake.scale(1.0 / n);
        g_heads.scale(1.0 / n);
        check_finite(rec.l_diff + rec.l_d, "aux", self.iteration)?;
        if rec.backbone_grad_max != 0.0 {
            return Err(Error::Contract("discriminator loss leaked gradient into a score backbone".into()));
        }
        self.opt_fake.update(&mut self.fake.set, &g_fake);
        if cfg.updates_heads() {
            self.opt_heads.update(&mut self.heads.set, &g_heads);
        }
        self.iteration += 1;
        self.aux_updates += 1;
        Ok(rec)
    }

    /// One student update on the given draws.
    pub fn student_update(&mut self, cfg: &Stage2Config, train: &[TrainItem], draws: &[Draw]) -> Result<StudentRecord> {
        let parts = map_indexed(draws.len(), |k| self.student_item(cfg, &train[draws[k].item], &draws[k]))?;
        let n = parts.len() as f64;
        let mut rec = StudentRecord::default();
        let mut grad = self.student.set.zeros_like();
        for p in &parts {
            rec.l_dmd += p.record.l_dmd / n;
            rec.l_g += p.record.l_g / n;
            rec.l_fm += p.record.l_fm / n;
            rec.total += p.record.total / n;
            grad.add_assign(&p.grad);
        }
        grad.scale(1.0 / n);
        check_finite(rec.total, "student", self.iteration)?;
        rec.grad_norm = self.opt_student.update(&mut self.student.set, &grad);
        check_finite(rec.grad_norm, "student", self.iteration)?;
        self.iteration += 1;
        self.student_updates += 1;
        Ok(rec)
    }

    /// Next update of the block schedule, with draws from `(seed, iteration)`.
    pub fn step(&mut self, cfg: &Stage2Config, train: &[TrainItem], seed: u64) -> Result<LogRow> {
        if train.is_empty() {
            return Err(Error::Contract("stage 2 needs a non-empty dataset".into()));
        }
        let it = self.iteration;
        let draws = draw_batch(cfg, train, seed, it)?;
        let nan = f64::NAN;
        if self.next_is_student(cfg) {
            let r = self.student_update(cfg, train, &draws)?;
            Ok(LogRow { iteration: it, phase: "student".into(), values: vec![nan, nan, r.l_dmd, r.l_g, r.l_fm, r.grad_norm] })
        } else {
            let r = self.auxiliary_update(cfg, train, &draws)?;
            let l_d = if cfg.updates_heads() { r.l_d } else { nan };
            Ok(LogRow { iteration: it, phase: "aux".into(), values: vec![r.l_diff, l_d, nan, nan, nan, nan] })
        }
    }
}

fn tape_neg(tape: &mut Tape, v: Var) -> Var {
    tape.scale(v, -1.0)
}

/// Runs `cfg.iterations` block-scheduled updates from `init_student`.
pub fn run_stage2(
    init_student: &DenoiserParams,
    teacher: &DenoiserParams,
    cfg: &Stage2Config,
    train: &[TrainItem],
    seed: u64,
) -> Result<(DualStreamState, TrainLog)> {
    let mut state = DualStreamState::new(init_student.clone(), teacher, cfg, seed)?;
    let mut log = TrainLog::new(&LOG_COLUMNS);
    while state.iteration < cfg.iterations {
        log.push(state.step(cfg, train, seed)?);
    }
    Ok((state, log))
}

/// DMD-only for the first half of the updates, then GAN-only on the same
/// state: the sequential alternative to joint optimization.
pub fn run_stage2_sequential(
    init_student: &DenoiserParams,
    teacher: &DenoiserParams,
    cfg: &Stage2Config,
    train: &[TrainItem],
    seed: u64,
) -> Result<(DualStreamState, TrainLog)> {
    let first = Stage2Config { mode: StreamMode::DmdOnly, ..cfg.clone() };
    let second = Stage2Config { mode: StreamMode::GanOnly, ..cfg.clone() };
    let mut state = DualStreamState::new(init_student.clone(), teacher, cfg, seed)?;
    let mut log = TrainLog::new(&LOG_COLUMNS);
    let half = cfg.iterations / 2;
    while state.iteration < cfg.iterations {
        let c = if state.iteration < half { &first } else { &second };
        log.push(state.step(c, train, seed)?);
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::flow::CondLabel;
    use crate::heads::disc_forward;
    use crate::train::{grad_check, grad_check_model, jitter};
    use crate::video::Shape;

    fn shape() -> Shape {
        Shape::new(2, 4, 4, 1)
    }

    fn model(seed: u64) -> DenoiserParams {
        let mut p = init_params(&DenoiserConfig::tiny(), seed).unwrap();
        jitter(&mut p.set, 0.05, seed);
        p
    }

    fn items(n: usize) -> Vec<TrainItem> {
        (0..n)
            .map(|i| {
                let mut rng = prng(i as u64, Stream::Eval, 3);
                TrainItem {
                    z_hr: normal_video(shape(), &mut rng),
                    cond: ConditionBundle::new(normal_video(shape(), &mut rng), CondLabel::Class((i % 2) as u32)),
                }
            })
            .collect()
    }

    fn tiny_cfg() -> Stage2Config {
        Stage2Config { batch: 1, head_hidden: 4, ..Default::default() }
    }

    fn video(v: f64) -> LatentVideo {
        LatentVideo::filled(Shape::new(1, 1, 1, 1), v)
    }

    #[test]
    fn one_step_examples() {
        let p = model(1);
        let it = &items(1)[0];
        let mut rng = prng(2, Stream::Eval, 0);
        let eps = normal_video(shape(), &mut rng);
        let a = one_step_generate(&p, &eps, &it.cond).unwrap();
        assert_eq!(a, one_step_generate(&p, &eps, &it.cond).unwrap());
        let mut zero = init_params(&DenoiserConfig::tiny(), 1).unwrap();
        let ow = zero.set.position("out.w").unwrap();
        let ob = zero.set.position("out.b").unwrap();
        let n = zero.set.array(ow).len();
        zero.set.set_array(ow, vec![0.0; n]).unwrap();
        let n = zero.set.array(ob).len();
        zero.set.set_array(ob, vec![0.0; n]).unwrap();
        assert_eq!(one_step_generate(&zero, &eps, &it.cond).unwrap(), eps);
    }

    #[test]
    fn dmd_examples() {
        assert_eq!(dmd_grad(&video(2.0), &video(3.0), &video(1.0), 1e-6).unwrap(), video(2.0));
        let g = dmd_grad(&video(1.0), &video(1.5), &video(1.0), 1e-6).unwrap();
        assert_eq!(g, video(0.5 / 1e-6));
        let z = dmd_grad(&video(0.3), &video(0.7), &video(0.7), 1e-6).unwrap();
        assert_eq!(z, video(0.0));
        let (l, d) = dmd_loss_input_grad(&video(2.0), &video(0.5)).unwrap();
        assert_eq!(l, 0.25);
        assert_eq!(d, video(1.0));
        let (l, d) = dmd_loss_input_grad(&video(2.0), &video(0.0)).unwrap();
        assert_eq!((l, d), (0.0, video(0.0)));
    }

    #[test]
    fn hinge_and_feature_matching_examples() {
        assert_eq!(gan_d_loss(2.0, -3.0), 0.0);
        assert_eq!(gan_d_loss(0.5, 0.5), 2.0);
        assert_eq!(gan_g_loss(1.5), -1.5);
        let one = |v: f64| FeatureStack { grid: (1, 1, 1), channels: 1, levels: vec![vec![v]] };
        assert_eq!(feature_matching_loss(&one(1.0), &one(3.0)).unwrap(), 4.0);
        assert_eq!(feature_matching_loss(&one(3.0), &one(1.0)).unwrap(), 4.0);
        assert_eq!(feature_matching_loss(&one(3.0), &one(3.0)).unwrap(), 0.0);
        let two = FeatureStack { levels: vec![vec![1.0], vec![1.0]], ..one(0.0) };
        assert!(feature_matching_loss(&one(1.0), &two).is_err());
    }

    #[test]
    fn fake_score_gradient_and_detach() {
        let fake = model(2);
        let student = model(3);
        let it = &items(1)[0];
        let mut rng = prng(5, Stream::Eval, 0);
        let eps = normal_video(shape(), &mut rng);
        let eps2 = normal_video(shape(), &mut rng);
        let t = Timestep::new(0.6).unwrap();
        let z0s = one_step_generate(&student, &eps, &it.cond).unwrap();
        let (l, g) = fake_score_grad(&fake, &z0s, t, &eps2, &it.cond).unwrap();
        assert_eq!(l, fake_score_loss(&fake, &z0s, t, &eps2, &it.cond).unwrap());
        let r = grad_check_model(&fake, &g, |q| fake_score_loss(q, &z0s, t, &eps2, &it.cond), 4).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        // The student output enters through a stop-gradient.
        let mut tape = Tape::new();
        let sv = student.set.load(&mut tape, true);
        let fv = fake.set.load(&mut tape, false);
        let e = video_node(&mut tape, &eps, false);
        let vs = student.forward(&mut tape, &sv, e, Timestep::ONE, &it.cond).unwrap().velocity;
        let z = tape.sub(e, vs);
        let (loss, _) = fake_score_graph(&fake, &mut tape, &fv, z, t, &eps2, &it.cond).unwrap();
        let grads = tape.backward(loss);
        assert!(sv.iter().all(|&v| grads.get(v).is_none_or(|g| g.iter().all(|&x| x == 0.0))));
    }

    #[test]
    fn dmd_parameter_gradient_matches_differences() {
        let student = model(4);
        let it = &items(1)[0];
        let mut rng = prng(6, Stream::Eval, 0);
        let eps = normal_video(shape(), &mut rng);
        let grad = normal_video(shape(), &mut rng);
        let f = |p: &DenoiserParams| dmd_loss(&one_step_generate(p, &eps, &it.cond)?, &grad);
        // Freeze Grad at the current ẑ0_S: L(θ) = mse(ẑ0_S(θ), c) with c fixed.
        let z0 = one_step_generate(&student, &eps, &it.cond).unwrap();
        let target = z0.sub(&grad).unwrap();
        let frozen = |p: &DenoiserParams| one_step_generate(p, &eps, &it.cond)?.mse(&target);
        let (l, g) = crate::train::loss_and_grad(&student.set, |tape, vars| {
            let e = video_node(tape, &eps, false);
            let v = student.forward(tape, vars, e, Timestep::ONE, &it.cond)?.velocity;
            let z = tape.sub(e, v);
            dmd_graph(tape, z, &grad)
        })
        .unwrap();
        assert!((l - f(&student).unwrap()).abs() < 1e-12);
        let mut probe = student.clone();
        let r = grad_check(
            &student.set,
            &g,
            |s| {
                probe.set = s.clone();
                frozen(&probe)
            },
            3,
            1e-5,
            1e-6,
            7,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn features_concatenate_both_backbones() {
        let real = model(1);
        let fake = model(2);
        let it = &items(1)[0];
        let t = Timestep::new(0.5).unwrap();
        let h = extract_disc_features(&real, &fake, &it.z_hr, t, &it.cond).unwrap();
        assert_eq!(h.channels, 2 * real.config.width);
        assert_eq!(h, extract_disc_features(&real, &fake, &it.z_hr, t, &it.cond).unwrap());
        assert!(extract_disc_features(&real, &fake, &it.z_hr, Timestep::ZERO, &it.cond).is_err());
    }

    #[test]
    fn block_schedule_and_isolation() {
        let train = items(3);
        let teacher = model(1);
        let cfg = tiny_cfg();
        let mut s = DualStreamState::new(teacher.clone(), &teacher, &cfg, 0).unwrap();
        let real0 = s.real.clone();
        for _ in 0..12 {
            let before = s.clone();
            let row = s.step(&cfg, &train, 9).unwrap();
            assert!(s.real.set.bitwise_eq(&real0.set));
            if row.phase == "aux" {
                assert!(s.student.set.bitwise_eq(&before.student.set));
                assert!(!s.fake.set.bitwise_eq(&before.fake.set));
            } else {
                assert!(s.fake.set.bitwise_eq(&before.fake.set));
                assert!(s.heads.set.bitwise_eq(&before.heads.set));
                assert!(!s.student.set.bitwise_eq(&before.student.set));
            }
        }
        assert_eq!((s.aux_updates, s.student_updates, s.iteration), (9, 3, 12));
    }

    #[test]
    fn student_loss_recomposes_and_adversarial_gradient_reaches_student() {
        let train = items(2);
        let teacher = model(1);
        let cfg = tiny_cfg();
        let mut s = DualStreamState::new(model(5), &teacher, &cfg, 0).unwrap();
        // Make the heads non-trivial so D depends on the features.
        jitter(&mut s.heads.set, 0.3, 2);
        let draws = draw_batch(&cfg, &train, 1, 0).unwrap();
        let p = s.student_item(&cfg, &train[draws[0].item], &draws[0]).unwrap();
        let r = p.record;
        let manual = 1.0 * r.l_dmd + 0.1 * r.l_g + 0.05 * r.l_fm;
        assert!((r.total - manual).abs() <= 1e-12 * manual.abs().max(1.0));

        let gan = Stage2Config { lambda_dmd: 0.0, lambda_fm: 0.0, ..cfg.clone() };
        let g = s.student_item(&gan, &train[draws[0].item], &draws[0]).unwrap().grad;
        assert!(g.norm() > 0.0);
        let literal = Stage2Config { literal_stop_grad: true, ..gan };
        let g = s.student_item(&literal, &train[draws[0].item], &draws[0]).unwrap().grad;
        assert!(g.is_zero());

        let dmd = Stage2Config { lambda_gan: 0.0, lambda_fm: 0.0, ..cfg.clone() };
        let a = s.student_item(&dmd, &train[draws[0].item], &draws[0]).unwrap();
        let only = Stage2Config { mode: StreamMode::DmdOnly, ..cfg.clone() };
        let b = s.student_item(&only, &train[draws[0].item], &draws[0]).unwrap();
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.record.total, a.record.l_dmd);
    }

    #[test]
    fn discriminator_loss_never_reaches_backbones() {
        let train = items(2);
        let teacher = model(1);
        let cfg = tiny_cfg();
        let mut s = DualStreamState::new(model(5), &teacher, &cfg, 0).unwrap();
        jitter(&mut s.heads.set, 0.3, 2);
        let draws = draw_batch(&cfg, &train, 1, 0).unwrap();
        let a = s.aux_item(&cfg, &train[draws[0].item], &draws[0]).unwrap();
        assert_eq!(a.record.backbone_grad_max, 0.0);
        assert!(a.g_heads.norm() > 0.0);
        // D from the tape agrees with the standalone head evaluation.
        let d = &draws[0];
        let it = &train[d.item];
        let z_hr_t = diffuse(&it.z_hr, &d.eps2, d.t).unwrap();
        let h = extract_disc_features(&s.real, &s.fake, &z_hr_t, d.t, &it.cond).unwrap();
        let (_, d_real) = disc_forward(&s.heads, &h).unwrap();
        assert!((d_real - a.record.d_real).abs() < 1e-12);
    }

    #[test]
    fn ablation_modes_run() {
        let train = items(2);
        let teacher = model(1);
        for mode in [StreamMode::DmdOnly, StreamMode::GanOnly, StreamMode::Dual] {
            let cfg = Stage2Config { mode, iterations: 4, ..tiny_cfg() };
            let (s, log) = run_stage2(&teacher, &teacher, &cfg, &train, 3).unwrap();
            assert_eq!(log.rows.len(), 4);
            assert!(s.student.set.is_finite());
            if mode == StreamMode::DmdOnly {
                assert!(s.heads.set.bitwise_eq(&DualStreamState::new(teacher.clone(), &teacher, &cfg, 3).unwrap().heads.set));
            }
        }
        let cfg = Stage2Config { iterations: 8, ..tiny_cfg() };
        let (s, _) = run_stage2_sequential(&teacher, &teacher, &cfg, &train, 3).unwrap();
        assert_eq!(s.iteration, 8);
        assert!(Stage2Config { lambda_gan: -1.0, ..Default::default() }.validate().is_err());
        assert!(Stage2Config { interval: 0, ..Default::default() }.validate().is_err());
    }
}
