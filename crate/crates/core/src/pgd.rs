//! Base flow-matching pretraining with condition dropout, then guided
//! progressive distillation: classifier-free-guidance distillation into a
//! single conditional branch, followed by step-halving phases that train the
//! student to cover two teacher steps with one.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::{init_params, video_node, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::flow::{cfg_velocity, diffuse, euler_step, velocity_target, ConditionBundle, VelocityField};
use crate::params::{Adam, AdamConfig, Gradient};
use crate::rng::{normal_video, prng, uniform, Stream};
use crate::tape::{Tape, Var};
use crate::train::{check_finite, loss_and_grad, loss_only, map_indexed, mean_of, sample_indices, LogRow, TrainItem, TrainLog};
use crate::video::{LatentVideo, Timestep};
use rand::Rng;

pub const LOG_COLUMNS: [&str; 3] = ["loss", "grad_norm", "lr"];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage0Config {
    pub iterations: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub p_drop: f64,
    /// `t ~ U[lo, hi]`.
    pub t_range: (f64, f64),
}

impl Default for Stage0Config {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 4,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            p_drop: 0.1,
            t_range: (0.02, 0.98),
        }
    }
}

pub(crate) fn check_t_range(r: (f64, f64)) -> Result<()> {
    if !(r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0) {
        return Err(Error::InvalidConfig(format!("timestep range {r:?} must satisfy 0 < lo <= hi <= 1")));
    }
    Ok(())
}

pub(crate) fn check_adam(a: &AdamConfig) -> Result<()> {
    let ok = a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.clip_norm >= 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid optimizer settings {a:?}")))
    }
}

impl Stage0Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::InvalidConfig(format!("p_drop {} must lie in [0, 1)", self.p_drop)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        check_t_range(self.t_range)?;
        check_adam(&self.adam)
    }
}

fn video_value(tape: &Tape, v: Var, like: &LatentVideo) -> LatentVideo {
    LatentVideo::from_raw(like.shape(), tape.value(v).to_vec())
}

fn check_inputs(z0: &LatentVideo, eps: &LatentVideo, cond: &ConditionBundle) -> Result<()> {
    z0.ensure_same_shape(eps)?;
    z0.ensure_same_shape(&cond.lr_latent)?;
    if !z0.is_finite() || !eps.is_finite() {
        return Err(Error::NonFinite("loss inputs".into()));
    }
    Ok(())
}

/// Records `mean((v_theta(z_t, t, cond) - (eps - z0))^2)`.
fn fm_graph(
    params: &DenoiserParams,
    tape: &mut Tape,
    vars: &[Var],
    z0: &LatentVideo,
    t: Timestep,
    eps: &LatentVideo,
    cond: &ConditionBundle,
) -> Result<Var> {
    check_inputs(z0, eps, cond)?;
    let z_t = diffuse(z0, eps, t)?;
    let target = velocity_target(z0, eps)?;
    let x = video_node(tape, &z_t, false);
    let out = params.forward(tape, vars, x, t, cond)?;
    let tv = video_node(tape, &target, false);
    Ok(tape.mse(out.velocity, tv))
}

/// Flow-matching loss for one item; `cond` is used as given (dropout is
/// applied by the caller).
pub fn flow_matching_loss(
    params: &DenoiserParams,
    z0: &LatentVideo,
    t: Timestep,
    eps: &LatentVideo,
    cond: &ConditionBundle,
) -> Result<f64> {
    loss_only(&params.set, |tape, vars| fm_graph(params, tape, vars, z0, t, eps, cond))
}

pub fn flow_matching_grad(
    params: &DenoiserParams,
    z0: &LatentVideo,
    t: Timestep,
    eps: &LatentVideo,
    cond: &ConditionBundle,
) -> Result<(f64, Gradient)> {
    loss_and_grad(&params.set, |tape, vars| fm_graph(params, tape, vars, z0, t, eps, cond))
}

/// Optimizer state for stage 0. Each iteration draws its randomness from
/// `(seed, iteration)`, so a restored state resumes the exact trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage0State {
    pub params: DenoiserParams,
    pub opt: Adam,
    pub iteration: u64,
}

impl Stage0State {
    pub fn new(params: DenoiserParams, cfg: &Stage0Config) -> Self {
        let opt = Adam::new(cfg.adam, &params.set);
        Self { params, opt, iteration: 0 }
    }

    pub fn step(&mut self, cfg: &Stage0Config, train: &[TrainItem], seed: u64) -> Result<LogRow> {
        if train.is_empty() {
            return Err(Error::Contract("stage 0 needs a non-empty dataset".into()));
        }
        let mut rng = prng(seed, Stream::Stage0, self.iteration);
        let idx = sample_indices(&mut rng, train.len(), cfg.batch);
        let draws: Vec<(usize, Timestep, LatentVideo, bool)> = idx
            .into_iter()
            .map(|i| {
                let t = Timestep::new(uniform(&mut rng, cfg.t_range.0, cfg.t_range.1))?;
                let eps = normal_video(train[i].z_hr.shape(), &mut rng);
                let drop = rng.random::<f64>() < cfg.p_drop;
                Ok((i, t, eps, drop))
            })
            .collect::<Result<_>>()?;
        let params = &self.params;
        let parts = map_indexed(draws.len(), |k| {
            let (i, t, ref eps, drop) = draws[k];
            let item = &train[i];
            let cond = if drop { item.cond.to_null() } else { item.cond.clone() };
            flow_matching_grad(params, &item.z_hr, t, eps, &cond)
        })?;
        let (loss, grad) = mean_of(parts);
        check_finite(loss, "stage0", self.iteration)?;
        let norm = self.opt.update(&mut self.params.set, &grad);
        check_finite(norm, "stage0", self.iteration)?;
        let row = LogRow { iteration: self.iteration, phase: "stage0".into(), values: alloc::vec![loss, norm, cfg.adam.lr] };
        self.iteration += 1;
        Ok(row)
    }
}

/// Pretrains a teacher from `init_params(model, seed)`.
pub fn run_stage0(cfg: &Stage0Config, model: &DenoiserConfig, train: &[TrainItem], seed: u64) -> Result<(DenoiserParams, TrainLog)> {
    cfg.validate()?;
    let mut state = Stage0State::new(init_params(model, seed)?, cfg);
    let mut log = TrainLog::new(&LOG_COLUMNS);
    while state.iteration < cfg.iterations {
        log.push(state.step(cfg, train, seed)?);
    }
    Ok((state.params, log))
}

/// Mean conditional flow-matching loss over `items` with draws fixed by `seed`.
pub fn validation_loss(params: &DenoiserParams, items: &[TrainItem], seed: u64, draws: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, item) in items.iter().enumerate() {
        let mut rng = prng(seed, Stream::Eval, i as u64);
        for _ in 0..draws {
            let t = Timestep::new(uniform(&mut rng, 0.02, 0.98))?;
            let eps = normal_video(item.z_hr.shape(), &mut rng);
            total += flow_matching_loss(params, &item.z_hr, t, &eps, &item.cond)?;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PDSchedule {
    /// Teacher step count of the first progressive phase (a power of two).
    pub start_steps: usize,
    pub cfg_iterations: u64,
    pub iterations_per_phase: u64,
    /// A refresh inside a phase hands the K-step teacher a student trained
    /// for K/2 steps. The defaults make refreshes land on phase boundaries.
    pub teacher_refresh_interval: u64,
    pub cfg_weight: f64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Timestep range for the guidance-distillation phase.
    pub cfg_t_range: (f64, f64),
}

impl Default for PDSchedule {
    fn default() -> Self {
        Self {
            start_steps: 64,
            cfg_iterations: 100,
            iterations_per_phase: 50,
            teacher_refresh_interval: 50,
            cfg_weight: 3.0,
            batch: 4,
            adam: AdamConfig { lr: 2e-4, ..AdamConfig::default() },
            cfg_t_range: (0.02, 0.98),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1Phase {
    Cfg,
    /// Teacher runs `K` steps; the student learns `K / 2`.
    Progressive(usize),
}

impl Stage1Phase {
    pub fn tag(self) -> String {
        match self {
            Stage1Phase::Cfg => "cfg".into(),
            Stage1Phase::Progressive(k) => format!("pd{k}"),
        }
    }
}

impl PDSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.start_steps.is_power_of_two() || self.start_steps < 2 {
            return Err(Error::InvalidConfig(format!("start_steps {} must be a power of two >= 2", self.start_steps)));
        }
        if self.teacher_refresh_interval == 0 {
            return Err(Error::InvalidConfig("teacher_refresh_interval must be >= 1".into()));
        }
        if self.cfg_weight < 0.0 || !self.cfg_weight.is_finite() {
            return Err(Error::InvalidConfig("cfg_weight must be finite and non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        check_t_range(self.cfg_t_range)?;
        check_adam(&self.adam)
    }

    /// Number of halvings from `start_steps` down to one step.
    pub fn halvings(&self) -> u32 {
        self.start_steps.trailing_zeros()
    }

    pub fn phases(&self) -> Vec<Stage1Phase> {
        let mut out = Vec::new();
        if self.cfg_iterations > 0 {
            out.push(Stage1Phase::Cfg);
        }
        let mut k = self.start_steps;
        while k >= 2 {
            out.push(Stage1Phase::Progressive(k));
            k /= 2;
        }
        out
    }

    pub fn total_iterations(&self) -> u64 {
        self.cfg_iterations + self.halvings() as u64 * self.iterations_per_phase
    }

    /// Phase and phase-local index of a global iteration.
    pub fn locate(&self, iteration: u64) -> Option<(Stage1Phase, u64)> {
        if iteration < self.cfg_iterations {
            return Some((Stage1Phase::Cfg, iteration));
        }
        let rest = iteration - self.cfg_iterations;
        let p = rest / self.iterations_per_phase.max(1);
        if self.iterations_per_phase == 0 || p >= self.halvings() as u64 {
            return None;
        }
        Some((Stage1Phase::Progressive(self.start_steps >> p), rest % self.iterations_per_phase))
    }
}

/// Student loss against the guided teacher target `(1 + w) v_c - w v_null`.
/// The teacher is loaded as tracked leaves behind a stop-gradient so the
/// returned teacher gradient demonstrates the cut.
#[allow(clippy::too_many_arguments)]
pub fn cfg_distill_grads(
    student: &DenoiserParams,
    teacher: &DenoiserParams,
    z0: &LatentVideo,
    t: Timestep,
    eps: &LatentVideo,
    cond: &ConditionBundle,
    w: f64,
) -> Result<(f64, Gradient, Gradient)> {
    check_inputs(z0, eps, cond)?;
    let mut tape = Tape::new();
    let sv = student.set.load(&mut tape, true);
    let tv = teacher.set.load(&mut tape, true);
    let z_t = diffuse(z0, eps, t)?;
    let x = video_node(&mut tape, &z_t, false);
    let vc = teacher.forward(&mut tape, &tv, x, t, cond)?.velocity;
    let vu = teacher.forward(&mut tape, &tv, x, t, &cond.to_null())?.velocity;
    let target = cfg_velocity(&video_value(&tape, vc, z0), &video_value(&tape, vu, z0), w)?;
    if !target.is_finite() {
        return Err(Error::NonFinite("guidance target".into()));
    }
    let guided = tape.combine(&[(1.0 + w, vc), (-w, vu)]);
    let target_node = tape.stop_grad(guided);
    let vs = student.forward(&mut tape, &sv, x, t, cond)?.velocity;
    let loss = tape.mse(vs, target_node);
    let grads = tape.backward(loss);
    let mut gs = student.set.zeros_like();
    gs.accumulate(&grads, &sv, 1.0);
    let mut gt = teacher.set.zeros_like();
    gt.accumulate(&grads, &tv, 1.0);
    Ok((tape.scalar(loss), gs, gt))
}

pub fn cfg_distill_loss(
    student: &DenoiserParams,
    teacher: &DenoiserParams,
    z0: &LatentVideo,
    t: Timestep,
    eps: &LatentVideo,
    cond: &ConditionBundle,
    w: f64,
) -> Result<f64> {
    check_inputs(z0, eps, cond)?;
    let z_t = diffuse(z0, eps, t)?;
    let vc = teacher.velocity(&z_t, t, cond)?;
    let vu = teacher.velocity(&z_t, t, &cond.to_null())?;
    let target = cfg_velocity(&vc, &vu, w)?;
    if !target.is_finite() {
        return Err(Error::NonFinite("guidance target".into()));
    }
    student.velocity(&z_t, t, cond)?.mse(&target)
}

/// Two teacher Euler steps `t -> t_mid -> t_end`.
pub fn pd_target<V: VelocityField + ?Sized>(
    teacher: &V,
    z_t: &LatentVideo,
    t: Timestep,
    t_mid: Timestep,
    t_end: Timestep,
    cond: &ConditionBundle,
) -> Result<LatentVideo> {
    if !(t_end.get() <= t_mid.get() && t_mid.get() <= t.get()) {
        return Err(Error::Contract(format!(
            "progressive target needs t_end <= t_mid <= t, got {} {} {}",
            t_end.get(),
            t_mid.get(),
            t.get()
        )));
    }
    let v1 = teacher.velocity(z_t, t, cond)?;
    let z_mid = euler_step(z_t, &v1, t, t_mid)?;
    let v2 = teacher.velocity(&z_mid, t_mid, cond)?;
    euler_step(&z_mid, &v2, t_mid, t_end)
}

fn pd_graph(
    student: &DenoiserParams,
    tape: &mut Tape,
    vars: &[Var],
    target: &LatentVideo,
    z_t: &LatentVideo,
    t: Timestep,
    t_end: Timestep,
    cond: &ConditionBundle,
) -> Result<Var> {
    target.ensure_same_shape(z_t)?;
    if t_end.get() > t.get() {
        return Err(Error::Contract("t_end must not exceed t".into()));
    }
    let x = video_node(tape, z_t, false);
    let v = student.forward(tape, vars, x, t, cond)?.velocity;
    let jump = tape.scale(v, t_end.get() - t.get());
    let pred = tape.add(x, jump);
    let tn = video_node(tape, target, false);
    Ok(tape.mse(pred, tn))
}

/// `mse(z_t - (t - t_end) v_S(z_t), target)`.
pub fn pd_loss(
    student: &DenoiserParams,
    target: &LatentVideo,
    z_t: &LatentVideo,
    t: Timestep,
    t_end: Timestep,
    cond: &ConditionBundle,
) -> Result<f64> {
    loss_only(&student.set, |tape, vars| pd_graph(student, tape, vars, target, z_t, t, t_end, cond))
}

pub fn pd_grad(
    student: &DenoiserParams,
    target: &LatentVideo,
    z_t: &LatentVideo,
    t: Timestep,
    t_end: Timestep,
    cond: &ConditionBundle,
) -> Result<(f64, Gradient)> {
    loss_and_grad(&student.set, |tape, vars| pd_graph(student, tape, vars, target, z_t, t, t_end, cond))
}

/// Student, teacher and optimizer for stage 1, positioned at a global iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1State {
    pub student: DenoiserParams,
    pub teacher: DenoiserParams,
    pub opt: Adam,
    pub iteration: u64,
    /// Number of teacher replacements so far (phase boundaries included).
    pub refreshes: u64,
}

impl Stage1State {
    pub fn new(teacher: DenoiserParams, schedule: &PDSchedule) -> Self {
        let opt = Adam::new(schedule.adam, &teacher.set);
        Self { student: teacher.clone(), teacher, opt, iteration: 0, refreshes: 0 }
    }

    pub fn is_done(&self, schedule: &PDSchedule) -> bool {
        self.iteration >= schedule.total_iterations()
    }

    fn refresh(&mut self) {
        self.teacher = self.student.clone();
        self.refreshes += 1;
    }

    pub fn step(&mut self, schedule: &PDSchedule, train: &[TrainItem], seed: u64) -> Result<LogRow> {
        if train.is_empty() {
            return Err(Error::Contract("stage 1 needs a non-empty dataset".into()));
        }
        let Some((phase, local)) = schedule.locate(self.iteration) else {
            return Err(Error::Contract("stage 1 schedule is complete".into()));
        };
        let tag = phase.tag();
        if local == 0 && self.iteration > 0 {
            // New phase: the student trained so far becomes the teacher.
            self.refresh();
            self.opt.reset();
        }
        let mut rng = prng(seed, Stream::Stage1, self.iteration);
        let idx = sample_indices(&mut rng, train.len(), schedule.batch);
        let mut draws = Vec::with_capacity(idx.len());
        for i in idx {
            let (t, t_mid, t_end) = match phase {
                Stage1Phase::Cfg => {
                    let t = Timestep::new(uniform(&mut rng, schedule.cfg_t_range.0, schedule.cfg_t_range.1))?;
                    (t, t, t)
                }
                Stage1Phase::Progressive(k) => {
                    let j = rng.random_range(1..=k / 2);
                    let dt = 1.0 / k as f64;
                    let t = (2 * j) as f64 * dt;
                    (Timestep::new(t)?, Timestep::new(t - dt)?, Timestep::new(((t - 2.0 * dt).max(0.0)).min(1.0))?)
                }
            };
            let eps = normal_video(train[i].z_hr.shape(), &mut rng);
            draws.push((i, t, t_mid, t_end, eps));
        }
        let (student, teacher) = (&self.student, &self.teacher);
        let parts = map_indexed(draws.len(), |k| {
            let (i, t, t_mid, t_end, ref eps) = draws[k];
            let item = &train[i];
            match phase {
                Stage1Phase::Cfg => {
                    let (l, g, _) = cfg_distill_grads(student, teacher, &item.z_hr, t, eps, &item.cond, schedule.cfg_weight)?;
                    Ok((l, g))
                }
                Stage1Phase::Progressive(_) => {
                    let z_t = diffuse(&item.z_hr, eps, t)?;
                    let target = pd_target(teacher, &z_t, t, t_mid, t_end, &item.cond)?;
                    pd_grad(student, &target, &z_t, t, t_end, &item.cond)
                }
            }
        })?;
        let (loss, grad) = mean_of(parts);
        check_finite(loss, &tag, self.iteration)?;
        let norm = self.opt.update(&mut self.student.set, &grad);
        check_finite(norm, &tag, self.iteration)?;
        let row = LogRow { iteration: self.iteration, phase: tag, values: alloc::vec![loss, norm, schedule.adam.lr] };
        self.iteration += 1;
        if let Stage1Phase::Progressive(_) = phase {
            if (local + 1) % schedule.teacher_refresh_interval == 0 {
                self.refresh();
            }
        }
        Ok(row)
    }
}

/// Guided then progressive distillation of `teacher` into a one-step student.
pub fn run_stage1(teacher: &DenoiserParams, schedule: &PDSchedule, train: &[TrainItem], seed: u64) -> Result<(DenoiserParams, TrainLog)> {
    schedule.validate()?;
    let mut state = Stage1State::new(teacher.clone(), schedule);
    let mut log = TrainLog::new(&LOG_COLUMNS);
    while !state.is_done(schedule) {
        log.push(state.step(schedule, train, seed)?);
    }
    Ok((state.student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::CondLabel;
    use crate::rng::normal_video;
    use crate::train::{grad_check_model, jitter};
    use crate::video::Shape;
    use alloc::vec;

    fn tiny() -> (DenoiserParams, LatentVideo, LatentVideo, ConditionBundle) {
        let mut p = init_params(&DenoiserConfig::tiny(), 3).unwrap();
        jitter(&mut p.set, 0.05, 1);
        let shape = Shape::new(2, 4, 4, 1);
        let mut rng = prng(4, Stream::Eval, 0);
        let z0 = normal_video(shape, &mut rng);
        let eps = normal_video(shape, &mut rng);
        let lr = normal_video(shape, &mut rng);
        (p, z0, eps, ConditionBundle::new(lr, CondLabel::Class(1)))
    }

    fn t(x: f64) -> Timestep {
        Timestep::new(x).unwrap()
    }

    #[test]
    fn flow_matching_gradient_matches_differences() {
        let (p, z0, eps, cond) = tiny();
        let (l, g) = flow_matching_grad(&p, &z0, t(0.4), &eps, &cond).unwrap();
        assert_eq!(l, flow_matching_loss(&p, &z0, t(0.4), &eps, &cond).unwrap());
        let r = grad_check_model(&p, &g, |q| flow_matching_loss(q, &z0, t(0.4), &eps, &cond), 0).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn cfg_distill_examples() {
        let (p, z0, eps, cond) = tiny();
        assert_eq!(cfg_distill_loss(&p, &p, &z0, t(0.5), &eps, &cond, 0.0).unwrap(), 0.0);
        let (l, gs, gt) = cfg_distill_grads(&p, &p, &z0, t(0.5), &eps, &cond, 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(gs.is_zero());
        assert!(gt.is_zero());
        let mut s = p.clone();
        jitter(&mut s.set, 0.05, 9);
        let (l, gs, gt) = cfg_distill_grads(&s, &p, &z0, t(0.5), &eps, &cond, 3.0).unwrap();
        assert!(l > 0.0 && !gs.is_zero());
        assert!(gt.is_zero());
        let direct = cfg_distill_loss(&s, &p, &z0, t(0.5), &eps, &cond, 3.0).unwrap();
        assert!((l - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        let r = grad_check_model(&s, &gs, |q| cfg_distill_loss(q, &p, &z0, t(0.5), &eps, &cond, 3.0), 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pd_target_examples() {
        let (_, z, _, cond) = tiny();
        let v = LatentVideo::filled(z.shape(), 0.7);
        let constant = |_: &LatentVideo, _: Timestep, _: &ConditionBundle| Ok(v.clone());
        let out = pd_target(&constant, &z, t(0.75), t(0.5), t(0.25), &cond).unwrap();
        let expect = z.axpby(1.0, &v, 0.25 - 0.75).unwrap();
        for (a, b) in out.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(pd_target(&constant, &z, t(0.5), t(0.5), t(0.5), &cond).unwrap(), z);
        assert!(pd_target(&constant, &z, t(0.5), t(0.25), t(0.4), &cond).is_err());
    }

    /// Data `N(0, 1)`: the exact velocity is `(2t - 1) x / V(t)` with
    /// `V(t) = (1 - t)^2 + t^2`, and the exact flow is `x(s) = x(t) sqrt(V(s) / V(t))`.
    #[test]
    fn pd_target_error_is_second_order() {
        let shape = Shape::new(1, 1, 1, 1);
        let var = |t: f64| (1.0 - t) * (1.0 - t) + t * t;
        let teacher = |z: &LatentVideo, t: Timestep, _: &ConditionBundle| {
            let t = t.get();
            Ok(z.scale((2.0 * t - 1.0) / var(t)))
        };
        let cond = ConditionBundle::new(LatentVideo::zeros(shape), CondLabel::Null);
        let x = LatentVideo::filled(shape, 1.3);
        let t0 = 0.7;
        let err = |dt: f64| {
            let out = pd_target(&teacher, &x, t(t0), t(t0 - dt), t(t0 - 2.0 * dt), &cond).unwrap();
            let exact = 1.3 * libm::sqrt(var(t0 - 2.0 * dt) / var(t0));
            (out.as_slice()[0] - exact).abs()
        };
        for dt in [0.1, 0.05, 0.025] {
            let ratio = err(dt) / err(dt / 2.0);
            assert!((3.5..4.5).contains(&ratio), "dt {dt}: ratio {ratio}");
        }
    }

    #[test]
    fn pd_loss_examples() {
        let (p, z, _, cond) = tiny();
        let v = p.velocity(&z, t(0.75), &cond).unwrap();
        let exact = euler_step(&z, &v, t(0.75), t(0.25)).unwrap();
        assert!(pd_loss(&p, &exact, &z, t(0.75), t(0.25), &cond).unwrap() < 1e-30);
        // Target built from velocity v + c: loss = (t - t_end)^2 c^2.
        let c = 0.3;
        let shifted = euler_step(&z, &v.map(|x| x + c), t(0.75), t(0.25)).unwrap();
        let l = pd_loss(&p, &shifted, &z, t(0.75), t(0.25), &cond).unwrap();
        assert!((l - 0.25 * c * c).abs() < 1e-12);
        let (_, g) = pd_grad(&p, &shifted, &z, t(0.75), t(0.25), &cond).unwrap();
        let r = grad_check_model(&p, &g, |q| pd_loss(q, &shifted, &z, t(0.75), t(0.25), &cond), 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn schedule_layout() {
        let s = PDSchedule { cfg_iterations: 3, iterations_per_phase: 2, start_steps: 8, ..Default::default() };
        assert_eq!(s.phases(), vec![Stage1Phase::Cfg, Stage1Phase::Progressive(8), Stage1Phase::Progressive(4), Stage1Phase::Progressive(2)]);
        assert_eq!(s.total_iterations(), 9);
        assert_eq!(s.locate(2), Some((Stage1Phase::Cfg, 2)));
        assert_eq!(s.locate(3), Some((Stage1Phase::Progressive(8), 0)));
        assert_eq!(s.locate(8), Some((Stage1Phase::Progressive(2), 1)));
        assert_eq!(s.locate(9), None);
        assert!(PDSchedule { start_steps: 12, ..Default::default() }.validate().is_err());
        assert!(PDSchedule { teacher_refresh_interval: 0, ..Default::default() }.validate().is_err());
        assert!(Stage0Config { p_drop: 1.0, ..Default::default() }.validate().is_err());
    }
}
