//! Preference refinement: sample several one-step reconstructions per LR
//! video, rank them with a scorer, keep the best and worst as a preference
//! pair, and fine-tune the student with a diffusion DPO objective against a
//! frozen reference copy.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{gt_flow, hf_energy, FlowField, VideoPair};
use crate::denoiser::{denoise, video_node, Codec, DenoiserParams};
use crate::dual::one_step_generate;
use crate::error::{Error, Result};
use crate::eval::{warp_error_gt, WARP_SCALE};
use crate::flow::{diffuse, velocity_target, ConditionBundle};
use crate::params::{Adam, AdamConfig, Gradient};
use crate::pgd::{check_adam, check_t_range};
use crate::rng::{derive_seed, normal_video, prng, uniform, Stream};
use crate::tape::{Tape, Var};
use crate::train::{check_finite, loss_and_grad, map_indexed, mean_of, sample_indices, LogRow, TrainLog};
use crate::video::{LatentVideo, Timestep};

pub const LOG_COLUMNS: [&str; 3] = ["loss", "inner_margin", "grad_norm"];

/// Weights of the proxy scorer terms: reference fidelity, detail, temporal
/// consistency.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScoreWeights {
    pub fidelity: f64,
    pub detail: f64,
    pub temporal: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { fidelity: 1.0, detail: 0.5, temporal: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage3Config {
    pub candidates: usize,
    pub pairs_total: usize,
    pub beta: f64,
    pub iterations: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    pub t_range: (f64, f64),
    pub weights: ScoreWeights,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            candidates: 5,
            pairs_total: 200,
            beta: 500.0,
            iterations: 150,
            batch: 2,
            adam: AdamConfig { lr: 1e-5, ..AdamConfig::default() },
            t_range: (0.02, 1.0),
            weights: ScoreWeights::default(),
        }
    }
}

impl Stage3Config {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 candidates, got {}", self.candidates)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {} must be positive", self.beta)));
        }
        if self.batch == 0 || self.pairs_total == 0 {
            return Err(Error::InvalidConfig("batch and pairs_total must be positive".into()));
        }
        let w = self.weights;
        if ![w.fidelity, w.detail, w.temporal].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidConfig(format!("scorer weights {w:?} must be finite and >= 0")));
        }
        check_t_range(self.t_range)?;
        check_adam(&self.adam)
    }
}

/// `k` one-step outputs, candidate `i` seeded by `(seed, i)`.
pub fn generate_candidates(student: &DenoiserParams, cond: &ConditionBundle, k: usize, seed: u64) -> Result<Vec<LatentVideo>> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 candidates, got {k}")));
    }
    map_indexed(k, |i| {
        let mut rng = prng(seed, Stream::Candidates, i as u64);
        let eps = normal_video(cond.lr_latent.shape(), &mut rng);
        one_step_generate(student, &eps, cond)
    })
}

/// Proxy quality in pixel space, higher is better:
/// `w1 (-mse(candidate, hr)) + w2 hf(candidate) / hf(lr_up) + w3 (-warp mse)`.
/// Terms whose inputs are absent contribute zero.
pub fn quality_score(
    candidate: &LatentVideo,
    lr_up: &LatentVideo,
    hr: Option<&LatentVideo>,
    flow: Option<&FlowField>,
    w: ScoreWeights,
) -> Result<f64> {
    candidate.ensure_same_shape(lr_up)?;
    let fidelity = match hr {
        Some(hr) => -candidate.mse(hr)?,
        None => 0.0,
    };
    let detail = hf_energy(candidate) / hf_energy(lr_up).max(1e-12);
    let temporal = match flow {
        Some(f) => -warp_error_gt(candidate, f)? / WARP_SCALE,
        None => 0.0,
    };
    let s = w.fidelity * fidelity + w.detail * detail + w.temporal * temporal;
    if !s.is_finite() {
        return Err(Error::NonFinite("quality score".into()));
    }
    Ok(s)
}

/// Ranks decoded candidates for one dataset item.
pub trait Scorer: Sync {
    fn score(&self, candidate: &LatentVideo, pair: &VideoPair) -> Result<f64>;
}

/// [`quality_score`] with the HR reference and analytic flow of the item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyScorer {
    pub weights: ScoreWeights,
    pub use_reference: bool,
}

impl Scorer for ProxyScorer {
    fn score(&self, candidate: &LatentVideo, pair: &VideoPair) -> Result<f64> {
        let flow = gt_flow(&pair.scene);
        let hr = self.use_reference.then_some(&pair.hr);
        quality_score(candidate, &pair.lr_up, hr, Some(&flow), self.weights)
    }
}

/// `(argmax, argmin)` with ties going to the lowest index, or `None` when the
/// extremes are equal.
pub fn select_pair(scores: &[f64]) -> Option<(usize, usize)> {
    if scores.is_empty() {
        return None;
    }
    let (mut w, mut l) = (0, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[w] {
            w = i;
        }
        if s < scores[l] {
            l = i;
        }
    }
    (scores[w] > scores[l]).then_some((w, l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub item: usize,
    pub cond: ConditionBundle,
    pub z_w: LatentVideo,
    pub z_l: LatentVideo,
    pub score_w: f64,
    pub score_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSet {
    pub pairs: Vec<PreferencePair>,
    /// Items whose candidates all scored the same.
    pub skipped: Vec<usize>,
}

/// One preference pair per item of the first `cfg.pairs_total` entries of
/// `items`. Candidates for item `i` use `derive_seed(seed, Candidates, i)`.
pub fn build_preference_dataset(
    student: &DenoiserParams,
    items: &[VideoPair],
    codec: &dyn Codec,
    scorer: &dyn Scorer,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<PreferenceSet> {
    cfg.validate()?;
    let n = items.len().min(cfg.pairs_total);
    let built = map_indexed(n, |i| {
        let pair = &items[i];
        let raw = pair.condition();
        let cond = ConditionBundle::new(codec.encode(&raw.lr_latent)?, raw.label);
        let cands = generate_candidates(student, &cond, cfg.candidates, derive_seed(seed, Stream::Candidates, i as u64))?;
        let scores = cands
            .iter()
            .map(|z| scorer.score(&codec.decode(z)?.clamp(0.0, 1.0), pair))
            .collect::<Result<Vec<f64>>>()?;
        Ok(select_pair(&scores).map(|(w, l)| PreferencePair {
            item: i,
            cond,
            z_w: cands[w].clone(),
            z_l: cands[l].clone(),
            score_w: scores[w],
            score_l: scores[l],
        }))
    })?;
    let mut out = PreferenceSet { pairs: Vec::new(), skipped: Vec::new() };
    for (i, p) in built.into_iter().enumerate() {
        match p {
            Some(p) => out.pairs.push(p),
            None => out.skipped.push(i),
        }
    }
    Ok(out)
}

/// `(inner, -log σ(inner))` from the four per-branch squared errors.
pub fn dpo_objective(student_w: f64, ref_w: f64, student_l: f64, ref_l: f64, beta: f64) -> (f64, f64) {
    let inner = -0.5 * beta * ((student_w - ref_w) - (student_l - ref_l));
    (inner, softplus(-inner))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

struct Branch {
    z_t: LatentVideo,
    target: LatentVideo,
    ref_err: f64,
}

fn branch(reference: &DenoiserParams, z0: &LatentVideo, t: Timestep, eps: &LatentVideo, cond: &ConditionBundle) -> Result<Branch> {
    z0.ensure_same_shape(eps)?;
    let z_t = diffuse(z0, eps, t)?;
    let target = velocity_target(z0, eps)?;
    let ref_err = denoise(reference, &z_t, t, cond)?.mse(&target)?;
    Ok(Branch { z_t, target, ref_err })
}

/// Records the loss and returns `(loss, inner)` handles.
fn dpo_graph(
    student: &DenoiserParams,
    tape: &mut Tape,
    vars: &[Var],
    branches: [&Branch; 2],
    t: Timestep,
    cond: &ConditionBundle,
    beta: f64,
) -> Result<(Var, Var)> {
    let mut diffs = Vec::with_capacity(2);
    for b in branches {
        let x = video_node(tape, &b.z_t, false);
        let out = student.forward(tape, vars, x, t, cond)?;
        let target = video_node(tape, &b.target, false);
        let err = tape.mse(out.velocity, target);
        diffs.push(tape.offset(err, -b.ref_err));
    }
    let inner = tape.combine(&[(-0.5 * beta, diffs[0]), (0.5 * beta, diffs[1])]);
    let neg = tape.scale(inner, -1.0);
    Ok((tape.softplus(neg), inner))
}

/// Loss, inner margin and student gradient for one pair at a shared `(t, eps)`.
/// The reference only enters through constants.
pub fn dpo_grad(
    student: &DenoiserParams,
    reference: &DenoiserParams,
    pair: &PreferencePair,
    t: Timestep,
    eps: &LatentVideo,
    beta: f64,
) -> Result<(f64, f64, Gradient)> {
    let bw = branch(reference, &pair.z_w, t, eps, &pair.cond)?;
    let bl = branch(reference, &pair.z_l, t, eps, &pair.cond)?;
    let mut inner_value = 0.0;
    let (loss, g) = loss_and_grad(&student.set, |tape, vars| {
        let (loss, inner) = dpo_graph(student, tape, vars, [&bw, &bl], t, &pair.cond, beta)?;
        inner_value = tape.scalar(inner);
        Ok(loss)
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("dpo loss".into()));
    }
    Ok((loss, inner_value, g))
}

/// `(loss, inner)` without gradients.
pub fn dpo_loss(
    student: &DenoiserParams,
    reference: &DenoiserParams,
    pair: &PreferencePair,
    t: Timestep,
    eps: &LatentVideo,
    beta: f64,
) -> Result<(f64, f64)> {
    let bw = branch(reference, &pair.z_w, t, eps, &pair.cond)?;
    let bl = branch(reference, &pair.z_l, t, eps, &pair.cond)?;
    let sw = denoise(student, &bw.z_t, t, &pair.cond)?.mse(&bw.target)?;
    let sl = denoise(student, &bl.z_t, t, &pair.cond)?.mse(&bl.target)?;
    let (inner, loss) = dpo_objective(sw, bw.ref_err, sl, bl.ref_err, beta);
    if !loss.is_finite() {
        return Err(Error::NonFinite("dpo loss".into()));
    }
    Ok((loss, inner))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage3State {
    pub student: DenoiserParams,
    pub reference: DenoiserParams,
    pub opt: Adam,
    pub iteration: u64,
}

impl Stage3State {
    pub fn new(student: DenoiserParams, cfg: &Stage3Config) -> Self {
        let opt = Adam::new(cfg.adam, &student.set);
        Self { reference: student.clone(), student, opt, iteration: 0 }
    }

    pub fn step(&mut self, cfg: &Stage3Config, pairs: &[PreferencePair], seed: u64) -> Result<LogRow> {
        if pairs.is_empty() {
            return Err(Error::Contract("stage 3 needs at least one preference pair".into()));
        }
        let mut rng = prng(seed, Stream::Stage3, self.iteration);
        let idx = sample_indices(&mut rng, pairs.len(), cfg.batch);
        let draws = idx
            .into_iter()
            .map(|i| {
                let t = Timestep::new(uniform(&mut rng, cfg.t_range.0, cfg.t_range.1))?;
                Ok((i, t, normal_video(pairs[i].z_w.shape(), &mut rng)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (student, reference) = (&self.student, &self.reference);
        let parts = map_indexed(draws.len(), |k| {
            let (i, t, ref eps) = draws[k];
            dpo_grad(student, reference, &pairs[i], t, eps, cfg.beta)
        })?;
        let inner = parts.iter().map(|p| p.1).sum::<f64>() / parts.len() as f64;
        let (loss, grad) = mean_of(parts.into_iter().map(|(l, _, g)| (l, g)).collect());
        check_finite(loss, "stage3", self.iteration)?;
        let norm = self.opt.update(&mut self.student.set, &grad);
        check_finite(norm, "stage3", self.iteration)?;
        let row = LogRow { iteration: self.iteration, phase: "stage3".into(), values: alloc::vec![loss, inner, norm] };
        self.iteration += 1;
        Ok(row)
    }
}

/// Fine-tunes `init` on `pairs`; the reference is a frozen copy of `init`.
pub fn run_stage3(init: &DenoiserParams, pairs: &[PreferencePair], cfg: &Stage3Config, seed: u64) -> Result<(Stage3State, TrainLog)> {
    cfg.validate()?;
    let mut state = Stage3State::new(init.clone(), cfg);
    let mut log = TrainLog::new(&LOG_COLUMNS);
    while state.iteration < cfg.iterations {
        log.push(state.step(cfg, pairs, seed)?);
    }
    Ok((state, log))
}

/// Mean inner margin over `pairs`, one fixed `(t, eps)` draw per pair.
pub fn mean_inner_margin(
    student: &DenoiserParams,
    reference: &DenoiserParams,
    pairs: &[PreferencePair],
    cfg: &Stage3Config,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("no preference pairs".into()));
    }
    let inner = map_indexed(pairs.len(), |i| {
        let mut rng = prng(seed, Stream::Eval, 0x3000 + i as u64);
        let t = Timestep::new(uniform(&mut rng, cfg.t_range.0, cfg.t_range.1))?;
        let eps = normal_video(pairs[i].z_w.shape(), &mut rng);
        Ok(dpo_loss(student, reference, &pairs[i], t, &eps, cfg.beta)?.1)
    })?;
    Ok(inner.iter().sum::<f64>() / inner.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blur_video, render_scene, SceneRanges, SceneSpec};
    use crate::denoiser::{init_params, DenoiserConfig, IdentityCodec};
    use crate::flow::CondLabel;
    use crate::train::{grad_check_model, jitter};
    use crate::video::Shape;
    use proptest::prelude::*;

    fn tiny_shape() -> Shape {
        Shape::new(2, 4, 4, 1)
    }

    fn pair(seed: u64) -> PreferencePair {
        let mut rng = prng(seed, Stream::Oracle, 1);
        let s = tiny_shape();
        PreferencePair {
            item: 0,
            cond: ConditionBundle::new(normal_video(s, &mut rng), CondLabel::Class(1)),
            z_w: normal_video(s, &mut rng),
            z_l: normal_video(s, &mut rng),
            score_w: 1.0,
            score_l: 0.0,
        }
    }

    fn models() -> (DenoiserParams, DenoiserParams) {
        let mut reference = init_params(&DenoiserConfig::tiny(), 3).unwrap();
        jitter(&mut reference.set, 0.05, 1);
        let mut student = reference.clone();
        jitter(&mut student.set, 0.05, 2);
        (student, reference)
    }

    #[test]
    fn objective_examples() {
        let (inner, loss) = dpo_objective(0.1, 0.3, 0.3, 0.1, 2.0);
        assert!((inner - 0.4).abs() < 1e-15);
        assert!((loss - 0.513015).abs() < 1e-6, "{loss}");
        assert_eq!(dpo_objective(0.2, 0.2, 0.7, 0.7, 500.0), (0.0, core::f64::consts::LN_2));
        let xs = [-3.0, -0.5, 0.0, 0.1, 2.0];
        for w in xs.windows(2) {
            assert!(softplus(-w[1]) < softplus(-w[0]));
        }
    }

    #[test]
    fn identical_models_give_ln2() {
        let (_, reference) = models();
        for seed in 0..4 {
            let p = pair(seed);
            let mut rng = prng(seed, Stream::Oracle, 2);
            let eps = normal_video(tiny_shape(), &mut rng);
            let t = Timestep::new(0.1 + 0.2 * seed as f64).unwrap();
            let (loss, inner, _) = dpo_grad(&reference, &reference, &p, t, &eps, 500.0).unwrap();
            assert_eq!(inner, 0.0);
            assert_eq!(loss, core::f64::consts::LN_2);
            assert_eq!(dpo_loss(&reference, &reference, &p, t, &eps, 500.0).unwrap(), (loss, inner));
        }
    }

    #[test]
    fn swapping_pairs_costs_at_least_2_ln2() {
        let (student, reference) = models();
        for seed in 0..4 {
            let p = pair(seed);
            let swapped = PreferencePair { z_w: p.z_l.clone(), z_l: p.z_w.clone(), ..p.clone() };
            let eps = normal_video(tiny_shape(), &mut prng(seed, Stream::Oracle, 3));
            let t = Timestep::new(0.6).unwrap();
            let (a, ia) = dpo_loss(&student, &reference, &p, t, &eps, 50.0).unwrap();
            let (b, ib) = dpo_loss(&student, &reference, &swapped, t, &eps, 50.0).unwrap();
            assert!((ia + ib).abs() < 1e-12);
            assert!(a + b >= 2.0 * core::f64::consts::LN_2);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (student, reference) = models();
        let p = pair(9);
        let eps = normal_video(tiny_shape(), &mut prng(9, Stream::Oracle, 4));
        let t = Timestep::new(0.7).unwrap();
        let (l, _, g) = dpo_grad(&student, &reference, &p, t, &eps, 20.0).unwrap();
        assert!((l - dpo_loss(&student, &reference, &p, t, &eps, 20.0).unwrap().0).abs() < 1e-12);
        let r = grad_check_model(&student, &g, |s| Ok(dpo_loss(s, &reference, &p, t, &eps, 20.0)?.0), 5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn blurring_lowers_the_detail_term() {
        let w = ScoreWeights { fidelity: 0.0, detail: 1.0, temporal: 0.0 };
        let mut lower = 0;
        for seed in 0..50 {
            let spec = SceneSpec::random(seed, Shape::new(2, 24, 24, 3), &SceneRanges::default());
            let v = render_scene(&spec).unwrap();
            let lr = blur_video(&v, 2.0);
            let blurred = blur_video(&v, 1.0);
            if quality_score(&blurred, &lr, None, None, w).unwrap() < quality_score(&v, &lr, None, None, w).unwrap() {
                lower += 1;
            }
        }
        assert!(lower >= 48, "{lower}");
    }

    #[test]
    fn score_examples() {
        let spec = SceneSpec::random(4, Shape::new(3, 16, 16, 3), &SceneRanges::default());
        let hr = render_scene(&spec).unwrap();
        let lr = blur_video(&hr, 1.5);
        let flow = gt_flow(&spec);
        let fid = ScoreWeights { fidelity: 1.0, detail: 0.0, temporal: 0.0 };
        assert_eq!(quality_score(&hr, &lr, Some(&hr), None, fid).unwrap(), 0.0);
        assert!(quality_score(&lr, &lr, Some(&hr), None, fid).unwrap() < 0.0);
        let w = ScoreWeights::default();
        let a = quality_score(&lr, &lr, Some(&hr), Some(&flow), w).unwrap();
        assert_eq!(a, quality_score(&lr, &lr, Some(&hr), Some(&flow), w).unwrap());
    }

    #[test]
    fn select_pair_examples() {
        assert_eq!(select_pair(&[0.1, 0.5, 0.5, -1.0, -1.0]), Some((1, 3)));
        assert_eq!(select_pair(&[2.0, 2.0]), None);
        assert_eq!(select_pair(&[]), None);
    }

    proptest! {
        #[test]
        fn select_pair_ignores_order_of_distinct_scores(
            scores in prop::collection::hash_set(-1000i32..1000, 2..8),
            rot in 0usize..8,
        ) {
            let s: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let mut p = s.clone();
            p.rotate_left(rot % s.len());
            p.reverse();
            let (w, l) = select_pair(&s).unwrap();
            let (pw, pl) = select_pair(&p).unwrap();
            prop_assert_eq!((s[w], s[l]), (p[pw], p[pl]));
            prop_assert!(s[w] > s[l]);
        }

        #[test]
        fn swapped_objective_is_convex_bound(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0, beta in 0.1f64..100.0) {
            let (i1, l1) = dpo_objective(a, b, c, d, beta);
            let (i2, l2) = dpo_objective(c, d, a, b, beta);
            prop_assert!((i1 + i2).abs() <= 1e-9 * (1.0 + i1.abs()));
            prop_assert!(l1 + l2 >= 2.0 * core::f64::consts::LN_2 - 1e-12);
        }
    }

    #[test]
    fn preference_dataset_contract() {
        let cfg = crate::data::DatasetConfig { shape: Shape::new(2, 8, 8, 1), val: 1, test: 1, ..Default::default() };
        let data = crate::data::make_dataset(6, &cfg, 3).unwrap();
        let model = DenoiserConfig { num_classes: 4, ..DenoiserConfig::tiny() };
        let mut student = init_params(&model, 1).unwrap();
        jitter(&mut student.set, 0.1, 4);
        let scfg = Stage3Config { candidates: 3, pairs_total: 3, ..Default::default() };
        let scorer = ProxyScorer { weights: scfg.weights, use_reference: true };
        let build = || build_preference_dataset(&student, data.train(), &IdentityCodec, &scorer, &scfg, 8).unwrap();
        let a = build();
        assert_eq!(a, build());
        assert_eq!(a.pairs.len() + a.skipped.len(), 3);
        for p in &a.pairs {
            assert!(p.score_w > p.score_l);
            assert_ne!(p.z_w, p.z_l);
        }
        let cands = generate_candidates(&student, &a.pairs[0].cond, 3, 11).unwrap();
        assert_eq!(cands, generate_candidates(&student, &a.pairs[0].cond, 3, 11).unwrap());
        assert!(cands[0] != cands[1] && cands[1] != cands[2]);
        assert!(generate_candidates(&student, &a.pairs[0].cond, 1, 11).is_err());

        let tcfg = Stage3Config { iterations: 3, batch: 2, beta: 5.0, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..scfg };
        let (state, log) = run_stage3(&student, &a.pairs, &tcfg, 2).unwrap();
        assert_eq!(log.rows[0].values[1], 0.0);
        assert!(state.reference.set.bitwise_eq(&student.set));
        assert_eq!(mean_inner_margin(&student, &student, &a.pairs, &tcfg, 1).unwrap(), 0.0);
    }
}
