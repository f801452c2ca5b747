//! Flow-matching primitives on the linear path `z_t = (1 - t) z_0 + t eps`.
//!
//! The network predicts the velocity `v = eps - z_0`. Everything here is a pure
//! function of its arguments.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::video::{LatentVideo, Timestep};

/// Conditioning label standing in for a text embedding. `Null` selects the
/// model's learned unconditional embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CondLabel {
    Class(u32),
    Null,
}

/// Side channel of every denoiser call: the upsampled LR latent plus a label.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub lr_latent: LatentVideo,
    pub label: CondLabel,
}

impl ConditionBundle {
    pub fn new(lr_latent: LatentVideo, label: CondLabel) -> Self {
        Self { lr_latent, label }
    }

    pub fn is_null(&self) -> bool {
        self.label == CondLabel::Null
    }

    /// Same LR latent with the null label.
    pub fn to_null(&self) -> Self {
        Self { lr_latent: self.lr_latent.clone(), label: CondLabel::Null }
    }
}

/// A diffused sample together with the noise draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub z_t: LatentVideo,
    pub t: Timestep,
    pub eps: LatentVideo,
}

impl NoisySample {
    pub fn new(z0: &LatentVideo, eps: LatentVideo, t: Timestep) -> Result<Self> {
        let z_t = diffuse(z0, &eps, t)?;
        Ok(Self { z_t, t, eps })
    }
}

pub fn diffuse(z0: &LatentVideo, eps: &LatentVideo, t: Timestep) -> Result<LatentVideo> {
    let t = t.get();
    z0.axpby(1.0 - t, eps, t)
}

pub fn velocity_target(z0: &LatentVideo, eps: &LatentVideo) -> Result<LatentVideo> {
    eps.sub(z0)
}

/// Inverts the interpolation given a velocity: `z_t - t v`.
pub fn predict_clean(z_t: &LatentVideo, v: &LatentVideo, t: Timestep) -> Result<LatentVideo> {
    z_t.axpby(1.0, v, -t.get())
}

/// `s = -(z_t + (1 - t) v) / t`. Undefined at `t = 0`.
pub fn score_from_velocity(z_t: &LatentVideo, v: &LatentVideo, t: Timestep) -> Result<LatentVideo> {
    let t = t.get();
    if t <= 0.0 {
        return Err(Error::Domain("score is undefined at t = 0".into()));
    }
    z_t.axpby(-1.0 / t, v, -(1.0 - t) / t)
}

/// Guided velocity `(1 + w) v_cond - w v_uncond`; `w = 0` is the plain
/// conditional prediction.
pub fn cfg_velocity(v_cond: &LatentVideo, v_uncond: &LatentVideo, w: f64) -> Result<LatentVideo> {
    if !(w >= 0.0) {
        return Err(Error::Domain(format!("guidance weight {w} must be non-negative")));
    }
    v_cond.axpby(1.0 + w, v_uncond, -w)
}

pub fn euler_step(z_t: &LatentVideo, v: &LatentVideo, t: Timestep, t_next: Timestep) -> Result<LatentVideo> {
    if t_next.get() > t.get() {
        return Err(Error::Contract(format!(
            "euler step must move toward data: t_next {} > t {}",
            t_next.get(),
            t.get()
        )));
    }
    z_t.axpby(1.0, v, t_next.get() - t.get())
}

/// Uniform grid `1, (K-1)/K, ..., 0` with `steps + 1` points.
pub fn uniform_schedule(steps: usize) -> Result<Vec<Timestep>> {
    if steps == 0 {
        return Err(Error::Contract("schedule needs at least one step".into()));
    }
    (0..=steps).rev().map(|i| Timestep::new(i as f64 / steps as f64)).collect()
}

fn check_schedule(schedule: &[Timestep]) -> Result<()> {
    if schedule.len() < 2 {
        return Err(Error::Contract("schedule needs at least two timesteps".into()));
    }
    if schedule[0].get() != 1.0 || schedule[schedule.len() - 1].get() != 0.0 {
        return Err(Error::Contract("schedule must run from t = 1 to t = 0".into()));
    }
    if schedule.windows(2).any(|w| w[1].get() >= w[0].get()) {
        return Err(Error::Contract("schedule must be strictly decreasing".into()));
    }
    Ok(())
}

/// Anything that can predict a velocity at `(z_t, t, cond)`.
pub trait VelocityField {
    fn velocity(&self, z_t: &LatentVideo, t: Timestep, cond: &ConditionBundle) -> Result<LatentVideo>;
}

impl<F> VelocityField for F
where
    F: Fn(&LatentVideo, Timestep, &ConditionBundle) -> Result<LatentVideo>,
{
    fn velocity(&self, z_t: &LatentVideo, t: Timestep, cond: &ConditionBundle) -> Result<LatentVideo> {
        self(z_t, t, cond)
    }
}

/// Euler integration of the probability-flow ODE from `eps` at `t = 1` down to `t = 0`.
pub fn sample<V: VelocityField + ?Sized>(
    field: &V,
    cond: &ConditionBundle,
    schedule: &[Timestep],
    eps: LatentVideo,
) -> Result<LatentVideo> {
    check_schedule(schedule)?;
    let mut z = eps;
    for pair in schedule.windows(2) {
        let v = field.velocity(&z, pair[0], cond)?;
        z = euler_step(&z, &v, pair[0], pair[1])?;
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("sample".into()));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Shape;
    use alloc::vec;
    use proptest::prelude::*;

    fn v1(values: &[f64]) -> LatentVideo {
        LatentVideo::new(Shape::new(1, 1, values.len(), 1), values.to_vec()).unwrap()
    }

    fn ts(t: f64) -> Timestep {
        Timestep::new(t).unwrap()
    }

    fn null_cond(n: usize) -> ConditionBundle {
        ConditionBundle::new(LatentVideo::zeros(Shape::new(1, 1, n, 1)), CondLabel::Null)
    }

    #[test]
    fn diffuse_examples() {
        let z = diffuse(&v1(&[1.0, 1.0]), &v1(&[0.0, 0.0]), ts(0.5)).unwrap();
        assert_eq!(z.as_slice(), &[0.5, 0.5]);
        let z0 = v1(&[0.3, -2.0]);
        let eps = v1(&[1.5, 0.25]);
        assert_eq!(diffuse(&z0, &eps, Timestep::ZERO).unwrap(), z0);
        assert_eq!(diffuse(&z0, &eps, Timestep::ONE).unwrap(), eps);
        assert!(diffuse(&z0, &v1(&[1.0]), ts(0.5)).is_err());
    }

    #[test]
    fn velocity_and_clean_examples() {
        let z0 = v1(&[0.7, -1.0]);
        assert!(velocity_target(&z0, &z0).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(velocity_target(&v1(&[1.0]), &v1(&[3.0])).unwrap().as_slice(), &[2.0]);
        let x = predict_clean(&v1(&[0.7]), &v1(&[0.4]), ts(0.5)).unwrap();
        assert!((x.as_slice()[0] - 0.5).abs() < 1e-15);
        let eps = v1(&[0.9, 0.1]);
        let v = v1(&[0.2, -0.3]);
        let at_one = predict_clean(&eps, &v, Timestep::ONE).unwrap();
        assert_eq!(at_one, eps.sub(&v).unwrap());
    }

    #[test]
    fn score_examples() {
        let s = score_from_velocity(&v1(&[0.0]), &v1(&[0.0]), ts(0.5)).unwrap();
        assert_eq!(s.as_slice(), &[0.0]);
        let z = v1(&[1.25, -0.5]);
        let s = score_from_velocity(&z, &v1(&[9.0, 9.0]), Timestep::ONE).unwrap();
        assert_eq!(s, z.scale(-1.0));
        assert!(matches!(score_from_velocity(&z, &z, Timestep::ZERO), Err(Error::Domain(_))));
    }

    #[test]
    fn cfg_examples() {
        let a = v1(&[0.3, -0.7]);
        assert_eq!(cfg_velocity(&a, &a, 0.0).unwrap(), a);
        assert_eq!(cfg_velocity(&v1(&[2.0]), &v1(&[1.0]), 1.0).unwrap().as_slice(), &[3.0]);
        for w in [0.0, 0.5, 3.0, 7.5] {
            let out = cfg_velocity(&a, &a, w).unwrap();
            for (x, y) in out.as_slice().iter().zip(a.as_slice()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + w));
            }
        }
        assert!(cfg_velocity(&a, &a, -1.0).is_err());
    }

    #[test]
    fn euler_examples() {
        let z = euler_step(&v1(&[1.0]), &v1(&[2.0]), ts(0.5), ts(0.25)).unwrap();
        assert_eq!(z.as_slice(), &[0.5]);
        let z_t = v1(&[0.4, 0.1]);
        assert_eq!(euler_step(&z_t, &v1(&[5.0, 5.0]), ts(0.3), ts(0.3)).unwrap(), z_t);
        assert!(matches!(euler_step(&z_t, &z_t, ts(0.3), ts(0.4)), Err(Error::Contract(_))));
        let v = v1(&[0.75, -0.5]);
        let one = euler_step(&z_t, &v, ts(1.0), ts(0.0)).unwrap();
        let half = euler_step(&euler_step(&z_t, &v, ts(1.0), ts(0.5)).unwrap(), &v, ts(0.5), ts(0.0)).unwrap();
        assert_eq!(one, half);
    }

    #[test]
    fn sample_one_exact_step_recovers_data() {
        let z0 = v1(&[0.2, 0.8, -0.4]);
        let eps = v1(&[1.0, -1.0, 0.5]);
        let target = velocity_target(&z0, &eps).unwrap();
        let field = |_: &LatentVideo, _: Timestep, _: &ConditionBundle| Ok(target.clone());
        let schedule = uniform_schedule(1).unwrap();
        let out = sample(&field, &null_cond(3), &schedule, eps.clone()).unwrap();
        for (a, b) in out.as_slice().iter().zip(z0.as_slice()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let direct = predict_clean(&eps, &target, Timestep::ONE).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn sample_rejects_bad_schedules() {
        let field = |z: &LatentVideo, _: Timestep, _: &ConditionBundle| Ok(z.clone());
        let eps = v1(&[0.0]);
        for bad in [vec![1.0, 0.5], vec![0.9, 0.0], vec![1.0, 0.5, 0.5, 0.0], vec![1.0, 0.2, 0.4, 0.0]] {
            let s: Vec<_> = bad.into_iter().map(ts).collect();
            assert!(sample(&field, &null_cond(1), &s, eps.clone()).is_err());
        }
    }

    proptest! {
        #[test]
        fn diffuse_is_homogeneous(a in -5.0f64..5.0, t in 0.0f64..=1.0,
                                  z in proptest::collection::vec(-3.0f64..3.0, 4),
                                  e in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let z0 = v1(&z);
            let eps = v1(&e);
            let lhs = diffuse(&z0.scale(a), &eps.scale(a), ts(t)).unwrap();
            let rhs = diffuse(&z0, &eps, ts(t)).unwrap().scale(a);
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn clean_prediction_round_trip(t in 0.0f64..=1.0,
                                       z in proptest::collection::vec(-3.0f64..3.0, 5),
                                       e in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let z0 = v1(&z);
            let eps = v1(&e);
            let z_t = diffuse(&z0, &eps, ts(t)).unwrap();
            let back = predict_clean(&z_t, &velocity_target(&z0, &eps).unwrap(), ts(t)).unwrap();
            for (x, y) in back.as_slice().iter().zip(z0.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn constant_velocity_steps_compose(t in 0.0f64..=1.0, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0,
                                           z in -3.0f64..3.0, v in -3.0f64..3.0) {
            let t_mid = t * f1;
            let t_end = t_mid * f2;
            let zv = v1(&[z]);
            let vv = v1(&[v]);
            let direct = euler_step(&zv, &vv, ts(t), ts(t_end)).unwrap();
            let two = euler_step(&euler_step(&zv, &vv, ts(t), ts(t_mid)).unwrap(), &vv, ts(t_mid), ts(t_end)).unwrap();
            prop_assert!((direct.as_slice()[0] - two.as_slice()[0]).abs() <= 1e-12);
        }
    }
}
