//! One-dimensional Gaussian bench for the score and distribution-matching
//! machinery.
//!
//! The target is `N(0, 1)` and the student pushes `eps` through
//! `x0 = mu + sigma eps`. Both diffused marginals stay Gaussian, so the exact
//! posterior velocities are available, and the KL between them can be
//! integrated numerically to give a reference gradient that shares no code
//! with the estimators under test.

use alloc::vec;
use alloc::vec::Vec;

use crate::dual::dmd_grad;
use crate::error::{Error, Result};
use crate::flow::{predict_clean, score_from_velocity};
use crate::rng::{normal, prng, Prng, Stream};
use crate::video::{LatentVideo, Shape, Timestep};

/// A Gaussian pushforward at `(mu, sigma)` evaluated at diffusion time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Probe {
    pub mu: f64,
    pub sigma: f64,
    pub t: f64,
}

impl Probe {
    pub const fn new(mu: f64, sigma: f64, t: f64) -> Self {
        Self { mu, sigma, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OracleConfig {
    pub grid_points: usize,
    pub grid_times: Vec<f64>,
    pub samples: usize,
    pub probes: Vec<Probe>,
    /// Coordinates per sample when forming the normalized direction.
    pub sample_dim: usize,
    pub flow_steps: usize,
    pub flow_lr: f64,
    pub flow_samples: usize,
    pub flow_start: (f64, f64),
    pub flow_times: Vec<f64>,
    pub seed: u64,
    pub tol_score: f64,
    pub tol_estimator: f64,
    pub tol_cosine: f64,
    pub tol_flow: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_points: 201,
            grid_times: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            samples: 100_000,
            probes: vec![
                Probe::new(1.0, 1.0, 0.5),
                Probe::new(-0.8, 1.3, 0.3),
                Probe::new(0.5, 0.6, 0.7),
                Probe::new(2.0, 1.5, 0.2),
                Probe::new(0.0, 2.0, 0.5),
                Probe::new(1.5, 0.8, 0.85),
            ],
            sample_dim: 64,
            flow_steps: 500,
            flow_lr: 0.5,
            flow_samples: 2048,
            flow_start: (1.5, 0.5),
            flow_times: vec![0.2, 0.35, 0.5, 0.65, 0.8],
            seed: 0,
            tol_score: 1e-4,
            tol_estimator: 0.05,
            tol_cosine: 0.99,
            tol_flow: 0.05,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let times_ok = |ts: &[f64]| !ts.is_empty() && ts.iter().all(|t| *t > 0.0 && *t < 1.0);
        let ok = self.grid_points >= 2
            && times_ok(&self.grid_times)
            && times_ok(&self.flow_times)
            && self.samples >= self.sample_dim
            && self.sample_dim > 0
            && self.flow_samples > 0
            && self.flow_lr > 0.0
            && self.flow_start.1 > 0.0
            && self.probes.iter().all(|p| p.sigma > 0.0 && p.t > 0.0 && p.t < 1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("invalid oracle settings {self:?}")))
        }
    }
}

/// Mean and variance of the diffused student marginal `(1 - t) x0 + t eps`.
fn marginal(mu: f64, sigma: f64, t: f64) -> (f64, f64) {
    let a = 1.0 - t;
    (a * mu, a * a * sigma * sigma + t * t)
}

/// Exact `E[eps - x0 | z_t = z]` for `x0 ~ N(mu, sigma^2)`.
pub fn posterior_velocity(z: f64, mu: f64, sigma: f64, t: f64) -> f64 {
    let (m, var) = marginal(mu, sigma, t);
    let r = (z - m) / var;
    let e_eps = t * r;
    let e_x0 = mu + (1.0 - t) * sigma * sigma * r;
    e_eps - e_x0
}

/// `d/dz log N(z; m, var)`.
pub fn gaussian_score(z: f64, mu: f64, sigma: f64, t: f64) -> f64 {
    let (m, var) = marginal(mu, sigma, t);
    -(z - m) / var
}

fn log_density(z: f64, m: f64, var: f64) -> f64 {
    -0.5 * (libm::log(2.0 * core::f64::consts::PI * var) + (z - m) * (z - m) / var)
}

/// `KL(student_t || target_t)` by composite Simpson quadrature over
/// `m ± 12 sd` of the student marginal.
pub fn kl_quadrature(mu: f64, sigma: f64, t: f64) -> f64 {
    let (m, var) = marginal(mu, sigma, t);
    let (m0, var0) = marginal(0.0, 1.0, t);
    let sd = libm::sqrt(var);
    let n = 4000usize;
    let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let lp = log_density(z, m, var);
        let f = libm::exp(lp) * (lp - log_density(z, m0, var0));
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f;
    }
    acc * h / 3.0
}

/// Central differences of [`kl_quadrature`] in `(mu, sigma)`.
pub fn kl_gradient_oracle(p: Probe) -> [f64; 2] {
    let h = 1e-4;
    let d_mu = (kl_quadrature(p.mu + h, p.sigma, p.t) - kl_quadrature(p.mu - h, p.sigma, p.t)) / (2.0 * h);
    let d_sigma = (kl_quadrature(p.mu, p.sigma + h, p.t) - kl_quadrature(p.mu, p.sigma - h, p.t)) / (2.0 * h);
    [d_mu, d_sigma]
}

fn video(data: Vec<f64>) -> LatentVideo {
    LatentVideo::from_raw(Shape::new(1, 1, data.len(), 1), data)
}

/// Largest relative error of `score_from_velocity` applied to the exact
/// posterior velocity against the analytic score, over `points` values of `z`
/// in `[-4, 4]` at each time.
pub fn score_identity_error(points: usize, times: &[f64]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &t in times {
        let zs: Vec<f64> = (0..points).map(|i| -4.0 + 8.0 * i as f64 / (points - 1) as f64).collect();
        for (mu, sigma) in [(0.0, 1.0), (0.7, 0.5)] {
            let v = video(zs.iter().map(|&z| posterior_velocity(z, mu, sigma, t)).collect());
            let s = score_from_velocity(&video(zs.clone()), &v, Timestep::new(t)?)?;
            for (k, &z) in zs.iter().enumerate() {
                let exact = gaussian_score(z, mu, sigma, t);
                let err = (s.as_slice()[k] - exact).abs() / exact.abs().max(1e-8);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

struct Batch {
    eps: Vec<f64>,
    z_t: Vec<f64>,
    x0: Vec<f64>,
}

fn draw(p: Probe, n: usize, rng: &mut Prng) -> Batch {
    let mut b = Batch { eps: Vec::with_capacity(n), z_t: Vec::with_capacity(n), x0: Vec::with_capacity(n) };
    for _ in 0..n {
        let e = normal(rng);
        let x0 = p.mu + p.sigma * e;
        b.z_t.push((1.0 - p.t) * x0 + p.t * normal(rng));
        b.eps.push(e);
        b.x0.push(x0);
    }
    b
}

/// Reparameterized estimate of `grad_(mu, sigma) KL`:
/// `E[-(s_real - s_fake) (1 - t) d x0 / d theta]`, with both scores obtained
/// through `score_from_velocity` from exact posterior velocities.
pub fn kl_gradient_estimate(p: Probe, n: usize, rng: &mut Prng) -> Result<[f64; 2]> {
    let b = draw(p, n, rng);
    let t = Timestep::new(p.t)?;
    let zt = video(b.z_t.clone());
    let vr = video(b.z_t.iter().map(|&z| posterior_velocity(z, 0.0, 1.0, p.t)).collect());
    let vf = video(b.z_t.iter().map(|&z| posterior_velocity(z, p.mu, p.sigma, p.t)).collect());
    let sr = score_from_velocity(&zt, &vr, t)?;
    let sf = score_from_velocity(&zt, &vf, t)?;
    let mut g = [0.0; 2];
    for i in 0..n {
        let w = -(sr.as_slice()[i] - sf.as_slice()[i]) * (1.0 - p.t);
        g[0] += w;
        g[1] += w * b.eps[i];
    }
    Ok([g[0] / n as f64, g[1] / n as f64])
}

/// Parameter direction implied by the normalized distribution-matching
/// gradient, with each sample a `dim`-coordinate vector.
pub fn normalized_direction(p: Probe, n: usize, dim: usize, rng: &mut Prng) -> Result<[f64; 2]> {
    let t = Timestep::new(p.t)?;
    let mut g = [0.0; 2];
    let samples = n / dim;
    for _ in 0..samples {
        let b = draw(p, dim, rng);
        let zt = video(b.z_t.clone());
        let vr = video(b.z_t.iter().map(|&z| posterior_velocity(z, 0.0, 1.0, p.t)).collect());
        let vf = video(b.z_t.iter().map(|&z| posterior_velocity(z, p.mu, p.sigma, p.t)).collect());
        let z0r = predict_clean(&zt, &vr, t)?;
        let z0f = predict_clean(&zt, &vf, t)?;
        let grad = dmd_grad(&video(b.x0.clone()), &z0f, &z0r, 1e-6)?;
        for (k, gk) in grad.as_slice().iter().enumerate() {
            g[0] += gk;
            g[1] += gk * b.eps[k];
        }
    }
    let n = (samples * dim) as f64;
    Ok([g[0] / n, g[1] / n])
}

fn norm(v: [f64; 2]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1])
}

pub fn cosine(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] * b[0] + a[1] * b[1]) / (norm(a) * norm(b))
}

/// `‖a - b‖ / ‖b‖`.
pub fn relative_error(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1]]) / norm(b)
}

/// Gradient descent on `(mu, sigma)` with the Monte-Carlo estimator averaged
/// over `times`. Returns the trajectory including the start.
pub fn gradient_flow(cfg: &OracleConfig) -> Result<Vec<(f64, f64)>> {
    let (mut mu, mut sigma) = cfg.flow_start;
    let mut path = vec![(mu, sigma)];
    for step in 0..cfg.flow_steps {
        let mut rng = prng(cfg.seed, Stream::Oracle, 0x10_0000 + step as u64);
        let mut g = [0.0; 2];
        for &t in &cfg.flow_times {
            let gi = kl_gradient_estimate(Probe::new(mu, sigma, t), cfg.flow_samples, &mut rng)?;
            g[0] += gi[0] / cfg.flow_times.len() as f64;
            g[1] += gi[1] / cfg.flow_times.len() as f64;
        }
        mu -= cfg.flow_lr * g[0];
        sigma = (sigma - cfg.flow_lr * g[1]).max(1e-3);
        path.push((mu, sigma));
    }
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub probe: Probe,
    pub oracle: [f64; 2],
    pub estimate: [f64; 2],
    pub rel_error: f64,
    pub direction: [f64; 2],
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub score_max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
    /// Estimator at the matched point `(0, 1, 0.5)`.
    pub matched_estimate: [f64; 2],
    pub flow_final: (f64, f64),
    pub score_pass: bool,
    pub estimator_pass: bool,
    pub cosine_pass: bool,
    pub flow_pass: bool,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.score_pass && self.estimator_pass && self.cosine_pass && self.flow_pass
    }
}

pub fn gaussian_oracle_bench(cfg: &OracleConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let score_max_rel_error = score_identity_error(cfg.grid_points, &cfg.grid_times)?;
    let mut probes = Vec::with_capacity(cfg.probes.len());
    for (i, &p) in cfg.probes.iter().enumerate() {
        let oracle = kl_gradient_oracle(p);
        if !(oracle[0].is_finite() && oracle[1].is_finite()) {
            return Err(Error::NonFinite(alloc::format!("quadrature at {p:?}")));
        }
        let estimate = kl_gradient_estimate(p, cfg.samples, &mut prng(cfg.seed, Stream::Oracle, 2 * i as u64))?;
        let direction = normalized_direction(p, cfg.samples, cfg.sample_dim, &mut prng(cfg.seed, Stream::Oracle, 2 * i as u64 + 1))?;
        probes.push(ProbeResult {
            probe: p,
            oracle,
            estimate,
            rel_error: relative_error(estimate, oracle),
            direction,
            cosine: cosine(direction, oracle),
        });
    }
    let matched_estimate = kl_gradient_estimate(Probe::new(0.0, 1.0, 0.5), cfg.samples, &mut prng(cfg.seed, Stream::Oracle, 0xFFFF))?;
    let flow_final = *gradient_flow(cfg)?.last().expect("start point");
    Ok(OracleReport {
        score_pass: score_max_rel_error < cfg.tol_score,
        estimator_pass: probes.iter().all(|r| r.rel_error < cfg.tol_estimator),
        cosine_pass: probes.iter().all(|r| r.cosine > cfg.tol_cosine),
        flow_pass: flow_final.0.abs() < cfg.tol_flow && (flow_final.1 - 1.0).abs() < cfg.tol_flow,
        score_max_rel_error,
        probes,
        matched_estimate,
        flow_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form Gaussian KL, used only to validate the quadrature.
    fn kl_closed(mu: f64, sigma: f64, t: f64) -> f64 {
        let (m, v) = marginal(mu, sigma, t);
        let (m0, v0) = marginal(0.0, 1.0, t);
        0.5 * (v / v0 + (m - m0) * (m - m0) / v0 - 1.0 + libm::log(v0 / v))
    }

    #[test]
    fn quadrature_matches_closed_form() {
        for p in OracleConfig::default().probes {
            let (a, b) = (kl_quadrature(p.mu, p.sigma, p.t), kl_closed(p.mu, p.sigma, p.t));
            assert!((a - b).abs() < 1e-9 * (1.0 + b), "{p:?}: {a} vs {b}");
        }
        assert!(kl_quadrature(0.0, 1.0, 0.4).abs() < 1e-12);
    }

    #[test]
    fn posterior_velocity_matches_target_velocity_score() {
        // For the target, s(z) = -z / ((1-t)^2 + t^2).
        for t in [0.1, 0.5, 0.9] {
            for z in [-2.0, 0.3, 1.7] {
                let v = posterior_velocity(z, 0.0, 1.0, t);
                let s = -(z + (1.0 - t) * v) / t;
                assert!((s + z / ((1.0 - t) * (1.0 - t) + t * t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_identity_on_grid() {
        assert!(score_identity_error(201, &OracleConfig::default().grid_times).unwrap() < 1e-4);
    }

    #[test]
    fn estimator_matches_oracle_at_reference_point() {
        let p = Probe::new(1.0, 1.0, 0.5);
        let est = kl_gradient_estimate(p, 100_000, &mut prng(0, Stream::Oracle, 1)).unwrap();
        assert!(relative_error(est, kl_gradient_oracle(p)) < 0.05);
        let matched = kl_gradient_estimate(Probe::new(0.0, 1.0, 0.5), 100_000, &mut prng(0, Stream::Oracle, 2)).unwrap();
        assert_eq!(matched, [0.0, 0.0]);
        assert_eq!(kl_gradient_oracle(Probe::new(0.0, 1.0, 0.5)).map(|g| (g.abs() < 1e-8) as u8), [1, 1]);
    }
}
