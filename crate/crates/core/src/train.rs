//! Plumbing shared by the training stages: encoded training items, batch
//! sampling, gradient evaluation on a fresh tape, logs, and a finite-difference
//! gradient checker.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::VideoPair;
use crate::denoiser::{Codec, DenoiserParams};
use crate::error::{Error, Result};
use crate::flow::ConditionBundle;
use crate::params::{Gradient, ParamSet};
use crate::rng::{normal, prng, Prng, Stream};
use crate::tape::{Tape, Var};
use crate::video::LatentVideo;
use rand::Rng;

/// A training example in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub z_hr: LatentVideo,
    pub cond: ConditionBundle,
}

pub fn encode_items(pairs: &[VideoPair], codec: &dyn Codec) -> Result<Vec<TrainItem>> {
    pairs
        .iter()
        .map(|p| {
            let cond = p.condition();
            Ok(TrainItem {
                z_hr: codec.encode(&p.hr)?,
                cond: ConditionBundle::new(codec.encode(&cond.lr_latent)?, cond.label),
            })
        })
        .collect()
}

/// `batch` indices drawn uniformly with replacement.
pub fn sample_indices(rng: &mut Prng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Evaluates `build` on a fresh tape with `params` tracked and returns the
/// scalar loss with its parameter gradient.
pub fn loss_and_grad(
    params: &ParamSet,
    build: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(f64, Gradient)> {
    let mut tape = Tape::new();
    let vars = params.load(&mut tape, true);
    let root = build(&mut tape, &vars)?;
    let loss = tape.scalar(root);
    let grads = tape.backward(root);
    let mut g = params.zeros_like();
    g.accumulate(&grads, &vars, 1.0);
    Ok((loss, g))
}

/// Same as [`loss_and_grad`] without recording gradients.
pub fn loss_only(params: &ParamSet, build: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.load(&mut tape, false);
    let root = build(&mut tape, &vars)?;
    Ok(tape.scalar(root))
}

/// Runs `f` over `0..n` and returns results in index order; fans out across
/// threads with the `parallel` feature.
pub fn map_indexed<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Batch mean of per-item `(loss, grad)` pairs, summed in index order.
pub fn mean_of(parts: Vec<(f64, Gradient)>) -> (f64, Gradient) {
    let n = parts.len() as f64;
    let mut it = parts.into_iter();
    let (mut loss, mut grad) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        grad.add_assign(&g);
    }
    grad.scale(1.0 / n);
    (loss / n, grad)
}

pub fn check_finite(value: f64, phase: &str, iteration: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { phase: phase.into(), iteration })
    }
}

/// One log row: iteration, phase tag, and values in the log's column order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub phase: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<&'static str>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn new(columns: &[&'static str]) -> Self {
        Self { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: LogRow) {
        debug_assert_eq!(row.values.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    /// Non-NaN values of `name` over rows whose phase satisfies `keep`.
    pub fn series(&self, name: &str, keep: impl Fn(&str) -> bool) -> Vec<f64> {
        let Some(i) = self.column(name) else { return Vec::new() };
        self.rows.iter().filter(|r| keep(&r.phase)).map(|r| r.values[i]).filter(|v| !v.is_nan()).collect()
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }
}

/// Adds `std * N(0, 1)` to every parameter; used to move gradient checks away
/// from zero-initialized layers.
pub fn jitter(set: &mut ParamSet, std: f64, seed: u64) {
    let mut rng = prng(seed, Stream::Oracle, 0x617);
    for i in 0..set.len() {
        for v in set.array_mut(i) {
            *v += std * normal(&mut rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` against central differences of `f` at a few
/// coordinates per array (the largest-gradient entry plus `per_array - 1`
/// random ones). Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    params: &ParamSet,
    analytic: &Gradient,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
    per_array: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut rng = prng(seed, Stream::Oracle, 0x6C);
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0, worst: None };
    let mut probe = params.clone();
    for a in 0..params.len() {
        let g = &analytic.0[a];
        if g.is_empty() {
            continue;
        }
        let mut coords = Vec::with_capacity(per_array);
        let top = (0..g.len()).max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs())).unwrap_or(0);
        coords.push(top);
        while coords.len() < per_array.min(g.len()) {
            coords.push(rng.random_range(0..g.len()));
        }
        for &i in &coords {
            let orig = params.array(a)[i];
            probe.array_mut(a)[i] = orig + step;
            let up = f(&probe)?;
            probe.array_mut(a)[i] = orig - step;
            let down = f(&probe)?;
            probe.array_mut(a)[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel >= out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = Some((String::from(params.name(a)), i, g[i], numeric));
            }
        }
    }
    Ok(out)
}

/// A denoiser-level convenience around [`grad_check`].
pub fn grad_check_model(
    params: &DenoiserParams,
    analytic: &Gradient,
    f: impl Fn(&DenoiserParams) -> Result<f64>,
    seed: u64,
) -> Result<GradCheck> {
    let mut probe = params.clone();
    grad_check(
        &params.set,
        analytic,
        |set| {
            probe.set = set.clone();
            f(&probe)
        },
        3,
        1e-5,
        1e-6,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn grad_check_accepts_exact_and_rejects_wrong_gradients() {
        let mut p = ParamSet::new();
        p.push("x", 1, 3, vec![0.3, -1.2, 2.0]);
        let f = |s: &ParamSet| Ok(s.array(0).iter().map(|v| v * v * v).sum::<f64>());
        let good = Gradient(vec![p.array(0).iter().map(|v| 3.0 * v * v).collect()]);
        let r = grad_check(&p, &good, f, 3, 1e-5, 1e-6, 0).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let bad = Gradient(vec![vec![1.0, 1.0, 1.0]]);
        assert!(grad_check(&p, &bad, f, 3, 1e-5, 1e-6, 0).unwrap().max_rel_error > 0.1);
    }

    #[test]
    fn log_series_filters_phase_and_nan() {
        let mut log = TrainLog::new(&["a", "b"]);
        log.push(LogRow { iteration: 0, phase: "x".into(), values: vec![1.0, f64::NAN] });
        log.push(LogRow { iteration: 1, phase: "y".into(), values: vec![2.0, 3.0] });
        assert_eq!(log.series("a", |_| true), vec![1.0, 2.0]);
        assert_eq!(log.series("b", |_| true), vec![3.0]);
        assert_eq!(log.series("a", |p| p == "y"), vec![2.0]);
        assert!(log.series("c", |_| true).is_empty());
    }

    #[test]
    fn mean_of_averages_losses_and_gradients() {
        let parts = vec![(1.0, Gradient(vec![vec![2.0]])), (3.0, Gradient(vec![vec![4.0]]))];
        let (l, g) = mean_of(parts);
        assert_eq!(l, 2.0);
        assert_eq!(g.0, vec![vec![3.0]]);
    }
}
