//! Named parameter arrays and an Adam optimizer over them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::rng::{normal, Prng};
use crate::tape::{Grads, Tape, Var};

/// An ordered collection of named 2-D parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> usize {
        assert_eq!(rows * cols, data.len());
        self.names.push(name.into());
        self.shapes.push((rows, cols));
        self.data.push(data);
        self.data.len() - 1
    }

    pub fn push_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Prng) -> usize {
        let data = (0..rows * cols).map(|_| std * normal(rng)).collect();
        self.push(name, rows, cols, data)
    }

    pub fn push_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn array(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn array_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, (usize, usize), &[f64])> {
        self.names.iter().zip(&self.shapes).zip(&self.data).map(|((n, s), d)| (n.as_str(), *s, d.as_slice()))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces array contents, keeping names and shapes.
    pub fn set_array(&mut self, i: usize, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data[i].len() {
            return Err(shape_err(self.data[i].len(), data.len()));
        }
        self.data[i] = data;
        Ok(())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    /// Bitwise equality, treating `-0.0` and `0.0` as different.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Loads every array onto the tape as tracked leaves or constants.
    pub fn load(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.data
            .iter()
            .zip(&self.shapes)
            .map(|(d, &(r, c))| if track { tape.leaf(r, c, d.clone()) } else { tape.constant(r, c, d.clone()) })
            .collect()
    }

    pub fn zeros_like(&self) -> Gradient {
        Gradient(self.data.iter().map(|d| vec![0.0; d.len()]).collect())
    }
}

/// Per-array gradient buffers matching a [`ParamSet`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<Vec<f64>>);

impl Gradient {
    /// Adds `scale * d/d(var)` for every loaded parameter; absent entries add nothing.
    pub fn accumulate(&mut self, grads: &Grads, vars: &[Var], scale: f64) {
        for (buf, &v) in self.0.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += scale * x;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().flat_map(|a| a.iter()).map(|v| v * v).sum())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|a| a.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.0 {
            for v in a.iter_mut() {
                *v *= k;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.data.iter().map(|d| vec![0.0; d.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet, grad: &Gradient) -> f64 {
        let norm = grad.norm();
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, g) in grad.0.iter().enumerate() {
            let p = &mut params.data[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                let gj = g[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("x", 1, 2, vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, clip_norm: 0.0, ..Default::default() }, &p);
        for _ in 0..500 {
            let g = Gradient(vec![p.array(0).iter().map(|x| 2.0 * x).collect()]);
            opt.update(&mut p, &g);
        }
        assert!(p.array(0).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_reports_unclipped_norm() {
        let mut p = ParamSet::new();
        p.push("x", 1, 1, vec![0.0]);
        let mut opt = Adam::new(AdamConfig { clip_norm: 1.0, ..Default::default() }, &p);
        let n = opt.update(&mut p, &Gradient(vec![vec![10.0]]));
        assert_eq!(n, 10.0);
    }
}
