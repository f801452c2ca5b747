//! Dense video tensors laid out as `(frames, height, width, channels)`, row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Shape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels }
    }

    pub const fn numel(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    #[inline]
    pub const fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| d == 0) {
            return Err(Error::Contract(alloc::format!("zero-sized video shape {self:?}")));
        }
        Ok(())
    }
}

/// A (latent) video clip. Every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(shape_err(shape.numel(), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LatentVideo::new".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for fr in 0..shape.frames {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    for c in 0..shape.channels {
                        data.push(f(fr, y, x, c));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Wraps data produced by internal arithmetic without the finiteness scan.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.shape.index(f, y, x, c)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(self.shape, other.shape));
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Self::from_raw(self.shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Copies frame `f` out as an `(height, width, channels)` slice.
    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.shape.height * self.shape.width * self.shape.channels;
        &self.data[f * n..(f + 1) * n]
    }
}

/// Diffusion time in `[0, 1]`; `0` is clean data and `1` is pure noise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Timestep(f64);

impl Timestep {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(alloc::format!("timestep {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub const ZERO: Timestep = Timestep(0.0);
    pub const ONE: Timestep = Timestep(1.0);

    pub fn get(self) -> f64 {
        self.0
    }
}
