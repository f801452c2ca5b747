//! Convolutional discriminator heads over concatenated backbone features.
//!
//! One head per feature level: a 3x3 spatial convolution over the token grid
//! (applied per temporal slice), SiLU, then a 1x1 convolution to a logit map.
//! The last layer starts at zero so the initial discriminator output is 0.

use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::FeatureStack;
use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::rng::{prng, Stream};
use crate::tape::{Tape, Var, PAD};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct HeadConfig {
    pub levels: usize,
    /// Channels per level after real/fake concatenation.
    pub in_channels: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHeads {
    pub config: HeadConfig,
    pub set: ParamSet,
}

pub fn init_heads(config: &HeadConfig, seed: u64) -> Result<DiscriminatorHeads> {
    if config.levels == 0 || config.in_channels == 0 || config.hidden == 0 {
        return Err(Error::InvalidConfig("discriminator head dimensions must be positive".into()));
    }
    let mut rng = prng(seed, Stream::Init, 0xD15C);
    let mut set = ParamSet::new();
    let fan = 9 * config.in_channels;
    for l in 0..config.levels {
        set.push_normal(&format!("head{l}.conv.w"), fan, config.hidden, 1.0 / libm::sqrt(fan as f64), &mut rng);
        set.push_zeros(&format!("head{l}.conv.b"), 1, config.hidden);
        set.push_zeros(&format!("head{l}.out.w"), config.hidden, 1);
        set.push_zeros(&format!("head{l}.out.b"), 1, 1);
    }
    Ok(DiscriminatorHeads { config: config.clone(), set })
}

/// im2col gather for a 3x3 same-padded convolution within each temporal slice.
fn im2col_index(grid: (usize, usize, usize), channels: usize) -> Vec<u32> {
    let (gt, gy, gx) = grid;
    let mut idx = Vec::with_capacity(gt * gy * gx * 9 * channels);
    for f in 0..gt {
        for y in 0..gy {
            for x in 0..gx {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        let inside = yy >= 0 && yy < gy as i64 && xx >= 0 && xx < gx as i64;
                        for c in 0..channels {
                            if inside {
                                let tok = (f * gy + yy as usize) * gx + xx as usize;
                                idx.push((tok * channels + c) as u32);
                            } else {
                                idx.push(PAD);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

impl DiscriminatorHeads {
    /// Records the heads on `tape`. Returns the per-level logit maps
    /// (`tokens x 1`) and the scalar `D`, the mean over levels and positions.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], features: &[Var], grid: (usize, usize, usize)) -> Result<(Vec<Var>, Var)> {
        let c = &self.config;
        if features.len() != c.levels {
            return Err(shape_err(c.levels, features.len()));
        }
        let tokens = grid.0 * grid.1 * grid.2;
        let index = im2col_index(grid, c.in_channels);
        let mut maps = Vec::with_capacity(c.levels);
        for (l, &f) in features.iter().enumerate() {
            if tape.shape(f) != (tokens, c.in_channels) {
                return Err(shape_err((tokens, c.in_channels), tape.shape(f)));
            }
            let cols = tape.gather(f, tokens, 9 * c.in_channels, index.clone());
            let h = tape.matmul(cols, vars[4 * l]);
            let h = tape.add_row(h, vars[4 * l + 1]);
            let h = tape.silu(h);
            let o = tape.matmul(h, vars[4 * l + 2]);
            maps.push(tape.add_row(o, vars[4 * l + 3]));
        }
        let all = if maps.len() == 1 { maps[0] } else { tape.concat_cols(&maps) };
        let d = tape.mean(all);
        Ok((maps, d))
    }
}

/// Evaluates the heads on materialized features. Returns the logit maps and `D`.
pub fn disc_forward(heads: &DiscriminatorHeads, features: &FeatureStack) -> Result<(Vec<Vec<f64>>, f64)> {
    if features.channels != heads.config.in_channels {
        return Err(shape_err(heads.config.in_channels, features.channels));
    }
    let mut tape = Tape::new();
    let vars = heads.set.load(&mut tape, false);
    let tokens = features.tokens();
    let fv: Vec<Var> = features.levels.iter().map(|l| tape.constant(tokens, features.channels, l.clone())).collect();
    let (maps, d) = heads.forward(&mut tape, &vars, &fv, features.grid)?;
    Ok((maps.iter().map(|&m| tape.value(m).to_vec()).collect(), tape.scalar(d)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;
    use alloc::vec;

    fn feats(scale: f64, seed: u64) -> FeatureStack {
        let mut rng = prng(seed, Stream::Eval, 1);
        let grid = (2, 3, 3);
        let levels = (0..2).map(|_| (0..18 * 4).map(|_| scale * normal(&mut rng)).collect()).collect();
        FeatureStack { grid, channels: 4, levels }
    }

    fn randomized_heads() -> DiscriminatorHeads {
        let cfg = HeadConfig { levels: 2, in_channels: 4, hidden: 5 };
        let mut h = init_heads(&cfg, 1).unwrap();
        let mut rng = prng(2, Stream::Eval, 2);
        for i in 0..h.set.len() {
            let n = h.set.array(i).len();
            h.set.set_array(i, (0..n).map(|_| 0.5 * normal(&mut rng)).collect()).unwrap();
        }
        h
    }

    #[test]
    fn zero_features_with_zero_final_layer_give_zero() {
        let cfg = HeadConfig { levels: 2, in_channels: 4, hidden: 5 };
        let h = init_heads(&cfg, 1).unwrap();
        let mut f = feats(1.0, 0);
        let (_, d) = disc_forward(&h, &f).unwrap();
        assert_eq!(d, 0.0);
        f.levels = vec![vec![0.0; 72]; 2];
        let (maps, d) = disc_forward(&h, &f).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].len(), 18);
    }

    #[test]
    fn heads_are_deterministic_and_non_constant() {
        let h = randomized_heads();
        let f = feats(1.0, 3);
        let (_, d1) = disc_forward(&h, &f).unwrap();
        let (_, d2) = disc_forward(&h, &f).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
        let doubled = FeatureStack { levels: f.levels.iter().map(|l| l.iter().map(|v| 2.0 * v).collect()).collect(), ..f.clone() };
        let (_, d3) = disc_forward(&h, &doubled).unwrap();
        assert!((d3 - d1).abs() > 1e-6);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let h = randomized_heads();
        let mut f = feats(1.0, 3);
        f.levels.pop();
        assert!(disc_forward(&h, &f).is_err());
        let wrong = FeatureStack { channels: 3, ..feats(1.0, 3) };
        assert!(disc_forward(&h, &wrong).is_err());
    }
}
