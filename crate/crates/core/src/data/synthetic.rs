//! Procedural translating-texture sequences.

use std::f64::consts::TAU;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imaging::Frame;
use crate::scalar::Real;

/// Sequences of a random sinusoid texture moving at constant velocity.
///
/// The texture is evaluated analytically, so sub-pixel motion involves no
/// resampling. Frame `s` of `n` shows the texture displaced by `s/(n-1) · v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatingTextures {
    pub size: usize,
    /// Largest displacement between the first and last frame, in pixels.
    pub max_motion: f64,
    pub components: usize,
    pub min_wavelength: f64,
    pub max_wavelength: f64,
}

impl Default for TranslatingTextures {
    fn default() -> Self {
        Self {
            size: 64,
            max_motion: 8.0,
            components: 6,
            min_wavelength: 6.0,
            max_wavelength: 24.0,
        }
    }
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

impl TranslatingTextures {
    /// One sequence of `frames` frames, deterministic in `seed`, and its total motion `(dx, dy)`.
    pub fn sequence<T: Real>(&self, frames: usize, seed: u64) -> Result<(Vec<Frame<T>>, [f64; 2])> {
        ensure!(frames >= 2, "a sequence needs at least 2 frames");
        ensure!(self.size >= 1 && self.components >= 1, "empty texture");
        ensure!(
            0.0 < self.min_wavelength && self.min_wavelength <= self.max_wavelength,
            "invalid wavelength range"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<Wave> = (0..self.components)
            .map(|_| {
                let lambda = rng.random_range(self.min_wavelength..=self.max_wavelength);
                let angle = rng.random_range(0.0..TAU);
                Wave {
                    kx: TAU / lambda * angle.cos(),
                    ky: TAU / lambda * angle.sin(),
                    phase: rng.random_range(0.0..TAU),
                    amp: [rng.random(), rng.random(), rng.random()],
                }
            })
            .collect();
        let norm = [0, 1, 2].map(|c| waves.iter().map(|w| w.amp[c]).sum::<f64>().max(1e-9));
        let radius = self.max_motion * rng.random::<f64>().sqrt();
        let heading = rng.random_range(0.0..TAU);
        let motion = [radius * heading.cos(), radius * heading.sin()];
        let n = self.size;
        let out = (0..frames)
            .map(|s| {
                let f = s as f64 / (frames - 1) as f64;
                let (ox, oy) = (motion[0] * f, motion[1] * f);
                let px = Array3::from_shape_fn((3, n, n), |(c, y, x)| {
                    let (u, v) = (x as f64 - ox, y as f64 - oy);
                    let sum: f64 = waves.iter().map(|w| w.amp[c] * (w.kx * u + w.ky * v + w.phase).sin()).sum();
                    T::of(0.5 + 0.5 * sum / norm[c])
                });
                Frame::new(px)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, motion))
    }

    /// `count` sequences with seeds `seed, seed + 1, ...`.
    pub fn generate<T: Real>(&self, count: usize, frames: usize, seed: u64) -> Result<Vec<Vec<Frame<T>>>> {
        (0..count).map(|i| Ok(self.sequence(frames, seed.wrapping_add(i as u64))?.0)).collect()
    }
}
