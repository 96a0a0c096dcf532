//! Datasets, timestep sampling, training-time augmentation and batch streams.

mod dataset;
mod stream;
mod synthetic;
mod transforms;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{load_poses, DatasetSpec, FrameMeta, Layout, SequenceRef};
pub use stream::{interleave_batches, Batch, BatchSource, BatchStream, DiskSource, SequenceSource};
pub use synthetic::TranslatingTextures;
pub use transforms::{augment_sample, AugmentConfig, CHANNEL_PERMUTATIONS};

use crate::error::{ensure, Result};
use crate::imaging::Frame;
use crate::scalar::Real;

/// Two input frames, the ground-truth frame between (or beyond) them, and its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample<T: Real> {
    pub frame0: Frame<T>,
    pub frame_t: Frame<T>,
    pub frame1: Frame<T>,
    pub t: f64,
}

/// How the three frames of a septuplet draw are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrawKind {
    /// Inputs `(i, k)`, target `j`.
    Interpolation,
    /// Inputs `(i, j)`, target `k`; `t > 1`.
    Extrapolation,
    /// Inputs `(j, k)`, target `i`; `t < 0`.
    MirroredExtrapolation,
}

/// Sorted distinct indices `i < j < k` and their role assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeptupletDraw {
    pub indices: [usize; 3],
    pub kind: DrawKind,
}

pub const SEPTUPLET_LEN: usize = 7;
pub const INTERPOLATION_PROBABILITY: f64 = 0.8;

impl SeptupletDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut idx = rand::seq::index::sample(rng, SEPTUPLET_LEN, 3).into_vec();
        idx.sort_unstable();
        let kind = if rng.random_bool(INTERPOLATION_PROBABILITY) {
            DrawKind::Interpolation
        } else if rng.random_bool(0.5) {
            DrawKind::Extrapolation
        } else {
            DrawKind::MirroredExtrapolation
        };
        Self {
            indices: [idx[0], idx[1], idx[2]],
            kind,
        }
    }

    /// `(first input, second input, target)` indices.
    pub fn roles(&self) -> (usize, usize, usize) {
        let [i, j, k] = self.indices;
        match self.kind {
            DrawKind::Interpolation => (i, k, j),
            DrawKind::Extrapolation => (i, j, k),
            DrawKind::MirroredExtrapolation => (j, k, i),
        }
    }

    /// `t = (target − first) / (second − first)` for every kind.
    pub fn t(&self) -> f64 {
        let (a, b, target) = self.roles();
        (target as f64 - a as f64) / (b as f64 - a as f64)
    }

    pub fn is_extrapolation(&self) -> bool {
        self.kind != DrawKind::Interpolation
    }
}

/// Uses frames 1 and 3 as inputs and frame 2 as the target at `t = 0.5`.
pub fn sample_triplet_fixed<T: Real>(sequence: &[Frame<T>]) -> Result<TripletSample<T>> {
    ensure!(sequence.len() == 3, "fixed-timestep sampling needs 3 frames, got {}", sequence.len());
    Ok(TripletSample {
        frame0: sequence[0].clone(),
        frame_t: sequence[1].clone(),
        frame1: sequence[2].clone(),
        t: 0.5,
    })
}

/// Builds the sample for a given draw.
pub fn triplet_from_draw<T: Real>(sequence: &[Frame<T>], draw: &SeptupletDraw) -> Result<TripletSample<T>> {
    ensure!(
        sequence.len() == SEPTUPLET_LEN,
        "arbitrary-timestep sampling needs {SEPTUPLET_LEN} frames, got {}",
        sequence.len()
    );
    let [i, j, k] = draw.indices;
    ensure!(i < j && j < k && k < SEPTUPLET_LEN, "indices {:?} are not sorted and distinct", draw.indices);
    let (a, b, target) = draw.roles();
    Ok(TripletSample {
        frame0: sequence[a].clone(),
        frame_t: sequence[target].clone(),
        frame1: sequence[b].clone(),
        t: draw.t(),
    })
}

pub fn sample_triplet_arbitrary<T: Real, R: Rng + ?Sized>(
    sequence: &[Frame<T>],
    rng: &mut R,
) -> Result<TripletSample<T>> {
    ensure!(
        sequence.len() == SEPTUPLET_LEN,
        "arbitrary-timestep sampling needs {SEPTUPLET_LEN} frames, got {}",
        sequence.len()
    );
    triplet_from_draw(sequence, &SeptupletDraw::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq(n: usize) -> Vec<Frame<f64>> {
        (0..n).map(|i| Frame::constant(2, 2, i as f64 / 10.0).unwrap()).collect()
    }

    fn id(f: &Frame<f64>) -> usize {
        (f.pixels()[[0, 0, 0]] * 10.0).round() as usize
    }

    #[test]
    fn fixed_sampling() {
        let s = sample_triplet_fixed(&seq(3)).unwrap();
        assert_eq!((id(&s.frame0), id(&s.frame_t), id(&s.frame1), s.t), (0, 1, 2, 0.5));
        assert!(sample_triplet_fixed(&seq(2)).is_err());
    }

    #[test]
    fn draw_examples() {
        // 1-based (1,4,7) → 0-based (0,3,6)
        let d = SeptupletDraw { indices: [0, 3, 6], kind: DrawKind::Interpolation };
        assert_eq!(d.t(), 0.5);
        let d = SeptupletDraw { indices: [0, 1, 3], kind: DrawKind::Extrapolation };
        let s = triplet_from_draw(&seq(7), &d).unwrap();
        assert_eq!((id(&s.frame0), id(&s.frame1), id(&s.frame_t), s.t), (0, 1, 3, 3.0));
        let d = SeptupletDraw { indices: [1, 2, 3], kind: DrawKind::Interpolation };
        assert_eq!(d.t(), 0.5);
        let d = SeptupletDraw { indices: [0, 1, 3], kind: DrawKind::MirroredExtrapolation };
        assert_eq!(d.t(), -0.5);
        assert!(sample_triplet_arbitrary(&seq(3), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn draw_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut extra = 0;
        for _ in 0..n {
            let d = SeptupletDraw::sample(&mut rng);
            let t = d.t();
            if d.is_extrapolation() {
                extra += 1;
                assert!(!(0.0..=1.0).contains(&t));
            } else {
                assert!(t > 0.0 && t < 1.0);
            }
        }
        let frac = extra as f64 / n as f64;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
    }
}
