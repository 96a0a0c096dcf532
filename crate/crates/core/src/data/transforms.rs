//! Random training-time augmentations applied identically to all three frames.

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TripletSample;
use crate::error::Result;
use crate::imaging::Frame;
use crate::scalar::Real;

/// The six orderings of the RGB channels.
pub const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side of the square random crop; `None` disables cropping.
    pub crop: Option<usize>,
    pub flip: bool,
    pub time_reversal: bool,
    pub rotation: bool,
    pub channel_permutation: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: Some(256),
            flip: true,
            time_reversal: true,
            rotation: true,
            channel_permutation: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            crop: None,
            flip: false,
            time_reversal: false,
            rotation: false,
            channel_permutation: false,
        }
    }
}

static SMALL_FRAME_WARNED: AtomicBool = AtomicBool::new(false);

/// One realization of the random transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Draw {
    crop: Option<(usize, usize, usize)>,
    flip_h: bool,
    flip_v: bool,
    reverse: bool,
    quarter_turns: usize,
    permutation: [usize; 3],
}

/// Applies random crop, flips, time reversal, 90° rotations and channel
/// permutation. Every random quantity is drawn even when its transform is
/// disabled, so toggling one transform does not shift the others' draws.
pub fn augment_sample<T: Real, R: Rng + ?Sized>(
    sample: TripletSample<T>,
    rng: &mut R,
    config: &AugmentConfig,
) -> Result<TripletSample<T>> {
    let (h, w) = (sample.frame0.height(), sample.frame0.width());
    let crop_y: f64 = rng.random();
    let crop_x: f64 = rng.random();
    let draw = Draw {
        crop: match config.crop {
            Some(size) if h >= size && w >= size => {
                let top = ((h - size + 1) as f64 * crop_y) as usize;
                let left = ((w - size + 1) as f64 * crop_x) as usize;
                Some((top.min(h - size), left.min(w - size), size))
            }
            Some(size) => {
                if !SMALL_FRAME_WARNED.swap(true, Ordering::Relaxed) {
                    log::warn!("frames of {h}x{w} are smaller than the {size}px crop; cropping skipped");
                }
                None
            }
            None => None,
        },
        flip_h: rng.random_bool(0.5) && config.flip,
        flip_v: rng.random_bool(0.5) && config.flip,
        reverse: rng.random_bool(0.5) && config.time_reversal,
        quarter_turns: {
            let k = rng.random_range(0..4);
            if config.rotation { k } else { 0 }
        },
        permutation: {
            let p = CHANNEL_PERMUTATIONS[rng.random_range(0..6)];
            if config.channel_permutation { p } else { [0, 1, 2] }
        },
    };
    apply(sample, &draw)
}

fn apply<T: Real>(sample: TripletSample<T>, d: &Draw) -> Result<TripletSample<T>> {
    let tf = |f: &Frame<T>| -> Result<Frame<T>> {
        let mut v: ArrayView3<T> = f.pixels().view();
        if let Some((top, left, size)) = d.crop {
            v = v.slice_move(s![.., top..top + size, left..left + size]);
        }
        if d.flip_h {
            v.invert_axis(Axis(2));
        }
        if d.flip_v {
            v.invert_axis(Axis(1));
        }
        for _ in 0..d.quarter_turns {
            // counter-clockwise: out(y, x) = in(x, W - 1 - y)
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
        }
        let mut out = Array3::zeros((3, v.len_of(Axis(1)), v.len_of(Axis(2))));
        for (dst, &src) in d.permutation.iter().enumerate() {
            out.index_axis_mut(Axis(0), dst).assign(&v.index_axis(Axis(0), src));
        }
        Ok(Frame::new(out)?.with_timestamp(f.timestamp).with_pose(f.pose))
    };
    let (mut f0, ft, mut f1) = (tf(&sample.frame0)?, tf(&sample.frame_t)?, tf(&sample.frame1)?);
    let mut t = sample.t;
    if d.reverse {
        std::mem::swap(&mut f0, &mut f1);
        t = 1.0 - t;
    }
    Ok(TripletSample {
        frame0: f0,
        frame_t: ft,
        frame1: f1,
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Frame whose pixels encode their own coordinates.
    fn coords(h: usize, w: usize, tag: f64) -> Frame<f64> {
        Frame::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| match c {
            0 => y as f64 / h as f64,
            1 => x as f64 / w as f64,
            _ => tag,
        }))
        .unwrap()
    }

    fn sample(h: usize, w: usize, t: f64) -> TripletSample<f64> {
        TripletSample {
            frame0: coords(h, w, 0.1),
            frame_t: coords(h, w, 0.5),
            frame1: coords(h, w, 0.9),
            t,
        }
    }

    const IDENTITY: Draw = Draw {
        crop: None,
        flip_h: false,
        flip_v: false,
        reverse: false,
        quarter_turns: 0,
        permutation: [0, 1, 2],
    };

    #[test]
    fn disabled_is_identity() {
        let s = sample(8, 6, 0.3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_sample(s.clone(), &mut rng, &AugmentConfig::disabled()).unwrap(), s);
    }

    #[test]
    fn time_reversal() {
        let s = sample(4, 4, 0.3);
        let r = apply(s.clone(), &Draw { reverse: true, ..IDENTITY }).unwrap();
        assert!((r.t - 0.7).abs() < 1e-15);
        assert_eq!(r.frame0, s.frame1);
        assert_eq!(r.frame1, s.frame0);
        assert_eq!(r.frame_t, s.frame_t);
        let back = apply(r, &Draw { reverse: true, ..IDENTITY }).unwrap();
        assert_eq!(back.frame0, s.frame0);
        assert!((back.t - 0.3).abs() < 1e-15);
    }

    #[test]
    fn crop_window_shared() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig { crop: Some(4), ..AugmentConfig::disabled() };
        for _ in 0..20 {
            let r = augment_sample(sample(10, 12, 0.5), &mut rng, &cfg).unwrap();
            assert_eq!((r.frame0.height(), r.frame0.width()), (4, 4));
            for f in [&r.frame_t, &r.frame1] {
                assert_eq!(f.pixels().slice(s![0..2, .., ..]), r.frame0.pixels().slice(s![0..2, .., ..]));
            }
        }
    }

    #[test]
    fn small_frames_skip_crop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig { crop: Some(256), ..AugmentConfig::disabled() };
        let r = augment_sample(sample(10, 12, 0.5), &mut rng, &cfg).unwrap();
        assert_eq!((r.frame0.height(), r.frame0.width()), (10, 12));
    }

    #[test]
    fn rotation_and_flips() {
        let f = coords(2, 3, 0.1);
        let r = apply(sample(2, 3, 0.5), &Draw { quarter_turns: 1, ..IDENTITY }).unwrap().frame0;
        assert_eq!((r.height(), r.width()), (3, 2));
        for y in 0..3 {
            for x in 0..2 {
                assert_eq!(r.pixels()[[0, y, x]], f.pixels()[[0, x, 2 - y]]);
                assert_eq!(r.pixels()[[1, y, x]], f.pixels()[[1, x, 2 - y]]);
            }
        }
        let four = apply(sample(2, 3, 0.5), &Draw { quarter_turns: 4, ..IDENTITY }).unwrap();
        assert_eq!(four.frame0, f);
        let h = apply(sample(2, 3, 0.5), &Draw { flip_h: true, ..IDENTITY }).unwrap().frame0;
        assert_eq!(h.pixels()[[1, 0, 0]], f.pixels()[[1, 0, 2]]);
    }

    #[test]
    fn channel_permutation_is_shared() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cfg = AugmentConfig { channel_permutation: true, ..AugmentConfig::disabled() };
        let s = sample(4, 5, 0.5);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..60 {
            let r = augment_sample(s.clone(), &mut rng, &cfg).unwrap();
            // channel sums act as per-channel histograms of the coordinate image
            let sums = |f: &Frame<f64>| -> Vec<u64> {
                (0..3).map(|c| (f.pixels().index_axis(Axis(0), c).sum() * 1e6).round() as u64).collect()
            };
            let orig: Vec<Vec<u64>> = [&s.frame0, &s.frame_t, &s.frame1].iter().map(|f| sums(f)).collect();
            let got: Vec<Vec<u64>> = [&r.frame0, &r.frame_t, &r.frame1].iter().map(|f| sums(f)).collect();
            let perm: Vec<usize> = (0..2).map(|c| orig[0].iter().position(|v| *v == got[0][c]).unwrap()).collect();
            for (o, g) in orig.iter().zip(&got) {
                assert_eq!(g[0], o[perm[0]]);
                assert_eq!(g[1], o[perm[1]]);
            }
            seen.insert(perm);
        }
        assert!(seen.len() >= 5);
    }
}
