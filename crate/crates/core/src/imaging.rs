//! Frames, camera poses, image file I/O, padding and pyramid resampling.

use std::path::Path;

use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Real;

/// Rigid camera pose: translation in meters and a unit quaternion (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub translation: [f64; 3],
    #[serde(rename = "rotation_quat_wxyz")]
    pub rotation: [f64; 4],
}

impl CameraPose {
    /// Builds a pose, renormalizing the quaternion. Zero quaternions are rejected.
    pub fn new(translation: [f64; 3], rotation: [f64; 4]) -> Result<Self> {
        let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(
            norm.is_finite() && norm > 1e-12,
            "quaternion {rotation:?} has zero or non-finite norm"
        );
        ensure!(
            translation.iter().all(|v| v.is_finite()),
            "translation {translation:?} is not finite"
        );
        Ok(Self {
            translation,
            rotation: rotation.map(|v| v / norm),
        })
    }

    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An RGB image stored channel-first as `(3, height, width)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T: Real> {
    pixels: Array3<T>,
    pub timestamp: Option<f64>,
    pub pose: Option<CameraPose>,
}

impl<T: Real> Frame<T> {
    /// Wraps a `(3, H, W)` array, checking that every value is finite and in `[0, 1]`.
    pub fn new(pixels: Array3<T>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        ensure!(c == 3, "frame must have 3 channels, got {c}");
        ensure!(h >= 1 && w >= 1, "frame must be non-empty, got {h}x{w}");
        ensure!(
            pixels
                .iter()
                .all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()),
            "frame values must be finite and within [0, 1]"
        );
        Ok(Self {
            pixels,
            timestamp: None,
            pose: None,
        })
    }

    /// Clamps into `[0, 1]`, mapping NaN to 0.
    pub fn from_clamped(mut pixels: Array3<T>) -> Result<Self> {
        pixels.mapv_inplace(|v| {
            if v.is_nan() {
                T::zero()
            } else {
                v.max(T::zero()).min(T::one())
            }
        });
        Self::new(pixels)
    }

    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn with_timestamp(mut self, timestamp: Option<f64>) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn with_pose(mut self, pose: Option<CameraPose>) -> Self {
        self.pose = pose;
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<T> {
        self.pixels
    }

    /// Converts the scalar type.
    pub fn cast<U: Real>(&self) -> Frame<U> {
        Frame {
            pixels: self.pixels.mapv(|v| U::of(v.as_f64())),
            timestamp: self.timestamp,
            pose: self.pose,
        }
    }
}

/// Decodes a PNG or JPEG into a frame, mapping 8-bit values by division by 255.
pub fn load_frame<T: Real>(path: impl AsRef<Path>) -> Result<Frame<T>> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let scale = T::one() / T::of(255.0);
    let mut pixels = Array3::zeros((3, h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = T::of(f64::from(p.0[c])) * scale;
        }
    }
    Frame::new(pixels)
}

/// Quantizes a `[0, 1]` value to a byte.
#[inline]
pub fn to_byte<T: Real>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a frame as 8-bit RGB; the format follows the file extension.
pub fn save_frame<T: Real>(frame: &Frame<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (frame.height(), frame.width());
    let px = frame.pixels();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_byte(px[[0, y, x]]),
            to_byte(px[[1, y, x]]),
            to_byte(px[[2, y, x]]),
        ])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Where the original content sits inside a padded frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn is_identity_for(&self, height: usize, width: usize) -> bool {
        self.top == 0 && self.left == 0 && self.height == height && self.width == width
    }

    /// Cuts the recorded window out of a `(C, H, W)` array.
    pub fn apply<T: Real>(&self, array: &ArrayView3<T>) -> Array3<T> {
        array
            .slice(s![
                ..,
                self.top..self.top + self.height,
                self.left..self.left + self.width
            ])
            .to_owned()
    }
}

fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Pads bottom/right by edge replication up to `(height, width)`.
pub fn pad_edge<T: Real>(array: &ArrayView3<T>, height: usize, width: usize) -> Array3<T> {
    let (c, h, w) = array.dim();
    debug_assert!(height >= h && width >= w);
    Array3::from_shape_fn((c, height, width), |(ch, y, x)| {
        array[[ch, y.min(h - 1), x.min(w - 1)]]
    })
}

/// Pads a frame so both sides are multiples of `multiple`, replicating edge pixels.
pub fn pad_to_multiple<T: Real>(frame: &Frame<T>, multiple: usize) -> Result<(Frame<T>, CropRecord)> {
    ensure!(multiple >= 1, "padding multiple must be at least 1");
    let (h, w) = (frame.height(), frame.width());
    let record = CropRecord {
        top: 0,
        left: 0,
        height: h,
        width: w,
    };
    let padded = pad_edge(&frame.pixels.view(), round_up(h, multiple), round_up(w, multiple));
    Ok((
        Frame {
            pixels: padded,
            timestamp: frame.timestamp,
            pose: frame.pose,
        },
        record,
    ))
}

/// Inverse of [`pad_to_multiple`].
pub fn crop_frame<T: Real>(frame: &Frame<T>, record: &CropRecord) -> Result<Frame<T>> {
    ensure!(
        record.top + record.height <= frame.height() && record.left + record.width <= frame.width(),
        "crop window exceeds frame"
    );
    Ok(Frame {
        pixels: record.apply(&frame.pixels.view()),
        timestamp: frame.timestamp,
        pose: frame.pose,
    })
}

/// 2×2 average pooling of a `(C, H, W)` array. Both spatial sides must be even.
pub fn downsample_half<T: Real>(array: &ArrayView3<T>) -> Result<Array3<T>> {
    let (_, h, w) = array.dim();
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "downsample_half needs even dimensions, got {h}x{w}"
    );
    Ok(pool2x2(array))
}

/// 2×2 average pooling; a trailing odd row/column is dropped.
pub(crate) fn pool2x2<T: Real>(array: &ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = array.dim();
    let quarter = T::of(0.25);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, x)| {
        let (y2, x2) = (2 * y, 2 * x);
        (array[[ch, y2, x2]] + array[[ch, y2, x2 + 1]] + array[[ch, y2 + 1, x2]]
            + array[[ch, y2 + 1, x2 + 1]])
            * quarter
    })
}

/// Concatenates `(C_i, H, W)` arrays along the channel axis.
pub(crate) fn concat_channels<T: Real>(parts: &[ArrayView3<T>]) -> Array3<T> {
    ndarray::concatenate(Axis(0), parts).expect("matching spatial sizes")
}
