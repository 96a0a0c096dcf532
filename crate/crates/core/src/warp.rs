//! Backward warping, flow upsampling and the mask-blended merge.
//!
//! Flows are backward: `flow(p)` points from the target frame toward the
//! source frame, with components ordered `(dx, dy)` and `x` the column index.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{ensure, Error, Result};
use crate::scalar::Real;

/// Per-pixel backward displacement, stored as `(2, H, W)` with channel 0 = dx, 1 = dy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Real> {
    pub vectors: Array3<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(vectors: Array3<T>) -> Result<Self> {
        ensure!(vectors.dim().0 == 2, "flow must have 2 components, got {}", vectors.dim().0);
        ensure!(vectors.iter().all(|v| v.is_finite()), "flow must be finite");
        Ok(Self { vectors })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            vectors: Array3::zeros((2, height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        let mut vectors = Array3::zeros((2, height, width));
        vectors.index_axis_mut(ndarray::Axis(0), 0).fill(dx);
        vectors.index_axis_mut(ndarray::Axis(0), 1).fill(dy);
        Self { vectors }
    }

    pub fn height(&self) -> usize {
        self.vectors.dim().1
    }

    pub fn width(&self) -> usize {
        self.vectors.dim().2
    }
}

/// Per-pixel blend weight in `[0, 1]` selecting the first warped source.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask<T: Real> {
    pub weights: Array2<T>,
}

impl<T: Real> OcclusionMask<T> {
    pub fn new(weights: Array2<T>) -> Result<Self> {
        ensure!(
            weights.iter().all(|v| *v >= T::zero() && *v <= T::one()),
            "mask weights must lie in [0, 1]"
        );
        Ok(Self { weights })
    }

    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }
}

/// Clamped bilinear sampling footprint of one coordinate pair.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the unclamped coordinate lay inside the image (derivative is zero otherwise).
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn tap<T: Real>(sx: T, sy: T, h: usize, w: usize) -> Tap<T> {
    let max_x = T::of((w - 1) as f64);
    let max_y = T::of((h - 1) as f64);
    let inside_x = sx >= T::zero() && sx <= max_x;
    let inside_y = sy >= T::zero() && sy <= max_y;
    let cx = sx.max(T::zero()).min(max_x);
    let cy = sy.max(T::zero()).min(max_y);
    let fx = cx.floor();
    let fy = cy.floor();
    let x0 = fx.to_usize().unwrap_or(0).min(w - 1);
    let y0 = fy.to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: cx - fx,
        ay: cy - fy,
        inside_x,
        inside_y,
    }
}

fn check_same_size<T: Real>(image: &ArrayView3<T>, flow: &ArrayView3<T>) -> Result<()> {
    let (_, h, w) = image.dim();
    let (fc, fh, fw) = flow.dim();
    ensure!(fc == 2, "flow must have 2 channels, got {fc}");
    ensure!(
        (h, w) == (fh, fw),
        "image {h}x{w} and flow {fh}x{fw} differ in size"
    );
    ensure!(h >= 1 && w >= 1, "empty image");
    Ok(())
}

/// Samples `image` at `p + flow(p)` with bilinear interpolation, clamping coordinates to the border.
pub fn backward_warp<T: Real>(image: &ArrayView3<T>, flow: &FlowField<T>) -> Result<Array3<T>> {
    check_same_size(image, &flow.vectors.view())?;
    Ok(warp_unchecked(image, &flow.vectors.view()))
}

pub(crate) fn warp_unchecked<T: Real>(image: &ArrayView3<T>, flow: &ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = tap(
                T::of(x as f64) + flow[[0, y, x]],
                T::of(y as f64) + flow[[1, y, x]],
                h,
                w,
            );
            let (bx, by) = (T::one() - t.ax, T::one() - t.ay);
            for ch in 0..c {
                let top = image[[ch, t.y0, t.x0]] * bx + image[[ch, t.y0, t.x1]] * t.ax;
                let bottom = image[[ch, t.y1, t.x0]] * bx + image[[ch, t.y1, t.x1]] * t.ax;
                out[[ch, y, x]] = top * by + bottom * t.ay;
            }
        }
    }
    out
}

/// Gradient of `sum(grad_out * backward_warp(image, flow))` with respect to `flow`.
pub(crate) fn warp_flow_grad<T: Real>(
    image: &ArrayView3<T>,
    flow: &ArrayView3<T>,
    grad_out: &ArrayView3<T>,
) -> Array3<T> {
    let (c, h, w) = image.dim();
    let mut grad = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = tap(
                T::of(x as f64) + flow[[0, y, x]],
                T::of(y as f64) + flow[[1, y, x]],
                h,
                w,
            );
            let (bx, by) = (T::one() - t.ax, T::one() - t.ay);
            let mut gx = T::zero();
            let mut gy = T::zero();
            for ch in 0..c {
                let g = grad_out[[ch, y, x]];
                let i00 = image[[ch, t.y0, t.x0]];
                let i01 = image[[ch, t.y0, t.x1]];
                let i10 = image[[ch, t.y1, t.x0]];
                let i11 = image[[ch, t.y1, t.x1]];
                gx += g * ((i01 - i00) * by + (i11 - i10) * t.ay);
                gy += g * ((i10 - i00) * bx + (i11 - i01) * t.ax);
            }
            if t.inside_x {
                grad[[0, y, x]] = gx;
            }
            if t.inside_y {
                grad[[1, y, x]] = gy;
            }
        }
    }
    grad
}

/// `mask * warped0 + (1 - mask) * warped1`, pixelwise and per channel.
pub fn merge<T: Real>(
    warped0: &ArrayView3<T>,
    warped1: &ArrayView3<T>,
    mask: &OcclusionMask<T>,
) -> Result<Array3<T>> {
    ensure!(
        warped0.dim() == warped1.dim(),
        "warped inputs differ in shape: {:?} vs {:?}",
        warped0.dim(),
        warped1.dim()
    );
    let (_, h, w) = warped0.dim();
    ensure!(
        mask.weights.dim() == (h, w),
        "mask {:?} does not match image {h}x{w}",
        mask.weights.dim()
    );
    ensure!(
        mask.weights.iter().all(|v| *v >= T::zero() && *v <= T::one()),
        "mask weights must lie in [0, 1]"
    );
    Ok(merge_unchecked(warped0, warped1, &mask.weights.view()))
}

pub(crate) fn merge_unchecked<T: Real>(
    warped0: &ArrayView3<T>,
    warped1: &ArrayView3<T>,
    mask: &ArrayView2<T>,
) -> Array3<T> {
    let mut out = Array3::zeros(warped0.dim());
    for (ch, mut plane) in out.outer_iter_mut().enumerate() {
        Zip::from(&mut plane)
            .and(&warped0.index_axis(ndarray::Axis(0), ch))
            .and(&warped1.index_axis(ndarray::Axis(0), ch))
            .and(mask)
            .for_each(|o, &a, &b, &m| *o = m * a + (T::one() - m) * b);
    }
    out
}

/// Bilinear 2× upsampling with half-pixel centers and edge clamping.
///
/// Each output sample is a fixed `0.75 / 0.25` blend of its two nearest
/// source samples along each axis.
pub(crate) fn upsample2x<T: Real>(input: &ArrayView3<T>) -> Array3<T> {
    let (c, h, w) = input.dim();
    let near = T::of(0.75);
    let far = T::of(0.25);
    let taps = |i: usize, n: usize| -> (usize, usize) {
        let src = i / 2;
        let other = if i % 2 == 0 {
            src.saturating_sub(1)
        } else {
            (src + 1).min(n - 1)
        };
        (src, other)
    };
    // rows first, then columns
    let mut rows = Array3::zeros((c, 2 * h, w));
    for ch in 0..c {
        for y in 0..2 * h {
            let (a, b) = taps(y, h);
            for x in 0..w {
                rows[[ch, y, x]] = near * input[[ch, a, x]] + far * input[[ch, b, x]];
            }
        }
    }
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let (a, b) = taps(x, w);
                out[[ch, y, x]] = near * rows[[ch, y, a]] + far * rows[[ch, y, b]];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: maps a `(C, 2H, 2W)` gradient back to `(C, H, W)`.
pub(crate) fn upsample2x_adjoint<T: Real>(grad: &ArrayView3<T>) -> Array3<T> {
    let (c, h2, w2) = grad.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let near = T::of(0.75);
    let far = T::of(0.25);
    let taps = |i: usize, n: usize| -> (usize, usize) {
        let src = i / 2;
        let other = if i % 2 == 0 {
            src.saturating_sub(1)
        } else {
            (src + 1).min(n - 1)
        };
        (src, other)
    };
    let mut rows = Array3::zeros((c, h2, w));
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let (a, b) = taps(x, w);
                let g = grad[[ch, y, x]];
                rows[[ch, y, a]] += near * g;
                rows[[ch, y, b]] += far * g;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h2 {
            let (a, b) = taps(y, h);
            for x in 0..w {
                let g = rows[[ch, y, x]];
                out[[ch, a, x]] += near * g;
                out[[ch, b, x]] += far * g;
            }
        }
    }
    out
}

/// Upsamples a flow to twice the resolution and doubles its displacements.
pub fn upsample_flow_2x<T: Real>(flow: &FlowField<T>) -> FlowField<T> {
    let two = T::of(2.0);
    FlowField {
        vectors: upsample2x(&flow.vectors.view()).mapv(|v| v * two),
    }
}

const FLOW_MAGIC: &[u8; 4] = b"MFFL";

/// Writes a flow dump: `"MFFL"`, u32 height, u32 width, then `H*W*2` little-endian f32
/// values in row-major pixel order with `(dx, dy)` interleaved.
pub fn write_flow<T: Real>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (flow.height(), flow.width());
    let mut buf = Vec::with_capacity(12 + h * w * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            for c in 0..2 {
                let v = flow.vectors[[c, y, x]].to_f32().unwrap_or(f32::NAN);
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a flow dump written by [`write_flow`].
pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(bad("missing MFFL header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + h * w * 8 {
        return Err(bad("payload length does not match header"));
    }
    let mut vectors = Array3::zeros((2, h, w));
    for (i, chunk) in bytes[12..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let (pixel, c) = (i / 2, i % 2);
        vectors[[c, pixel / w, pixel % w]] = v;
    }
    Ok(FlowField { vectors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((1, h, w), |(_, _, x)| x as f64)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| (c * 35 + y * 7 + x) as f32 * 0.01);
        let out = backward_warp(&img.view(), &FlowField::zeros(5, 7)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_shift_takes_right_neighbour() {
        let img = column_ramp(4, 6);
        let out = backward_warp(&img.view(), &FlowField::constant(4, 6, 1.0, 0.0)).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(out[[0, y, x]], (x + 1).min(5) as f64);
            }
        }
    }

    #[test]
    fn half_shift_interpolates() {
        let img = column_ramp(3, 6);
        let out = backward_warp(&img.view(), &FlowField::constant(3, 6, 0.5, 0.0)).unwrap();
        for x in 0..5 {
            assert!((out[[0, 1, x]] - (x as f64 + 0.5)).abs() < 1e-12);
        }
        assert_eq!(out[[0, 1, 5]], 5.0);
    }

    #[test]
    fn warp_rejects_size_mismatch() {
        let img = Array3::<f32>::zeros((3, 4, 4));
        assert!(backward_warp(&img.view(), &FlowField::zeros(4, 5)).is_err());
    }

    #[test]
    fn merge_examples() {
        let a = Array3::from_elem((3, 2, 2), 0.2f64);
        let b = Array3::from_elem((3, 2, 2), 0.8f64);
        let one = OcclusionMask::constant(2, 2, 1.0).unwrap();
        let zero = OcclusionMask::constant(2, 2, 0.0).unwrap();
        assert_eq!(merge(&a.view(), &b.view(), &one).unwrap(), a);
        assert_eq!(merge(&a.view(), &b.view(), &zero).unwrap(), b);
        let q = OcclusionMask::constant(2, 2, 0.25).unwrap();
        let out = merge(&a.view(), &b.view(), &q).unwrap();
        assert!(out.iter().all(|v| (v - 0.65).abs() < 1e-12));
        let bad = OcclusionMask {
            weights: Array2::from_elem((2, 2), 1.2),
        };
        assert!(merge(&a.view(), &b.view(), &bad).is_err());
    }

    #[test]
    fn upsample_constant_flow() {
        let f = FlowField::constant(8, 8, 1.0f32, -1.0);
        let up = upsample_flow_2x(&f);
        assert_eq!(up, FlowField::constant(16, 16, 2.0, -2.0));
        assert_eq!(
            upsample_flow_2x(&FlowField::<f32>::zeros(3, 5)),
            FlowField::zeros(6, 10)
        );
    }

    #[test]
    fn upsample_linear_ramp() {
        // dx = column index at 8 columns; half-pixel bilinear gives x/2 - 0.25 in
        // source units, clamped to [0, 7], then doubled.
        let ramp = Array3::from_shape_fn((2, 4, 8), |(c, _, x)| if c == 0 { x as f64 } else { 0.0 });
        let up = upsample_flow_2x(&FlowField::new(ramp).unwrap());
        let expected = |x: usize| 2.0 * (x as f64 / 2.0 - 0.25).clamp(0.0, 7.0);
        for x in 0..16 {
            assert!((up.vectors[[0, 3, x]] - expected(x)).abs() < 1e-12, "x={x}");
        }
        assert_eq!(up.vectors[[0, 0, 0]], 0.0);
        assert_eq!(up.vectors[[0, 0, 15]], 14.0);
    }

    #[test]
    fn upsample_adjoint_dot_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((2, 3, 5), |_| rng.random::<f64>() - 0.5);
        let y = Array3::from_shape_fn((2, 6, 10), |_| rng.random::<f64>() - 0.5);
        let lhs = (upsample2x(&x.view()) * &y).sum();
        let rhs = (upsample2x_adjoint(&y.view()) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flow_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let f = FlowField::new(Array3::from_shape_fn((2, 3, 4), |(c, y, x)| {
            (c as f32 - 0.5) * (y * 4 + x) as f32 * 0.37
        }))
        .unwrap();
        write_flow(&f, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MFFL");
        assert_eq!(bytes.len(), 12 + 3 * 4 * 8);
        // first pixel dx, dy
        assert_eq!(&bytes[12..16], &f.vectors[[0, 0, 0]].to_le_bytes());
        assert_eq!(&bytes[20..24], &f.vectors[[0, 0, 1]].to_le_bytes());
        assert_eq!(read_flow(&path).unwrap(), f);
    }
}
