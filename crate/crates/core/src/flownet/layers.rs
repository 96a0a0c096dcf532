//! Convolution primitives with explicit backward passes.
//!
//! Convolutions lower to `im2col` + GEMM. Work is tiled over output rows so
//! the column buffer stays bounded on large frames.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2};

use crate::scalar::{sigmoid, Real};

/// Upper bound on column-buffer elements per tile.
const TILE_ELEMS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub const fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub const fn down(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 2,
            pad: kernel / 2,
        }
    }

    /// Stride-2 transposed convolution geometry (kernel 4, padding 1 doubles the size).
    pub const fn up() -> Self {
        Self {
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }

    /// Grid size when sliding over an `n`-long axis.
    pub fn grid(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn tile_rows(col_rows: usize, grid_w: usize, grid_h: usize) -> usize {
    (TILE_ELEMS / (col_rows * grid_w).max(1)).clamp(1, grid_h.max(1))
}

/// Grid columns `gx` whose source column `gx*stride + kx - pad` lies inside `0..w`.
fn valid_span(g: Geometry, kx: usize, w: usize, grid_w: usize) -> Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if w + g.pad > kx {
        ((w + g.pad - kx - 1) / g.stride + 1).min(grid_w)
    } else {
        0
    };
    lo.min(hi)..hi
}

/// Gathers kernel windows of `image` for grid rows `rows` into `cols`
/// (shape `(C*k*k, rows.len()*grid_w)`).
fn im2col<T: Real>(
    image: &ArrayView3<T>,
    g: Geometry,
    grid_w: usize,
    rows: Range<usize>,
    cols: &mut ArrayViewMut2<T>,
) {
    let (c, h, w) = image.dim();
    let image = image.as_standard_layout();
    let src = image.as_slice().expect("standard layout");
    let k = g.kernel;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ch * k + ky) * k + kx;
                let mut row = cols.row_mut(r);
                let dst = row.as_slice_mut().expect("contiguous column row");
                let span = valid_span(g, kx, w, grid_w);
                for (gi, gy) in rows.clone().enumerate() {
                    let out = &mut dst[gi * grid_w..(gi + 1) * grid_w];
                    let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize || span.is_empty() {
                        out.fill(T::zero());
                        continue;
                    }
                    out[..span.start].fill(T::zero());
                    out[span.end..].fill(T::zero());
                    let line = &src[(ch * h + iy as usize) * w..][..w];
                    let first = span.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[span.clone()].copy_from_slice(&line[first..first + span.len()]);
                    } else {
                        for (o, gx) in out[span.clone()].iter_mut().zip(0..) {
                            *o = line[first + gx * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto `image`; adjoint of [`im2col`].
fn col2im_add<T: Real>(
    cols: &ArrayView2<T>,
    g: Geometry,
    grid_w: usize,
    rows: Range<usize>,
    image: &mut Array3<T>,
) {
    let (c, h, w) = image.dim();
    let dst = image.as_slice_mut().expect("standard layout");
    let k = g.kernel;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ch * k + ky) * k + kx;
                let row = cols.row(r);
                let src = row.as_slice().expect("contiguous column row");
                let span = valid_span(g, kx, w, grid_w);
                if span.is_empty() {
                    continue;
                }
                let first = span.start * g.stride + kx - g.pad;
                for (gi, gy) in rows.clone().enumerate() {
                    let iy = (gy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[(ch * h + iy as usize) * w..][..w];
                    let part = &src[gi * grid_w + span.start..gi * grid_w + span.end];
                    for (j, &v) in part.iter().enumerate() {
                        line[first + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `(out, in*k*k)`.
pub(crate) fn conv2d<T: Real>(
    input: &ArrayView3<T>,
    weight: &ArrayView2<T>,
    bias: &[T],
    g: Geometry,
) -> Array3<T> {
    let (c, h, w) = input.dim();
    let out_c = weight.nrows();
    debug_assert_eq!(weight.ncols(), c * g.kernel * g.kernel);
    let (gh, gw) = (g.grid(h), g.grid(w));
    let ckk = c * g.kernel * g.kernel;
    let mut out = Array2::zeros((out_c, gh * gw));
    let step = tile_rows(ckk, gw, gh);
    let mut buf = Array2::zeros((ckk, step * gw));
    let mut r0 = 0;
    while r0 < gh {
        let r1 = (r0 + step).min(gh);
        let n = (r1 - r0) * gw;
        let mut cols = buf.slice_mut(ndarray::s![.., ..n]);
        im2col(input, g, gw, r0..r1, &mut cols);
        let mut dst = out.slice_mut(ndarray::s![.., r0 * gw..r1 * gw]);
        general_mat_mul(T::one(), weight, &cols.view(), T::zero(), &mut dst);
        r0 = r1;
    }
    let mut out = out.into_shape_with_order((out_c, gh, gw)).expect("contiguous output");
    for (mut plane, &b) in out.outer_iter_mut().zip(bias) {
        plane += b;
    }
    out
}

/// Backward of [`conv2d`]. Accumulates parameter gradients and returns the input gradient.
pub(crate) fn conv2d_backward<T: Real>(
    input: &ArrayView3<T>,
    weight: &ArrayView2<T>,
    g: Geometry,
    grad_out: &ArrayView3<T>,
    grad_weight: &mut ArrayViewMut2<T>,
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Array3<T>> {
    let (c, h, w) = input.dim();
    let (out_c, gh, gw) = grad_out.dim();
    let ckk = c * g.kernel * g.kernel;
    for (gb, plane) in grad_bias.iter_mut().zip(grad_out.outer_iter()) {
        *gb += plane.sum();
    }
    let grad_out = grad_out.as_standard_layout();
    let grad_out = grad_out
        .view()
        .into_shape_with_order((out_c, gh * gw))
        .expect("contiguous gradient");
    let mut grad_in = need_input_grad.then(|| Array3::zeros((c, h, w)));
    let step = tile_rows(ckk, gw, gh);
    let mut buf = Array2::zeros((ckk, step * gw));
    let mut gcols_buf = Array2::zeros((ckk, step * gw));
    let mut r0 = 0;
    while r0 < gh {
        let r1 = (r0 + step).min(gh);
        let n = (r1 - r0) * gw;
        let mut cols = buf.slice_mut(ndarray::s![.., ..n]);
        im2col(input, g, gw, r0..r1, &mut cols);
        let g_tile = grad_out.slice(ndarray::s![.., r0 * gw..r1 * gw]);
        general_mat_mul(T::one(), &g_tile, &cols.t(), T::one(), grad_weight);
        if let Some(gi) = grad_in.as_mut() {
            let mut gcols = gcols_buf.slice_mut(ndarray::s![.., ..n]);
            general_mat_mul(T::one(), &weight.t(), &g_tile, T::zero(), &mut gcols);
            col2im_add(&gcols.view(), g, gw, r0..r1, gi);
        }
        r0 = r1;
    }
    grad_in
}

/// Stride-2 transposed convolution doubling the spatial size.
/// `weight` is `(in, out*4*4)`.
pub(crate) fn deconv2d<T: Real>(
    input: &ArrayView3<T>,
    weight: &ArrayView2<T>,
    bias: &[T],
) -> Array3<T> {
    let g = Geometry::up();
    let (c, h, w) = input.dim();
    let out_c = bias.len();
    let ckk = out_c * g.kernel * g.kernel;
    debug_assert_eq!(weight.dim(), (c, ckk));
    let mut out = Array3::zeros((out_c, 2 * h, 2 * w));
    let input = input.as_standard_layout();
    let input = input.view().into_shape_with_order((c, h * w)).expect("contiguous input");
    let step = tile_rows(ckk, w, h);
    let mut buf = Array2::zeros((ckk, step * w));
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + step).min(h);
        let n = (r1 - r0) * w;
        let x = input.slice(ndarray::s![.., r0 * w..r1 * w]);
        let mut cols = buf.slice_mut(ndarray::s![.., ..n]);
        general_mat_mul(T::one(), &weight.t(), &x, T::zero(), &mut cols);
        col2im_add(&cols.view(), g, w, r0..r1, &mut out);
        r0 = r1;
    }
    for (mut plane, &b) in out.outer_iter_mut().zip(bias) {
        plane += b;
    }
    out
}

/// Backward of [`deconv2d`].
pub(crate) fn deconv2d_backward<T: Real>(
    input: &ArrayView3<T>,
    weight: &ArrayView2<T>,
    grad_out: &ArrayView3<T>,
    grad_weight: &mut ArrayViewMut2<T>,
    grad_bias: &mut [T],
) -> Array3<T> {
    let g = Geometry::up();
    let (c, h, w) = input.dim();
    let out_c = grad_out.dim().0;
    let ckk = out_c * g.kernel * g.kernel;
    for (gb, plane) in grad_bias.iter_mut().zip(grad_out.outer_iter()) {
        *gb += plane.sum();
    }
    let input = input.as_standard_layout();
    let input = input.view().into_shape_with_order((c, h * w)).expect("contiguous input");
    let mut grad_in = Array2::zeros((c, h * w));
    let step = tile_rows(ckk, w, h);
    let mut buf = Array2::zeros((ckk, step * w));
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + step).min(h);
        let n = (r1 - r0) * w;
        let mut cols = buf.slice_mut(ndarray::s![.., ..n]);
        im2col(grad_out, g, w, r0..r1, &mut cols);
        let x = input.slice(ndarray::s![.., r0 * w..r1 * w]);
        general_mat_mul(T::one(), &x, &cols.t(), T::one(), grad_weight);
        let mut gi = grad_in.slice_mut(ndarray::s![.., r0 * w..r1 * w]);
        general_mat_mul(T::one(), weight, &cols.view(), T::zero(), &mut gi);
        r0 = r1;
    }
    grad_in.into_shape_with_order((c, h, w)).expect("contiguous gradient")
}

pub(crate) fn silu<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| v * sigmoid(v))
}

/// Multiplies `grad` in place by the SiLU derivative at `pre`.
pub(crate) fn silu_backward<T: Real>(pre: &Array3<T>, grad: &mut Array3<T>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &x| {
        let s = sigmoid(x);
        *g *= s * (T::one() + x * (T::one() - s));
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.random::<f64>() - 0.5)
    }

    /// Direct nested-loop convolution.
    fn conv_reference(x: &Array3<f64>, w: &Array2<f64>, b: &[f64], g: Geometry) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let k = g.kernel;
        let (gh, gw) = (g.grid(h), g.grid(wd));
        Array3::from_shape_fn((w.nrows(), gh, gw), |(o, y, xx)| {
            let mut acc = b[o];
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * g.stride + ky) as isize - g.pad as isize;
                        let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[o, (ch * k + ky) * k + kx]] * x[[ch, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    /// Transposed convolution as scatter of every input pixel.
    fn deconv_reference(x: &Array3<f64>, w: &Array2<f64>, b: &[f64]) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let oc = b.len();
        let mut out = Array3::zeros((oc, 2 * h, 2 * wd));
        for o in 0..oc {
            out.index_axis_mut(Axis(0), o).fill(b[o]);
        }
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..oc {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (2 * y + ky) as isize - 1;
                                let ox = (2 * xx + kx) as isize - 1;
                                if oy >= 0 && ox >= 0 && (oy as usize) < 2 * h && (ox as usize) < 2 * wd {
                                    out[[o, oy as usize, ox as usize]] +=
                                        w[[ch, (o * 4 + ky) * 4 + kx]] * x[[ch, y, xx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (g, h, w) in [
            (Geometry::same(3), 7, 5),
            (Geometry::down(3), 8, 6),
            (Geometry::same(7), 6, 9),
            (Geometry::same(1), 4, 4),
        ] {
            let x = random3(&mut rng, (3, h, w));
            let wt = Array2::from_shape_fn((4, 3 * g.kernel * g.kernel), |_| rng.random::<f64>() - 0.5);
            let b = [0.1, -0.2, 0.3, 0.0];
            let got = conv2d(&x.view(), &wt.view(), &b, g);
            let want = conv_reference(&x, &wt, &b, g);
            assert_eq!(got.dim(), want.dim());
            assert!((got - want).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn deconv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random3(&mut rng, (3, 4, 5));
        let wt = Array2::from_shape_fn((3, 2 * 16), |_| rng.random::<f64>() - 0.5);
        let b = [0.5, -0.5];
        let got = deconv2d(&x.view(), &wt.view(), &b);
        let want = deconv_reference(&x, &wt, &b);
        assert_eq!(got.dim(), (2, 8, 10));
        assert!((got - want).iter().all(|d| d.abs() < 1e-12));
    }

    /// Checks the backward passes through inner products:
    /// <grad_out, d out> equals <grad_in, dx> + <grad_w, dw> + <grad_b, db> for linear layers.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::down(3);
        let x = random3(&mut rng, (2, 6, 8));
        let wt = Array2::from_shape_fn((3, 18), |_| rng.random::<f64>() - 0.5);
        let dx = random3(&mut rng, (2, 6, 8));
        let dw = Array2::from_shape_fn((3, 18), |_| rng.random::<f64>() - 0.5);
        let db = [0.3, -0.1, 0.7];
        let go = random3(&mut rng, (3, 3, 4));
        let mut gw = Array2::zeros((3, 18));
        let mut gb = [0.0; 3];
        let gi = conv2d_backward(&x.view(), &wt.view(), g, &go.view(), &mut gw.view_mut(), &mut gb, true)
            .unwrap();
        // directional derivative of <go, conv(x, w, b)> along (dx, dw, db)
        let zero = [0.0; 3];
        let lin = conv2d(&dx.view(), &wt.view(), &zero, g) + conv2d(&x.view(), &dw.view(), &db, g);
        let lhs = (&go * &lin).sum();
        let rhs = (&gi * &dx).sum() + (&gw * &dw).sum() + gb.iter().zip(db).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn deconv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random3(&mut rng, (3, 3, 4));
        let wt = Array2::from_shape_fn((3, 32), |_| rng.random::<f64>() - 0.5);
        let dx = random3(&mut rng, (3, 3, 4));
        let dw = Array2::from_shape_fn((3, 32), |_| rng.random::<f64>() - 0.5);
        let db = [0.2, -0.4];
        let go = random3(&mut rng, (2, 6, 8));
        let mut gw = Array2::zeros((3, 32));
        let mut gb = [0.0; 2];
        let gi = deconv2d_backward(&x.view(), &wt.view(), &go.view(), &mut gw.view_mut(), &mut gb);
        let zero = [0.0; 2];
        let lin = deconv2d(&dx.view(), &wt.view(), &zero) + deconv2d(&x.view(), &dw.view(), &db);
        let lhs = (&go * &lin).sum();
        let rhs = (&gi * &dx).sum() + (&gw * &dw).sum() + gb.iter().zip(db).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn tiling_does_not_change_results() {
        // tall input forces several row tiles for a wide kernel
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random3(&mut rng, (64, 40, 32));
        let wt = Array2::from_shape_fn((2, 64 * 49), |_| rng.random::<f64>() - 0.5);
        let g = Geometry::same(7);
        assert!(tile_rows(64 * 49, 32, 40) < 40);
        let got = conv2d(&x.view(), &wt.view(), &[0.0, 0.0], g);
        let want = conv_reference(&x, &wt, &[0.0, 0.0], g);
        assert!((got - want).iter().all(|d| d.abs() < 1e-9));
    }
}
