//! Image-quality metrics and the dataset evaluation harness.
//!
//! All metrics work on the `[0, 1]` range and on RGB jointly.

mod eval;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};

pub use eval::{evaluate, EvalOptions, EvalReport, EvalRow, EvalSummary};

use crate::error::{ensure, Result};
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// An optional learned metric (e.g. LPIPS) backed by an externally supplied network.
pub trait PerceptualMetric<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<f64>;
}

fn check<T: Real>(a: &ArrayView3<T>, b: &ArrayView3<T>) -> Result<()> {
    ensure!(a.dim() == b.dim(), "shape mismatch: {:?} vs {:?}", a.dim(), b.dim());
    ensure!(!a.is_empty(), "empty input");
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<f64> {
    check(predicted, target)?;
    let sum = Zip::from(predicted).and(target).fold(0.0, |acc, &a, &b| {
        let d = a.as_f64() - b.as_f64();
        acc + d * d
    });
    Ok(sum / predicted.len() as f64)
}

/// `10·log10(1/MSE)`; identical inputs give `+inf`.
pub fn psnr<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<f64> {
    let m = mse(predicted, target)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Root-mean-square difference on the 0–255 scale.
pub fn interpolation_error<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<f64> {
    Ok(255.0 * mse(predicted, target)?.sqrt())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(x: &ArrayView2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows = Array2::from_shape_fn((h, ow), |(y, xo)| (0..SSIM_WINDOW).map(|i| k[i] * x[[y, xo + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(yo, xo)| (0..SSIM_WINDOW).map(|i| k[i] * rows[[yo + i, xo]]).sum())
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// valid window positions and then over channels.
pub fn ssim<T: Real>(predicted: &ArrayView3<T>, target: &ArrayView3<T>) -> Result<f64> {
    check(predicted, target)?;
    let (c, h, w) = predicted.dim();
    ensure!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "SSIM needs both sides ≥ {SSIM_WINDOW}, got {h}x{w}");
    let k = ssim_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..c {
        let x = predicted.index_axis(Axis(0), ch).mapv(|v| v.as_f64());
        let y = target.index_axis(Axis(0), ch).mapv(|v| v.as_f64());
        let mx = filter_valid(&x.view(), &k);
        let my = filter_valid(&y.view(), &k);
        let mxx = filter_valid(&(&x * &x).view(), &k);
        let myy = filter_valid(&(&y * &y).view(), &k);
        let mxy = filter_valid(&(&x * &y).view(), &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
            let vx = mxx.as_slice().unwrap()[i] - ux * ux;
            let vy = myy.as_slice().unwrap()[i] - uy * uy;
            let cov = mxy.as_slice().unwrap()[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}
