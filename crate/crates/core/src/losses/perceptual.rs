//! Feature extractors for the perceptual loss.

use ndarray::{Array3, ArrayView3};

use crate::scalar::Real;

/// Maps an image to a stack of feature maps.
///
/// Implementations must also provide the vector-Jacobian product so the loss
/// can be backpropagated. A pretrained network can be plugged in here.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn extract(&self, image: &ArrayView3<T>) -> Vec<Array3<T>>;

    /// Gradient of `sum_l <grads[l], extract(image)[l]>` with respect to `image`.
    fn pullback(&self, image: &ArrayView3<T>, grads: &[Array3<T>]) -> Array3<T>;
}

/// Training-free pyramid of blurred intensities and their gradients.
///
/// Each level emits `[blur(x), d/dx blur(x), d/dy blur(x)]` per input channel,
/// then passes the 2×2-pooled blur to the next level. Every stage is linear,
/// so the pullback is the exact adjoint.
#[derive(Debug, Clone)]
pub struct GradientPyramid {
    pub levels: usize,
    kernel: [f64; 5],
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self::new(3)
    }
}

impl GradientPyramid {
    pub fn new(levels: usize) -> Self {
        // sigma = 1 Gaussian, 5 taps
        let raw = [-2.0f64, -1.0, 0.0, 1.0, 2.0].map(|x: f64| (-x * x / 2.0).exp());
        let sum: f64 = raw.iter().sum();
        Self {
            levels,
            kernel: raw.map(|v| v / sum),
        }
    }

    fn blur<T: Real>(&self, x: &Array3<T>) -> Array3<T> {
        let k = self.kernel.map(T::of);
        let (c, h, w) = x.dim();
        let mut tmp = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for (i, kv) in k.iter().enumerate() {
                        let sx = (xx as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                        acc += *kv * x[[ch, y, sx]];
                    }
                    tmp[[ch, y, xx]] = acc;
                }
            }
        }
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for (i, kv) in k.iter().enumerate() {
                        let sy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                        acc += *kv * tmp[[ch, sy, xx]];
                    }
                    out[[ch, y, xx]] = acc;
                }
            }
        }
        out
    }

    fn blur_adjoint<T: Real>(&self, g: &Array3<T>) -> Array3<T> {
        let k = self.kernel.map(T::of);
        let (c, h, w) = g.dim();
        let mut tmp = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = g[[ch, y, xx]];
                    for (i, kv) in k.iter().enumerate() {
                        let sy = (y as isize + i as isize - 2).clamp(0, h as isize - 1) as usize;
                        tmp[[ch, sy, xx]] += *kv * v;
                    }
                }
            }
        }
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = tmp[[ch, y, xx]];
                    for (i, kv) in k.iter().enumerate() {
                        let sx = (xx as isize + i as isize - 2).clamp(0, w as isize - 1) as usize;
                        out[[ch, y, sx]] += *kv * v;
                    }
                }
            }
        }
        out
    }
}

/// Central differences with clamped neighbours; returns (d/dx, d/dy).
fn gradients<T: Real>(x: &Array3<T>) -> (Array3<T>, Array3<T>) {
    let (c, h, w) = x.dim();
    let half = T::half();
    let gx = Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        (x[[ch, y, (xx + 1).min(w - 1)]] - x[[ch, y, xx.saturating_sub(1)]]) * half
    });
    let gy = Array3::from_shape_fn((c, h, w), |(ch, y, xx)| {
        (x[[ch, (y + 1).min(h - 1), xx]] - x[[ch, y.saturating_sub(1), xx]]) * half
    });
    (gx, gy)
}

fn gradients_adjoint<T: Real>(gx: &Array3<T>, gy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = gx.dim();
    let half = T::half();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let vx = gx[[ch, y, xx]] * half;
                out[[ch, y, (xx + 1).min(w - 1)]] += vx;
                out[[ch, y, xx.saturating_sub(1)]] -= vx;
                let vy = gy[[ch, y, xx]] * half;
                out[[ch, (y + 1).min(h - 1), xx]] += vy;
                out[[ch, y.saturating_sub(1), xx]] -= vy;
            }
        }
    }
    out
}

fn pool_adjoint<T: Real>(g: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    let (c, ph, pw) = g.dim();
    let quarter = T::of(0.25);
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let v = g[[ch, y, x]] * quarter;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out[[ch, 2 * y + dy, 2 * x + dx]] += v;
                }
            }
        }
    }
    out
}

impl<T: Real> FeatureExtractor<T> for GradientPyramid {
    fn extract(&self, image: &ArrayView3<T>) -> Vec<Array3<T>> {
        let mut x = image.to_owned();
        let mut feats = Vec::with_capacity(self.levels);
        for level in 0..self.levels {
            let b = self.blur(&x);
            let (gx, gy) = gradients(&b);
            feats.push(crate::imaging::concat_channels(&[b.view(), gx.view(), gy.view()]));
            let (_, h, w) = b.dim();
            if level + 1 == self.levels || h < 2 || w < 2 {
                break;
            }
            x = crate::imaging::pool2x2(&b.view());
        }
        feats
    }

    fn pullback(&self, image: &ArrayView3<T>, grads: &[Array3<T>]) -> Array3<T> {
        // sizes of each level's input
        let mut sizes = Vec::with_capacity(grads.len());
        let (c, mut h, mut w) = image.dim();
        for _ in 0..grads.len() {
            sizes.push((h, w));
            h /= 2;
            w /= 2;
        }
        // walk back from the coarsest level; `carry` is the gradient w.r.t. that level's input
        let mut carry: Option<Array3<T>> = None;
        for (g, &(h, w)) in grads.iter().zip(&sizes).rev() {
            let g_b = g.slice(ndarray::s![0..c, .., ..]).to_owned();
            let g_x = g.slice(ndarray::s![c..2 * c, .., ..]).to_owned();
            let g_y = g.slice(ndarray::s![2 * c..3 * c, .., ..]).to_owned();
            let mut g_blur = g_b + gradients_adjoint(&g_x, &g_y);
            if let Some(next) = carry.take() {
                g_blur += &pool_adjoint(&next, h, w);
            }
            carry = Some(self.blur_adjoint(&g_blur));
        }
        carry.unwrap_or_else(|| Array3::zeros(image.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn kernel_sums_to_one() {
        let p = GradientPyramid::default();
        assert!((p.kernel.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pullback_is_adjoint() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = GradientPyramid::default();
        for (h, w) in [(16, 16), (13, 22)] {
            let x = Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>() - 0.5);
            let feats = p.extract(&x.view());
            let ys: Vec<Array3<f64>> = feats
                .iter()
                .map(|f| Array3::from_shape_fn(f.dim(), |_| rng.random::<f64>() - 0.5))
                .collect();
            let lhs: f64 = feats.iter().zip(&ys).map(|(f, y)| (f * y).sum()).sum();
            let rhs = (p.pullback(&x.view(), &ys) * &x).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{h}x{w}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn constant_image_has_flat_gradients() {
        let p = GradientPyramid::default();
        let x = Array3::from_elem((3, 8, 8), 0.4f64);
        let f = p.extract(&x.view());
        assert_eq!(f.len(), 3);
        assert_eq!(f[2].dim(), (9, 2, 2));
        assert!(f[0].slice(ndarray::s![3.., .., ..]).iter().all(|v| v.abs() < 1e-15));
    }
}
