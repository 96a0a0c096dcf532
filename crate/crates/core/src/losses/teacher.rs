//! Flow teachers for distillation.

use ndarray::{Array3, ArrayView3};

use crate::error::{ensure, Result};
use crate::imaging::pool2x2;
use crate::scalar::Real;
use crate::warp::FlowField;

/// Supplies reference backward flows `(F_t->0, F_t->1)` for a training sample.
pub trait TeacherOracle<T: Real>: Send + Sync {
    fn flows(
        &self,
        frame0: &ArrayView3<T>,
        frame1: &ArrayView3<T>,
        frame_t: &ArrayView3<T>,
        t: T,
    ) -> Result<(FlowField<T>, FlowField<T>)>;
}

/// Coarse-to-fine dense block matching from the ground-truth middle frame to each input.
///
/// At every pyramid level each pixel searches integer offsets around the
/// upsampled coarser estimate, minimising the squared patch difference, and
/// the winner is refined to sub-pixel precision with a parabola fit.
#[derive(Debug, Clone)]
pub struct BlockMatchingTeacher {
    pub levels: usize,
    pub search_radius: usize,
    pub patch_radius: usize,
}

impl Default for BlockMatchingTeacher {
    fn default() -> Self {
        Self {
            levels: 3,
            search_radius: 2,
            patch_radius: 2,
        }
    }
}

impl BlockMatchingTeacher {
    /// Backward flow `F` with `target(p) ≈ source(p + F(p))`.
    pub fn match_frames<T: Real>(&self, target: &ArrayView3<T>, source: &ArrayView3<T>) -> Result<FlowField<T>> {
        ensure!(target.dim() == source.dim(), "teacher inputs differ in size");
        let mut targets = vec![target.to_owned()];
        let mut sources = vec![source.to_owned()];
        for _ in 1..self.levels.max(1) {
            let (_, h, w) = targets.last().unwrap().dim();
            if h < 16 || w < 16 {
                break;
            }
            let t = pool2x2(&targets.last().unwrap().view());
            let s = pool2x2(&sources.last().unwrap().view());
            targets.push(t);
            sources.push(s);
        }
        let mut flow: Option<Array3<f64>> = None;
        for (t, s) in targets.iter().zip(&sources).rev() {
            let (_, h, w) = t.dim();
            let init = match flow {
                None => Array3::zeros((2, h, w)),
                Some(coarse) => {
                    let (_, ch, cw) = coarse.dim();
                    Array3::from_shape_fn((2, h, w), |(c, y, x)| 2.0 * coarse[[c, (y / 2).min(ch - 1), (x / 2).min(cw - 1)]])
                }
            };
            flow = Some(self.refine_level(&t.view(), &s.view(), &init));
        }
        let flow = flow.expect("at least one level");
        FlowField::new(flow.mapv(T::of))
    }

    fn refine_level<T: Real>(&self, target: &ArrayView3<T>, source: &ArrayView3<T>, init: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = target.dim();
        let r = self.search_radius as isize;
        let pr = self.patch_radius as isize;
        let side = (2 * r + 1) as usize;
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = Array3::zeros((2, h, w));
        let mut costs = vec![0.0f64; side * side];
        for y in 0..h {
            for x in 0..w {
                let bx = init[[0, y, x]].round() as isize;
                let by = init[[1, y, x]].round() as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let mut cost = 0.0;
                        for qy in -pr..=pr {
                            let ty = clamp(y as isize + qy, h);
                            let sy = clamp(y as isize + qy + by + dy, h);
                            for qx in -pr..=pr {
                                let tx = clamp(x as isize + qx, w);
                                let sx = clamp(x as isize + qx + bx + dx, w);
                                for ch in 0..c {
                                    let d = (target[[ch, ty, tx]] - source[[ch, sy, sx]]).as_f64();
                                    cost += d * d;
                                }
                            }
                        }
                        costs[((dy + r) as usize) * side + (dx + r) as usize] = cost;
                    }
                }
                // smallest cost; ties prefer the offset closest to the prior
                let mut best = (r as usize, r as usize);
                let mut best_cost = costs[best.0 * side + best.1];
                for iy in 0..side {
                    for ix in 0..side {
                        let v = costs[iy * side + ix];
                        if v < best_cost {
                            best_cost = v;
                            best = (iy, ix);
                        }
                    }
                }
                let (iy, ix) = best;
                let sub = |lo: f64, mid: f64, hi: f64| {
                    let denom = lo - 2.0 * mid + hi;
                    if denom > 1e-12 {
                        (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let ox = if ix > 0 && ix + 1 < side {
                    sub(costs[iy * side + ix - 1], best_cost, costs[iy * side + ix + 1])
                } else {
                    0.0
                };
                let oy = if iy > 0 && iy + 1 < side {
                    sub(costs[(iy - 1) * side + ix], best_cost, costs[(iy + 1) * side + ix])
                } else {
                    0.0
                };
                out[[0, y, x]] = (bx + ix as isize - r) as f64 + ox;
                out[[1, y, x]] = (by + iy as isize - r) as f64 + oy;
            }
        }
        out
    }
}

impl<T: Real> TeacherOracle<T> for BlockMatchingTeacher {
    fn flows(
        &self,
        frame0: &ArrayView3<T>,
        frame1: &ArrayView3<T>,
        frame_t: &ArrayView3<T>,
        _t: T,
    ) -> Result<(FlowField<T>, FlowField<T>)> {
        Ok((self.match_frames(frame_t, frame0)?, self.match_frames(frame_t, frame1)?))
    }
}
