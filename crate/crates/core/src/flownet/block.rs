//! Symmetric block pairs: one module sees `(I0, I1, ...)`, its twin sees the
//! mirrored input `(I1, I0, ...)`, and the two predictions are averaged.

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use super::module::{self, ModuleTrace};
use super::weights::{BlockId, Gradients, ModelWeights};
use crate::error::{ensure, Result};
use crate::imaging::concat_channels;
use crate::scalar::{sigmoid, Real};
use crate::warp::{upsample2x, upsample2x_adjoint, FlowField, OcclusionMask};

/// Flows and mask predicted by a block at its working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput<T: Real> {
    pub flow_t0: FlowField<T>,
    pub flow_t1: FlowField<T>,
    pub mask: OcclusionMask<T>,
}

impl<T: Real> BlockOutput<T> {
    pub fn height(&self) -> usize {
        self.flow_t0.height()
    }

    pub fn width(&self) -> usize {
        self.flow_t0.width()
    }

    /// Moves the prediction to twice the resolution: flows are rescaled with
    /// their resolution, the mask is bilinearly resampled.
    pub fn upsample(&self) -> Self {
        Self {
            flow_t0: crate::warp::upsample_flow_2x(&self.flow_t0),
            flow_t1: crate::warp::upsample_flow_2x(&self.flow_t1),
            mask: OcclusionMask {
                weights: upsample2x(&self.mask.weights.view().insert_axis(Axis(0)))
                    .index_axis_move(Axis(0), 0),
            },
        }
    }
}

pub(crate) struct BlockTrace<T: Real> {
    block: BlockId,
    left: ModuleTrace<T>,
    right: ModuleTrace<T>,
    left_logit: Array2<T>,
    right_logit: Array2<T>,
}

/// Gradients with respect to a block's prior (refinement blocks only).
pub(crate) struct PriorGrad<T: Real> {
    pub flow_t0: Array3<T>,
    pub flow_t1: Array3<T>,
    pub mask: Array2<T>,
}

impl<T: Real> PriorGrad<T> {
    /// Pulls the gradient back through [`BlockOutput::upsample`].
    pub fn downsample_adjoint(&self) -> PriorGrad<T> {
        let two = T::of(2.0);
        PriorGrad {
            flow_t0: upsample2x_adjoint(&self.flow_t0.view()) * two,
            flow_t1: upsample2x_adjoint(&self.flow_t1.view()) * two,
            mask: upsample2x_adjoint(&self.mask.view().insert_axis(Axis(0))).index_axis_move(Axis(0), 0),
        }
    }
}

fn time_plane<T: Real>(h: usize, w: usize, t: T) -> Array3<T> {
    Array3::from_elem((1, h, w), t)
}

fn combine<T: Real>(
    left: &Array3<T>,
    right: &Array3<T>,
    prior: Option<&BlockOutput<T>>,
) -> (BlockOutput<T>, Array2<T>, Array2<T>) {
    let half = T::half();
    let mut f0 = (&left.slice(s![0..2, .., ..]) + &right.slice(s![2..4, .., ..])) * half;
    let mut f1 = (&left.slice(s![2..4, .., ..]) + &right.slice(s![0..2, .., ..])) * half;
    if let Some(p) = prior {
        f0 += &p.flow_t0.vectors;
        f1 += &p.flow_t1.vectors;
    }
    let left_logit = left.index_axis(Axis(0), 4).to_owned();
    let right_logit = right.index_axis(Axis(0), 4).to_owned();
    let mut mask = Array2::zeros(left_logit.dim());
    ndarray::Zip::from(&mut mask)
        .and(&left_logit)
        .and(&right_logit)
        .for_each(|m, &l, &r| *m = half * (sigmoid(l) + (T::one() - sigmoid(r))));
    (
        BlockOutput {
            flow_t0: FlowField { vectors: f0 },
            flow_t1: FlowField { vectors: f1 },
            mask: OcclusionMask { weights: mask },
        },
        left_logit,
        right_logit,
    )
}

fn check_images<T: Real>(img0: &ArrayView3<T>, img1: &ArrayView3<T>) -> Result<()> {
    ensure!(img0.dim() == img1.dim(), "input frames differ: {:?} vs {:?}", img0.dim(), img1.dim());
    let (c, h, w) = img0.dim();
    ensure!(c == 3, "frames must have 3 channels");
    ensure!(h % 4 == 0 && w % 4 == 0, "block input {h}x{w} must be divisible by 4");
    ensure!(
        img0.iter().chain(img1.iter()).all(|v| v.is_finite()),
        "non-finite input pixels"
    );
    Ok(())
}

/// Base block on quarter-resolution frames; the only block that sees the time step.
pub(crate) fn base_forward<T: Real>(
    weights: &ModelWeights<T>,
    img0: &ArrayView3<T>,
    img1: &ArrayView3<T>,
    t: T,
    keep_trace: bool,
) -> Result<(BlockOutput<T>, Option<BlockTrace<T>>)> {
    check_images(img0, img1)?;
    ensure!(t.is_finite(), "time step must be finite");
    let (_, h, w) = img0.dim();
    let left_in = concat_channels(&[img0.view(), img1.view(), time_plane(h, w, t).view()]);
    let right_in = concat_channels(&[img1.view(), img0.view(), time_plane(h, w, T::one() - t).view()]);
    Ok(run_pair(weights, BlockId::Base, left_in, right_in, None, keep_trace))
}

/// Refinement block: inputs are the frames at this scale plus the upsampled prior.
pub(crate) fn refine_forward<T: Real>(
    weights: &ModelWeights<T>,
    block: BlockId,
    img0: &ArrayView3<T>,
    img1: &ArrayView3<T>,
    prior: &BlockOutput<T>,
    keep_trace: bool,
) -> Result<(BlockOutput<T>, Option<BlockTrace<T>>)> {
    check_images(img0, img1)?;
    let (_, h, w) = img0.dim();
    ensure!(
        (prior.height(), prior.width()) == (h, w),
        "prior {}x{} does not match block scale {h}x{w}",
        prior.height(),
        prior.width()
    );
    let m = prior.mask.weights.view().insert_axis(Axis(0));
    let inv_m = m.mapv(|v| T::one() - v);
    let left_in = concat_channels(&[
        img0.view(),
        img1.view(),
        prior.flow_t0.vectors.view(),
        prior.flow_t1.vectors.view(),
        m,
    ]);
    let right_in = concat_channels(&[
        img1.view(),
        img0.view(),
        prior.flow_t1.vectors.view(),
        prior.flow_t0.vectors.view(),
        inv_m.view(),
    ]);
    Ok(run_pair(weights, block, left_in, right_in, Some(prior), keep_trace))
}

fn run_pair<T: Real>(
    weights: &ModelWeights<T>,
    block: BlockId,
    left_in: Array3<T>,
    right_in: Array3<T>,
    prior: Option<&BlockOutput<T>>,
    keep_trace: bool,
) -> (BlockOutput<T>, Option<BlockTrace<T>>) {
    let (left, left_trace) = module::forward(weights, block, left_in, keep_trace);
    let (right, right_trace) = module::forward(weights, block, right_in, keep_trace);
    let (out, left_logit, right_logit) = combine(&left, &right, prior);
    let trace = keep_trace.then(|| BlockTrace {
        block,
        left: left_trace.expect("trace requested"),
        right: right_trace.expect("trace requested"),
        left_logit,
        right_logit,
    });
    (out, trace)
}

/// Backward through a block. Returns the gradient with respect to the prior for refinement blocks.
pub(crate) fn backward<T: Real>(
    weights: &ModelWeights<T>,
    trace: &BlockTrace<T>,
    g_flow0: &Array3<T>,
    g_flow1: &Array3<T>,
    g_mask: &Array2<T>,
    grads: &mut Gradients<T>,
) -> Option<PriorGrad<T>> {
    let half = T::half();
    let (_, h, w) = g_flow0.dim();
    let mut g_left = Array3::zeros((5, h, w));
    let mut g_right = Array3::zeros((5, h, w));
    let hf0 = g_flow0 * half;
    let hf1 = g_flow1 * half;
    g_left.slice_mut(s![0..2, .., ..]).assign(&hf0);
    g_right.slice_mut(s![2..4, .., ..]).assign(&hf0);
    g_left.slice_mut(s![2..4, .., ..]).assign(&hf1);
    g_right.slice_mut(s![0..2, .., ..]).assign(&hf1);
    ndarray::Zip::from(g_left.index_axis_mut(Axis(0), 4))
        .and(g_right.index_axis_mut(Axis(0), 4))
        .and(g_mask)
        .and(&trace.left_logit)
        .and(&trace.right_logit)
        .for_each(|gl, gr, &gm, &l, &r| {
            let sl = sigmoid(l);
            let sr = sigmoid(r);
            *gl = half * gm * sl * (T::one() - sl);
            *gr = -half * gm * sr * (T::one() - sr);
        });

    let is_refine = trace.block != BlockId::Base;
    let gl_in = module::backward(weights, trace.block, &trace.left, &g_left.view(), grads, is_refine);
    let gr_in = module::backward(weights, trace.block, &trace.right, &g_right.view(), grads, is_refine);
    if !is_refine {
        return None;
    }
    let (gl, gr) = (gl_in.expect("input grad"), gr_in.expect("input grad"));
    let flow_t0 = g_flow0 + &gl.slice(s![6..8, .., ..]) + &gr.slice(s![8..10, .., ..]);
    let flow_t1 = g_flow1 + &gl.slice(s![8..10, .., ..]) + &gr.slice(s![6..8, .., ..]);
    let mask = &gl.index_axis(Axis(0), 10) - &gr.index_axis(Axis(0), 10);
    Some(PriorGrad {
        flow_t0,
        flow_t1,
        mask,
    })
}
