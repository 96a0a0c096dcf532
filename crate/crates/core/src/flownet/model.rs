//! The full coarse-to-fine cascade: base block at 1/4, refinement at 1/2 and 1.

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};

use super::block::{self, BlockOutput, BlockTrace};
use super::config::PAD_MULTIPLE;
use super::weights::{BlockId, Gradients, ModelWeights};
use crate::error::{ensure, Result};
use crate::imaging::{downsample_half, pad_edge, CropRecord, Frame};
use crate::scalar::Real;
use crate::warp::{merge_unchecked, warp_flow_grad, warp_unchecked, FlowField, OcclusionMask};

/// Everything the network predicts for one frame pair.
#[derive(Debug, Clone)]
pub struct Prediction<T: Real> {
    /// Synthesized frame, cropped to the input size and clamped to `[0, 1]`.
    pub frame: Frame<T>,
    /// Final flows and mask, cropped to the input size.
    pub output: BlockOutput<T>,
    /// Raw block outputs on the padded grid at scales 1/4, 1/2 and 1.
    pub blocks: [BlockOutput<T>; 3],
}

/// Refinement stage selector for [`refinement_block_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineStage {
    Half,
    Full,
}

impl RefineStage {
    fn block(self) -> BlockId {
        match self {
            RefineStage::Half => BlockId::Refine1,
            RefineStage::Full => BlockId::Refine2,
        }
    }
}

/// Runs the base block pair on quarter-resolution frames.
pub fn base_block_forward<T: Real>(
    weights: &ModelWeights<T>,
    img0: &ArrayView3<T>,
    img1: &ArrayView3<T>,
    t: T,
) -> Result<BlockOutput<T>> {
    Ok(block::base_forward(weights, img0, img1, t, false)?.0)
}

/// Runs a refinement block pair; `prior` must already be upsampled to this scale.
pub fn refinement_block_forward<T: Real>(
    weights: &ModelWeights<T>,
    stage: RefineStage,
    img0: &ArrayView3<T>,
    img1: &ArrayView3<T>,
    prior: &BlockOutput<T>,
) -> Result<BlockOutput<T>> {
    Ok(block::refine_forward(weights, stage.block(), img0, img1, prior, false)?.0)
}

struct Padded<T: Real> {
    img0: Array3<T>,
    img1: Array3<T>,
    crop: CropRecord,
}

fn pad_pair<T: Real>(img0: &ArrayView3<T>, img1: &ArrayView3<T>) -> Result<Padded<T>> {
    ensure!(
        img0.dim() == img1.dim(),
        "frames differ in size: {:?} vs {:?}",
        img0.dim(),
        img1.dim()
    );
    let (_, h, w) = img0.dim();
    let (ph, pw) = (h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE);
    Ok(Padded {
        img0: pad_edge(img0, ph, pw),
        img1: pad_edge(img1, ph, pw),
        crop: CropRecord {
            top: 0,
            left: 0,
            height: h,
            width: w,
        },
    })
}

struct Cascade<T: Real> {
    blocks: [BlockOutput<T>; 3],
    traces: Option<[BlockTrace<T>; 3]>,
}

fn cascade<T: Real>(
    weights: &ModelWeights<T>,
    img0: &Array3<T>,
    img1: &Array3<T>,
    t: T,
    keep_trace: bool,
) -> Result<Cascade<T>> {
    let half0 = downsample_half(&img0.view())?;
    let half1 = downsample_half(&img1.view())?;
    let quarter0 = downsample_half(&half0.view())?;
    let quarter1 = downsample_half(&half1.view())?;

    let (b0, t0) = block::base_forward(weights, &quarter0.view(), &quarter1.view(), t, keep_trace)?;
    let (b1, t1) = block::refine_forward(
        weights,
        BlockId::Refine1,
        &half0.view(),
        &half1.view(),
        &b0.upsample(),
        keep_trace,
    )?;
    let (b2, t2) = block::refine_forward(
        weights,
        BlockId::Refine2,
        &img0.view(),
        &img1.view(),
        &b1.upsample(),
        keep_trace,
    )?;
    let traces = match (t0, t1, t2) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    Ok(Cascade {
        blocks: [b0, b1, b2],
        traces,
    })
}

fn crop_output<T: Real>(out: &BlockOutput<T>, crop: &CropRecord) -> BlockOutput<T> {
    BlockOutput {
        flow_t0: FlowField {
            vectors: crop.apply(&out.flow_t0.vectors.view()),
        },
        flow_t1: FlowField {
            vectors: crop.apply(&out.flow_t1.vectors.view()),
        },
        mask: OcclusionMask {
            weights: crop
                .apply(&out.mask.weights.view().insert_axis(Axis(0)))
                .index_axis_move(Axis(0), 0),
        },
    }
}

/// Full prediction for the frame at time `t` between `frame0` (t = 0) and `frame1` (t = 1).
pub fn predict<T: Real>(
    weights: &ModelWeights<T>,
    frame0: &Frame<T>,
    frame1: &Frame<T>,
    t: T,
) -> Result<Prediction<T>> {
    ensure!(t.is_finite(), "time step must be finite");
    let padded = pad_pair(&frame0.pixels().view(), &frame1.pixels().view())?;
    let c = cascade(weights, &padded.img0, &padded.img1, t, false)?;
    let last = &c.blocks[2];
    let w0 = warp_unchecked(&padded.img0.view(), &last.flow_t0.vectors.view());
    let w1 = warp_unchecked(&padded.img1.view(), &last.flow_t1.vectors.view());
    let merged = merge_unchecked(&w0.view(), &w1.view(), &last.mask.weights.view());
    let frame = Frame::from_clamped(padded.crop.apply(&merged.view()))?;
    Ok(Prediction {
        frame: interpolated_metadata(frame, frame0, frame1, t),
        output: crop_output(last, &padded.crop),
        blocks: c.blocks,
    })
}

fn interpolated_metadata<T: Real>(frame: Frame<T>, f0: &Frame<T>, f1: &Frame<T>, t: T) -> Frame<T> {
    let t = t.as_f64();
    let ts = match (f0.timestamp, f1.timestamp) {
        (Some(a), Some(b)) => Some(a + t * (b - a)),
        _ => None,
    };
    frame.with_timestamp(ts)
}

/// Synthesizes the frame at time `t`.
pub fn interpolate<T: Real>(
    weights: &ModelWeights<T>,
    frame0: &Frame<T>,
    frame1: &Frame<T>,
    t: T,
) -> Result<Frame<T>> {
    Ok(predict(weights, frame0, frame1, t)?.frame)
}

/// A forward pass that keeps every activation needed for backpropagation.
pub struct TrainingPass<T: Real> {
    padded: Padded<T>,
    traces: [BlockTrace<T>; 3],
    last: BlockOutput<T>,
    warped0: Array3<T>,
    warped1: Array3<T>,
    prediction: Array3<T>,
    flow_t0: Array3<T>,
    flow_t1: Array3<T>,
}

impl<T: Real> TrainingPass<T> {
    pub fn run(weights: &ModelWeights<T>, img0: &ArrayView3<T>, img1: &ArrayView3<T>, t: T) -> Result<Self> {
        ensure!(t.is_finite(), "time step must be finite");
        let padded = pad_pair(img0, img1)?;
        let c = cascade(weights, &padded.img0, &padded.img1, t, true)?;
        let [_, _, last] = c.blocks;
        let warped0 = warp_unchecked(&padded.img0.view(), &last.flow_t0.vectors.view());
        let warped1 = warp_unchecked(&padded.img1.view(), &last.flow_t1.vectors.view());
        let merged = merge_unchecked(&warped0.view(), &warped1.view(), &last.mask.weights.view());
        let crop = padded.crop;
        Ok(Self {
            prediction: crop.apply(&merged.view()),
            flow_t0: crop.apply(&last.flow_t0.vectors.view()),
            flow_t1: crop.apply(&last.flow_t1.vectors.view()),
            traces: c.traces.expect("traces kept"),
            padded,
            last,
            warped0,
            warped1,
        })
    }

    /// Merged frame before clamping, `(3, H, W)` at the input size.
    pub fn prediction(&self) -> &Array3<T> {
        &self.prediction
    }

    pub fn flow_t0(&self) -> &Array3<T> {
        &self.flow_t0
    }

    pub fn flow_t1(&self) -> &Array3<T> {
        &self.flow_t1
    }

    /// Backpropagates loss gradients on the prediction and on the final flows.
    pub fn backward(
        &self,
        weights: &ModelWeights<T>,
        grad_prediction: &ArrayView3<T>,
        grad_flow_t0: Option<&ArrayView3<T>>,
        grad_flow_t1: Option<&ArrayView3<T>>,
    ) -> Gradients<T> {
        let (_, ph, pw) = self.padded.img0.dim();
        let crop = &self.padded.crop;
        let embed = |g: &ArrayView3<T>| {
            let mut full = Array3::zeros((g.dim().0, ph, pw));
            full.slice_mut(s![.., crop.top..crop.top + crop.height, crop.left..crop.left + crop.width])
                .assign(g);
            full
        };
        let g_out = embed(grad_prediction);
        let mut g_f0 = grad_flow_t0.map(&embed).unwrap_or_else(|| Array3::zeros((2, ph, pw)));
        let mut g_f1 = grad_flow_t1.map(&embed).unwrap_or_else(|| Array3::zeros((2, ph, pw)));

        let mask = &self.last.mask.weights;
        let mut g_mask = Array2::zeros((ph, pw));
        let mut g_w0 = Array3::zeros(g_out.dim());
        let mut g_w1 = Array3::zeros(g_out.dim());
        for ch in 0..g_out.dim().0 {
            let g = g_out.index_axis(Axis(0), ch);
            Zip::from(&mut g_mask)
                .and(&g)
                .and(self.warped0.index_axis(Axis(0), ch))
                .and(self.warped1.index_axis(Axis(0), ch))
                .for_each(|gm, &g, &a, &b| *gm += g * (a - b));
            Zip::from(g_w0.index_axis_mut(Axis(0), ch))
                .and(g_w1.index_axis_mut(Axis(0), ch))
                .and(&g)
                .and(mask)
                .for_each(|gw0, gw1, &g, &m| {
                    *gw0 = g * m;
                    *gw1 = g * (T::one() - m);
                });
        }
        g_f0 += &warp_flow_grad(&self.padded.img0.view(), &self.last.flow_t0.vectors.view(), &g_w0.view());
        g_f1 += &warp_flow_grad(&self.padded.img1.view(), &self.last.flow_t1.vectors.view(), &g_w1.view());

        let mut grads = weights.zero_gradients();
        let [base, r1, r2] = &self.traces;
        let p = block::backward(weights, r2, &g_f0, &g_f1, &g_mask, &mut grads)
            .expect("refinement prior grad")
            .downsample_adjoint();
        let p = block::backward(weights, r1, &p.flow_t0, &p.flow_t1, &p.mask, &mut grads)
            .expect("refinement prior grad")
            .downsample_adjoint();
        block::backward(weights, base, &p.flow_t0, &p.flow_t1, &p.mask, &mut grads);
        grads
    }
}
