//! The hourglass module run twice (with shared weights) inside every block.
//!
//! ```text
//! input ─ stem(3x3/2, 3x3/2) ─ 4 residual groups ─ deconv ×2 ─┬─ concat(input) ─ head.flow → 4
//!   └────────────────────────── long skip ───────────────────┘                 └ head.mask → 1
//! ```

use ndarray::{s, Array3, ArrayView3, Axis};

use super::config::MODULE_OUTPUT_CHANNELS;
use super::layers::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, silu, silu_backward, Geometry};
use super::weights::{BlockId, Gradients, LayerKind, ModelWeights};
use crate::imaging::concat_channels;
use crate::scalar::Real;

struct GroupTrace<T: Real> {
    input: Array3<T>,
    pre: Array3<T>,
    act: Array3<T>,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct ModuleTrace<T: Real> {
    input: Array3<T>,
    stem_pre: [Array3<T>; 2],
    stem_act: Array3<T>,
    groups: Vec<GroupTrace<T>>,
    trunk_out: Array3<T>,
    up_pre: [Array3<T>; 2],
    up_act: Array3<T>,
    head_input: Array3<T>,
}

fn geometry<T: Real>(weights: &ModelWeights<T>, layer: usize) -> Geometry {
    let spec = &weights.layout.layers[layer];
    match spec.kind {
        LayerKind::Conv { stride: 1 } => Geometry::same(spec.kernel),
        LayerKind::Conv { .. } => Geometry::down(spec.kernel),
        LayerKind::Deconv => Geometry::up(),
    }
}

fn conv<T: Real>(weights: &ModelWeights<T>, layer: usize, x: &ArrayView3<T>) -> Array3<T> {
    conv2d(x, &weights.weight_matrix(layer), weights.bias(layer), geometry(weights, layer))
}

fn conv_back<T: Real>(
    weights: &ModelWeights<T>,
    layer: usize,
    x: &ArrayView3<T>,
    grad_out: &ArrayView3<T>,
    grads: &mut Gradients<T>,
    need_input: bool,
) -> Option<Array3<T>> {
    let w = weights.weight_matrix(layer);
    let (mut gw, gb) = grads.split_mut(layer, w.nrows());
    conv2d_backward(x, &w, geometry(weights, layer), grad_out, &mut gw, gb, need_input)
}

fn deconv_back<T: Real>(
    weights: &ModelWeights<T>,
    layer: usize,
    x: &ArrayView3<T>,
    grad_out: &ArrayView3<T>,
    grads: &mut Gradients<T>,
) -> Array3<T> {
    let w = weights.weight_matrix(layer);
    let (mut gw, gb) = grads.split_mut(layer, w.nrows());
    deconv2d_backward(x, &w, grad_out, &mut gw, gb)
}

/// Runs one module. The output holds `(flow_a.x, flow_a.y, flow_b.x, flow_b.y, mask_logit)`.
pub(crate) fn forward<T: Real>(
    weights: &ModelWeights<T>,
    block: BlockId,
    input: Array3<T>,
    keep_trace: bool,
) -> (Array3<T>, Option<ModuleTrace<T>>) {
    let m = weights.layout.module(block);
    debug_assert_eq!(input.dim().0, m.input_channels);

    let s0 = conv(weights, m.stem[0], &input.view());
    let a0 = silu(&s0);
    let s1 = conv(weights, m.stem[1], &a0.view());
    let mut x = silu(&s1);
    let stem_act = a0;

    let mut groups = Vec::with_capacity(m.groups.len());
    for (_, [la, lb]) in &m.groups {
        let pre = conv(weights, *la, &x.view());
        let act = silu(&pre);
        let delta = conv(weights, *lb, &act.view());
        let next = &x + &delta;
        if keep_trace {
            groups.push(GroupTrace { input: x, pre, act });
        }
        x = next;
    }

    let u0 = deconv2d(&x.view(), &weights.weight_matrix(m.up[0]), weights.bias(m.up[0]));
    let v0 = silu(&u0);
    let u1 = deconv2d(&v0.view(), &weights.weight_matrix(m.up[1]), weights.bias(m.up[1]));
    let v1 = silu(&u1);

    let head_input = concat_channels(&[v1.view(), input.view()]);
    let flows = conv(weights, m.head_flow, &head_input.view());
    let mask = conv(weights, m.head_mask, &head_input.view());
    let out = concat_channels(&[flows.view(), mask.view()]);
    debug_assert_eq!(out.dim().0, MODULE_OUTPUT_CHANNELS);

    let trace = keep_trace.then(|| ModuleTrace {
        input,
        stem_pre: [s0, s1],
        stem_act,
        groups,
        trunk_out: x,
        up_pre: [u0, u1],
        up_act: v0,
        head_input,
    });
    (out, trace)
}

/// Backpropagates `grad_out` through one module run, accumulating into `grads`.
/// Returns the gradient with respect to the module input when requested.
pub(crate) fn backward<T: Real>(
    weights: &ModelWeights<T>,
    block: BlockId,
    trace: &ModuleTrace<T>,
    grad_out: &ArrayView3<T>,
    grads: &mut Gradients<T>,
    need_input_grad: bool,
) -> Option<Array3<T>> {
    let m = weights.layout.module(block);
    let head_in = trace.head_input.view();
    let g_flow = grad_out.slice(s![0..4, .., ..]);
    let g_mask = grad_out.slice(s![4..5, .., ..]);
    let mut g_head = conv_back(weights, m.head_flow, &head_in, &g_flow, grads, true).expect("input grad");
    g_head += &conv_back(weights, m.head_mask, &head_in, &g_mask, grads, true).expect("input grad");

    let d2 = trace.up_pre[1].dim().0;
    let mut g = g_head.slice(s![0..d2, .., ..]).to_owned();
    silu_backward(&trace.up_pre[1], &mut g);
    let mut g = deconv_back(weights, m.up[1], &trace.up_act.view(), &g.view(), grads);
    silu_backward(&trace.up_pre[0], &mut g);
    let mut g = deconv_back(weights, m.up[0], &trace.trunk_out.view(), &g.view(), grads);

    for ((_, [la, lb]), gt) in m.groups.iter().zip(&trace.groups).rev() {
        let mut gb = conv_back(weights, *lb, &gt.act.view(), &g.view(), grads, true).expect("input grad");
        silu_backward(&gt.pre, &mut gb);
        let ga = conv_back(weights, *la, &gt.input.view(), &gb.view(), grads, true).expect("input grad");
        g += &ga;
    }

    silu_backward(&trace.stem_pre[1], &mut g);
    let mut g = conv_back(weights, m.stem[1], &trace.stem_act.view(), &g.view(), grads, true)
        .expect("input grad");
    silu_backward(&trace.stem_pre[0], &mut g);
    let g_in = conv_back(weights, m.stem[0], &trace.input.view(), &g.view(), grads, need_input_grad)?;
    let direct = g_head.slice_axis(Axis(0), (d2..).into());
    Some(g_in + &direct)
}
