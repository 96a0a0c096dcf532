use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{
    BlockWidths, NetConfig, BASE_INPUT_CHANNELS, MODULE_OUTPUT_CHANNELS, REFINE_INPUT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Format tag stored with every weight set and checkpoint.
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockId {
    Base,
    Refine1,
    Refine2,
}

impl BlockId {
    pub const ALL: [BlockId; 3] = [BlockId::Base, BlockId::Refine1, BlockId::Refine2];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Base => "base",
            BlockId::Refine1 => "refine1",
            BlockId::Refine2 => "refine2",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerKind {
    /// Weight `(out, in, k, k)`.
    Conv { stride: usize },
    /// Weight `(in, out, 4, 4)`.
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    FanIn,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub init: Init,
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { .. } => vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            LayerKind::Deconv => vec![self.in_ch, self.out_ch, self.kernel, self.kernel],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { .. } => self.in_ch * self.kernel * self.kernel,
            // each output of a stride-2 transposed conv sees (k/2)^2 taps per input channel
            LayerKind::Deconv => self.in_ch * (self.kernel / 2) * (self.kernel / 2),
        }
    }
}

/// Trunk group of an hourglass module: `x + conv_b(act(conv_a(x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GroupSpec {
    pub kernel_a: usize,
    pub kernel_b: usize,
    pub hidden: usize,
}

/// Layer indices of one block's (shared) hourglass module, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ModuleLayout {
    pub input_channels: usize,
    pub stem: [usize; 2],
    pub groups: Vec<(GroupSpec, [usize; 2])>,
    pub up: [usize; 2],
    pub head_flow: usize,
    pub head_mask: usize,
}

/// Maps every layer of the network to its parameter slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub layers: Vec<LayerSpec>,
    pub modules: [ModuleLayout; 3],
}

impl Layout {
    pub fn new(config: &NetConfig) -> Self {
        let mut layers = Vec::new();
        let base = build_module(
            &mut layers,
            BlockId::Base,
            BASE_INPUT_CHANNELS,
            &config.base,
            config.expansion_rate,
            Some(config.base_kernel_sizes),
        );
        let r1 = build_module(
            &mut layers,
            BlockId::Refine1,
            REFINE_INPUT_CHANNELS,
            &config.refine[0],
            config.expansion_rate,
            None,
        );
        let r2 = build_module(
            &mut layers,
            BlockId::Refine2,
            REFINE_INPUT_CHANNELS,
            &config.refine[1],
            config.expansion_rate,
            None,
        );
        Self {
            layers,
            modules: [base, r1, r2],
        }
    }

    pub fn module(&self, block: BlockId) -> &ModuleLayout {
        &self.modules[block.index()]
    }
}

fn build_module(
    layers: &mut Vec<LayerSpec>,
    block: BlockId,
    input_channels: usize,
    widths: &BlockWidths,
    expansion: usize,
    bottleneck_kernels: Option<[usize; 2]>,
) -> ModuleLayout {
    let mut push = |name: String, kind, in_ch, out_ch, kernel, init| {
        layers.push(LayerSpec {
            name: format!("{}.{name}", block.name()),
            kind,
            in_ch,
            out_ch,
            kernel,
            init,
        });
        layers.len() - 1
    };
    let c = widths.group_channels;
    let stem = [
        push("stem.0".into(), LayerKind::Conv { stride: 2 }, input_channels, widths.stem_channels, 3, Init::FanIn),
        push("stem.1".into(), LayerKind::Conv { stride: 2 }, widths.stem_channels, c, 3, Init::FanIn),
    ];
    let mut group_specs = Vec::new();
    match bottleneck_kernels {
        Some(kernels) => {
            for k in kernels {
                group_specs.push(GroupSpec {
                    kernel_a: k,
                    kernel_b: 1,
                    hidden: expansion * c,
                });
            }
        }
        None => {
            for _ in 0..2 {
                group_specs.push(GroupSpec {
                    kernel_a: 3,
                    kernel_b: 3,
                    hidden: c,
                });
            }
        }
    }
    for _ in 0..2 {
        group_specs.push(GroupSpec {
            kernel_a: 3,
            kernel_b: 3,
            hidden: c,
        });
    }
    let groups = group_specs
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            let a = push(format!("group{}.a", i + 1), LayerKind::Conv { stride: 1 }, c, spec.hidden, spec.kernel_a, Init::FanIn);
            let b = push(format!("group{}.b", i + 1), LayerKind::Conv { stride: 1 }, spec.hidden, c, spec.kernel_b, Init::FanIn);
            (spec, [a, b])
        })
        .collect();
    let [d1, d2] = widths.deconv_channels;
    let up = [
        push("up.0".into(), LayerKind::Deconv, c, d1, 4, Init::FanIn),
        push("up.1".into(), LayerKind::Deconv, d1, d2, 4, Init::FanIn),
    ];
    let head_in = d2 + input_channels;
    let head_flow = push("head.flow".into(), LayerKind::Conv { stride: 1 }, head_in, MODULE_OUTPUT_CHANNELS - 1, 3, Init::Zero);
    let head_mask = push("head.mask".into(), LayerKind::Conv { stride: 1 }, head_in, 1, 3, Init::Zero);
    ModuleLayout {
        input_channels,
        stem,
        groups,
        up,
        head_flow,
        head_mask,
    }
}

/// One named parameter array (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// How a fresh network is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Fan-in scaled normal weights, zero prediction heads (the untrained network blends linearly).
    ZeroHeads,
    /// Fan-in scaled weights everywhere, heads scaled by the given factor. Used by tests
    /// that need every parameter to influence the output.
    RandomHeads { head_scale: f64 },
}

/// All learned parameters of the flow network. Each block stores one module;
/// both modules of the symmetric pair read the same arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real> {
    pub(crate) config: NetConfig,
    pub(crate) layout: Layout,
    /// Per layer: `[weight, bias]`.
    pub(crate) params: Vec<[Param<T>; 2]>,
    pub version: u32,
}

impl<T: Real> ModelWeights<T> {
    pub fn init(config: &NetConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .layers
            .iter()
            .map(|spec| {
                let shape = spec.weight_shape();
                let n: usize = shape.iter().product();
                let std = (1.0 / spec.fan_in() as f64).sqrt();
                let scale = match (spec.init, scheme) {
                    (Init::Zero, InitScheme::ZeroHeads) => 0.0,
                    (Init::Zero, InitScheme::RandomHeads { head_scale }) => head_scale,
                    (Init::FanIn, _) => 1.0,
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..n)
                    .map(|_| {
                        let v = normal.sample(&mut rng);
                        T::of(v * scale)
                    })
                    .collect();
                let bias_data = match scheme {
                    InitScheme::RandomHeads { .. } => {
                        (0..spec.out_ch).map(|_| T::of(normal.sample(&mut rng) * 0.1 * scale)).collect()
                    }
                    InitScheme::ZeroHeads => vec![T::zero(); spec.out_ch],
                };
                [
                    Param {
                        name: format!("{}.weight", spec.name),
                        shape,
                        data,
                    },
                    Param {
                        name: format!("{}.bias", spec.name),
                        shape: vec![spec.out_ch],
                        data: bias_data,
                    },
                ]
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            version: WEIGHTS_VERSION,
        })
    }

    /// Rebuilds weights from named arrays (e.g. read from a checkpoint).
    pub fn from_params(config: &NetConfig, params: Vec<Param<T>>) -> Result<Self> {
        let mut weights = Self::init(config, InitScheme::ZeroHeads, 0)?;
        let expected = weights.params.iter().flatten().count();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter arrays, found {}",
                params.len()
            )));
        }
        for (slot, p) in weights.params.iter_mut().flatten().zip(params) {
            if slot.name != p.name || slot.shape != p.shape || p.data.len() != slot.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, slot.name, slot.shape
                )));
            }
            if !p.data.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {} is not finite", p.name)));
            }
            *slot = p;
        }
        Ok(weights)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Parameter arrays in canonical order.
    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().flatten()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params().find(|p| p.name == name)
    }

    pub(crate) fn weight_matrix(&self, layer: usize) -> ArrayView2<'_, T> {
        let spec = &self.layout.layers[layer];
        let rows = spec.weight_shape()[0];
        let w = &self.params[layer][0].data;
        ArrayView2::from_shape((rows, w.len() / rows), w).expect("weight length")
    }

    pub(crate) fn bias(&self, layer: usize) -> &[T] {
        &self.params[layer][1].data
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|pair| {
                    pair.clone().map(|p| Param {
                        name: p.name,
                        shape: p.shape,
                        data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                    })
                })
                .collect(),
            version: self.version,
        }
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            params: self
                .params
                .iter()
                .map(|pair| pair.clone().map(|p| vec![T::zero(); p.data.len()]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Number of learned scalars; each shared array is counted once.
pub fn count_parameters<T: Real>(weights: &ModelWeights<T>) -> usize {
    count_unique(weights.params())
}

/// Sums element counts over parameter arrays, counting each name once.
pub fn count_unique<'a, T: Real>(params: impl IntoIterator<Item = &'a Param<T>>) -> usize {
    let mut seen = std::collections::HashSet::new();
    params
        .into_iter()
        .filter(|p| seen.insert(p.name.as_str()))
        .map(Param::len)
        .sum()
}

/// Gradient buffers shaped like [`ModelWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub(crate) params: Vec<[Vec<T>; 2]>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn split_mut(&mut self, layer: usize, rows: usize) -> (ArrayViewMut2<'_, T>, &mut [T]) {
        let [w, b] = &mut self.params[layer];
        let cols = w.len() / rows;
        (
            ArrayViewMut2::from_shape((rows, cols), w).expect("gradient length"),
            b.as_mut_slice(),
        )
    }

    /// Gradient arrays in the same order as [`ModelWeights::params`].
    pub fn arrays(&self) -> impl Iterator<Item = &Vec<T>> {
        self.params.iter().flatten()
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.arrays_mut().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in self.arrays_mut() {
            for x in a.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> T {
        self.arrays()
            .flat_map(|a| a.iter())
            .fold(T::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_closed_form_count() {
        // 3x3 conv, 3 -> 8 channels with bias
        let spec = LayerSpec {
            name: "x".into(),
            kind: LayerKind::Conv { stride: 1 },
            in_ch: 3,
            out_ch: 8,
            kernel: 3,
            init: Init::FanIn,
        };
        let n: usize = spec.weight_shape().iter().product::<usize>() + spec.out_ch;
        assert_eq!(n, 224);
    }

    #[test]
    fn count_of_empty_set_is_zero() {
        assert_eq!(count_unique::<f32>(std::iter::empty()), 0);
        let p = Param::<f32> {
            name: "conv.weight".into(),
            shape: vec![8, 3, 3, 3],
            data: vec![0.0; 216],
        };
        let b = Param::<f32> {
            name: "conv.bias".into(),
            shape: vec![8],
            data: vec![0.0; 8],
        };
        assert_eq!(count_unique([&p, &b]), 224);
        // the same array referenced twice counts once
        assert_eq!(count_unique([&p, &b, &p]), 224);
    }

    #[test]
    fn zero_heads_are_zero() {
        let w = ModelWeights::<f32>::init(&NetConfig::uniform(4, 4), InitScheme::ZeroHeads, 7).unwrap();
        for p in w.params() {
            if p.name.contains(".head.") {
                assert!(p.data.iter().all(|v| *v == 0.0), "{}", p.name);
            }
        }
        assert!(w.param("base.stem.0.weight").unwrap().data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let c = NetConfig::uniform(4, 4);
        let a = ModelWeights::<f32>::init(&c, InitScheme::ZeroHeads, 1).unwrap();
        let b = ModelWeights::<f32>::init(&c, InitScheme::ZeroHeads, 1).unwrap();
        let d = ModelWeights::<f32>::init(&c, InitScheme::ZeroHeads, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn names_are_unique() {
        let w = ModelWeights::<f32>::init(&NetConfig::default(), InitScheme::ZeroHeads, 0).unwrap();
        let mut names: Vec<_> = w.params().map(|p| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
