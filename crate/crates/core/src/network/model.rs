use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{LayerConfig, LayerType, ModelConfig};
use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use super::thresholds::{LayerThresholds, RunningStats, StdMultiples, ThresholdTable};
use super::NetworkError;
use crate::arch::{ArchChoice, LayerOptions};
use crate::costmodel::{LayerSpec, MacKey, ModelManifest};
use crate::numerics::{NumericFormat, QuantConfig, Quantizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Dense,
    Conv,
    Depthwise,
}

/// One weight tensor per kernel size. Layers without kernel search have a
/// single branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kernel: Option<usize>,
    pub weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightLayer {
    pub name: String,
    pub kind: WeightKind,
    /// Per-example input shape: `[D]` for dense, `[C, H, W]` otherwise.
    pub in_shape: Vec<usize>,
    pub out_channels: usize,
    pub branches: Vec<Branch>,
    pub bias: Vec<f64>,
    pub searchable: bool,
    pub width_options: Vec<f64>,
    pub fixed_format: NumericFormat,
}

impl WeightLayer {
    pub fn in_channels(&self) -> usize {
        self.in_shape[0]
    }

    fn spatial(&self) -> (usize, usize) {
        match self.kind {
            WeightKind::Dense => (1, 1),
            _ => (self.in_shape[1], self.in_shape[2]),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self.kind {
            WeightKind::Dense => vec![self.out_channels],
            _ => vec![self.out_channels, self.in_shape[1], self.in_shape[2]],
        }
    }

    pub fn kernel_options(&self) -> Vec<Option<usize>> {
        self.branches.iter().map(|b| b.kernel).collect()
    }

    pub fn base_kernel(&self) -> Option<usize> {
        self.branches[0].kernel
    }

    /// Number of unmasked output channels under a width multiplier.
    pub fn active_channels(&self, width_mult: f64) -> usize {
        active_channels(self.out_channels, width_mult)
    }

    /// MACs per example for a width multiplier and kernel size.
    pub fn macs(&self, width_mult: f64, kernel: Option<usize>) -> u64 {
        let active = self.active_channels(width_mult) as u64;
        let (h, w) = self.spatial();
        let hw = (h * w) as u64;
        let k = kernel.unwrap_or(1) as u64;
        match self.kind {
            WeightKind::Dense => active * self.in_shape[0] as u64,
            WeightKind::Conv => hw * active * self.in_channels() as u64 * k * k,
            WeightKind::Depthwise => hw * active * k * k,
        }
    }

    fn parameter_count(&self) -> usize {
        self.branches.iter().map(|b| b.weight.len()).sum::<usize>() + self.bias.len()
    }
}

pub fn active_channels(channels: usize, width_mult: f64) -> usize {
    ((width_mult * channels as f64) - 1e-9).ceil().clamp(0.0, channels as f64) as usize
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Weight(usize),
    Relu,
    MaxPool { size: usize, in_shape: [usize; 3] },
    Flatten,
}

/// Which fake quantizers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantPhase {
    pub weight_quant_active: bool,
    pub act_quant_active: bool,
    pub act_quant_start_step: u64,
}

impl QuantPhase {
    pub fn off() -> Self {
        Self {
            weight_quant_active: false,
            act_quant_active: false,
            act_quant_start_step: u64::MAX,
        }
    }

    pub fn full() -> Self {
        Self {
            weight_quant_active: true,
            act_quant_active: true,
            act_quant_start_step: 0,
        }
    }

    /// Two-phase schedule: weights quantized from step 0, activations from
    /// `act_quant_start_step`.
    pub fn at_step(step: u64, act_quant_start_step: u64) -> Self {
        Self {
            weight_quant_active: true,
            act_quant_active: step >= act_quant_start_step,
            act_quant_start_step,
        }
    }

    pub fn any_active(&self) -> bool {
        self.weight_quant_active || self.act_quant_active
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    /// One choice per weight layer (see [`Network::resolve_archs`]).
    pub archs: &'a [ArchChoice],
    pub phase: QuantPhase,
    pub thresholds: Option<&'a ThresholdTable>,
    /// Run every kernel branch and average their outputs.
    pub joint_kernels: bool,
}

#[derive(Debug, Clone)]
struct BranchCache {
    branch: usize,
    weight_used: Vec<f64>,
    weight_pass: Option<Vec<bool>>,
    /// im2col matrix for conv, quantized input for dense/depthwise is shared.
    cols: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct WeightCache {
    layer: usize,
    batch: usize,
    input: Vec<f64>,
    input_stats: RunningStats,
    act_pass: Option<Vec<bool>>,
    branches: Vec<BranchCache>,
    active_out: usize,
}

#[derive(Debug, Clone)]
enum OpCache {
    Weight(WeightCache),
    Relu { output: Vec<f64> },
    MaxPool { argmax: Vec<usize>, in_len: usize },
    Flatten,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ops: Vec<OpCache>,
    logits: Tensor,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Input of each weight layer as seen by its kernels (after activation
    /// quantization when active).
    pub fn weight_inputs(&self) -> Vec<&[f64]> {
        self.ops
            .iter()
            .filter_map(|c| match c {
                OpCache::Weight(w) => Some(w.input.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Input statistics of each weight layer seen in this pass (pre-quantization).
    pub fn layer_input_stats(&self) -> Vec<RunningStats> {
        self.ops
            .iter()
            .filter_map(|c| match c {
                OpCache::Weight(w) => Some(w.input_stats),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    /// One gradient per kernel branch (zero for branches not executed).
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .weight_layers()
                .iter()
                .map(|l| LayerGradient {
                    weights: l.branches.iter().map(|b| vec![0.0; b.weight.len()]).collect(),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

/// A feed-forward network with a single set of full-precision master weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    ops: Vec<Op>,
    layers: Vec<WeightLayer>,
}

impl Network {
    /// Builds and He-normal initializes a network. Biases start at zero.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = config.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(NetworkError::Config(format!("invalid input shape {shape:?}")));
        }
        let mut ops = Vec::with_capacity(config.layers.len());
        let mut layers: Vec<WeightLayer> = Vec::new();
        let mut type_counts = [0usize; 3];
        for (i, lc) in config.layers.iter().enumerate() {
            let err = |msg: String| NetworkError::Config(format!("layer {i} ({:?}): {msg}", lc.kind));
            match lc.kind {
                LayerType::Relu => ops.push(Op::Relu),
                LayerType::Flatten => {
                    shape = vec![shape.iter().product()];
                    ops.push(Op::Flatten);
                }
                LayerType::Maxpool => {
                    let size = lc.params.size.unwrap_or(2);
                    let [c, h, w] = as_chw(&shape).ok_or_else(|| err(format!("expects [C,H,W] input, got {shape:?}")))?;
                    if size == 0 || h < size || w < size {
                        return Err(err(format!("pool size {size} does not fit {h}x{w}")));
                    }
                    ops.push(Op::MaxPool { size, in_shape: [c, h, w] });
                    shape = vec![c, h / size, w / size];
                }
                LayerType::Dense | LayerType::Conv | LayerType::Depthwise => {
                    let layer = build_weight_layer(lc, &shape, &mut type_counts, &mut rng).map_err(err)?;
                    shape = layer.out_shape();
                    ops.push(Op::Weight(layers.len()));
                    layers.push(layer);
                }
            }
        }
        if layers.is_empty() {
            return Err(NetworkError::Config("model has no weight layers".into()));
        }
        if shape.len() != 1 {
            return Err(NetworkError::Config(format!(
                "model output must be flat logits, got shape {shape:?}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(NetworkError::Config(format!("duplicate layer name `{}`", l.name)));
            }
        }
        Ok(Self {
            config: config.clone(),
            ops,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weight_layers(&self) -> &[WeightLayer] {
        &self.layers
    }

    pub fn weight_layers_mut(&mut self) -> &mut [WeightLayer] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(WeightLayer::parameter_count).sum()
    }

    pub fn searchable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].searchable).collect()
    }

    /// Option sets of the searchable layers for a list of formats.
    pub fn layer_options(&self, formats: &[NumericFormat]) -> Vec<LayerOptions> {
        self.searchable_layers()
            .into_iter()
            .map(|i| {
                let l = &self.layers[i];
                LayerOptions {
                    formats: formats.to_vec(),
                    widths: l.width_options.clone(),
                    kernels: l.kernel_options(),
                }
            })
            .collect()
    }

    /// Expands choices for the searchable layers into one choice per weight
    /// layer; non-searchable layers get their fixed format at full width.
    pub fn resolve_archs(&self, searchable: &[ArchChoice]) -> Result<Vec<ArchChoice>, NetworkError> {
        let expected = self.searchable_layers().len();
        if searchable.len() != expected {
            return Err(NetworkError::Config(format!(
                "expected {expected} searchable layer choices, got {}",
                searchable.len()
            )));
        }
        let mut it = searchable.iter();
        Ok(self
            .layers
            .iter()
            .map(|l| {
                if l.searchable {
                    *it.next().expect("counted above")
                } else {
                    ArchChoice {
                        format: l.fixed_format,
                        width_mult: 1.0,
                        kernel: l.base_kernel(),
                    }
                }
            })
            .collect())
    }

    /// Cost manifest with per-example MACs. Layers with width or kernel
    /// options carry a MAC table.
    pub fn manifest(&self) -> ModelManifest {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let base = l.macs(1.0, l.base_kernel());
                let table_needed = l.width_options.len() > 1
                    || l.width_options.first() != Some(&1.0)
                    || l.branches.len() > 1;
                let mac_table = table_needed.then(|| {
                    let mut widths = l.width_options.clone();
                    if !widths.iter().any(|&w| (w - 1.0).abs() < 1e-9) {
                        widths.push(1.0);
                    }
                    let mut table = Vec::new();
                    for &w in &widths {
                        for k in l.kernel_options() {
                            table.push((
                                MacKey {
                                    width: w,
                                    kernel: k.unwrap_or(1),
                                },
                                l.macs(w, k),
                            ));
                        }
                    }
                    table
                });
                LayerSpec {
                    name: l.name.clone(),
                    macs: base,
                    searchable: l.searchable,
                    fixed_format: (!l.searchable).then_some(l.fixed_format),
                    mac_table,
                }
            })
            .collect();
        ModelManifest::new(self.config.name.clone(), layers).expect("network layer names are unique")
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NetworkError> {
        if batch.shape().len() != self.config.input_shape.len() + 1 || batch.shape()[1..] != self.config.input_shape[..] {
            return Err(NetworkError::Shape(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor, opts: &ForwardOptions<'_>) -> Result<(Tensor, ForwardCache), NetworkError> {
        self.check_input(batch)?;
        if opts.archs.len() != self.layers.len() {
            return Err(NetworkError::Config(format!(
                "expected {} layer choices, got {}",
                self.layers.len(),
                opts.archs.len()
            )));
        }
        if opts.phase.any_active() && opts.thresholds.is_none() {
            return Err(NetworkError::MissingThreshold {
                layer: self.layers[0].name.clone(),
                format: opts.archs[0].format.to_string(),
            });
        }
        let n = batch.batch();
        let mut x = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.ops.len());
        for (op_index, op) in self.ops.iter().enumerate() {
            let (y, cache) = match op {
                Op::Relu => {
                    let y: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
                    (y.clone(), OpCache::Relu { output: y })
                }
                Op::Flatten => (x, OpCache::Flatten),
                Op::MaxPool { size, in_shape: [c, h, w] } => {
                    let in_len = x.len();
                    let (y, argmax) = kernels::maxpool_forward(&x, n, *c, *h, *w, *size);
                    (y, OpCache::MaxPool { argmax, in_len })
                }
                Op::Weight(li) => {
                    let (y, wc) = self.weight_forward(*li, x, n, opts)?;
                    (y, OpCache::Weight(wc))
                }
            };
            if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
                return Err(NetworkError::NonFinite {
                    layer: op_index,
                    value: y[bad],
                });
            }
            caches.push(cache);
            x = y;
        }
        let logits = Tensor::new(vec![n, self.num_classes()], x).expect("final layer is flat");
        Ok((
            logits.clone(),
            ForwardCache {
                ops: caches,
                logits,
            },
        ))
    }

    fn quantizer(
        &self,
        li: usize,
        format: NumericFormat,
        thresholds: &ThresholdTable,
        weight: bool,
    ) -> Result<Quantizer, NetworkError> {
        let t = if weight {
            thresholds.weight(li, format)
        } else {
            thresholds.activation(li, format)
        };
        let missing = || NetworkError::MissingThreshold {
            layer: self.layers[li].name.clone(),
            format: format.to_string(),
        };
        let t = t.ok_or_else(missing)?;
        let cfg = QuantConfig::new(t).map_err(|_| missing())?;
        Ok(Quantizer::new(format, cfg))
    }

    fn weight_forward(
        &self,
        li: usize,
        input: Vec<f64>,
        n: usize,
        opts: &ForwardOptions<'_>,
    ) -> Result<(Vec<f64>, WeightCache), NetworkError> {
        let layer = &self.layers[li];
        let arch = opts.archs[li];
        let input_stats = RunningStats::from_slice(&input);

        let (input, act_pass) = if opts.phase.act_quant_active {
            let q = self.quantizer(li, arch.format, opts.thresholds.expect("checked"), false)?;
            let pass = input.iter().map(|&v| q.passes_gradient(v)).collect();
            (input.iter().map(|&v| q.apply(v)).collect(), Some(pass))
        } else {
            (input, None)
        };

        let selected: Vec<usize> = if opts.joint_kernels && layer.branches.len() > 1 {
            (0..layer.branches.len()).collect()
        } else {
            let kernel = arch.kernel.or(layer.base_kernel());
            let b = layer
                .branches
                .iter()
                .position(|b| b.kernel == kernel)
                .ok_or_else(|| NetworkError::Config(format!("layer `{}` has no kernel {kernel:?} branch", layer.name)))?;
            vec![b]
        };
        let scale = 1.0 / selected.len() as f64;
        let out_shape = layer.out_shape();
        let out_len: usize = out_shape.iter().product();
        let mut y = vec![0.0; n * out_len];
        let mut branch_caches = Vec::with_capacity(selected.len());

        for &bi in &selected {
            let branch = &layer.branches[bi];
            let (weight_used, weight_pass) = if opts.phase.weight_quant_active {
                let q = self.quantizer(li, arch.format, opts.thresholds.expect("checked"), true)?;
                let w = branch.weight.data();
                (
                    w.iter().map(|&v| q.apply(v)).collect::<Vec<_>>(),
                    Some(w.iter().map(|&v| q.passes_gradient(v)).collect::<Vec<_>>()),
                )
            } else {
                (branch.weight.data().to_vec(), None)
            };
            let mut cols = None;
            match layer.kind {
                WeightKind::Dense => {
                    let mut out = vec![0.0; n * layer.out_channels];
                    kernels::dense_forward(&input, &weight_used, n, layer.in_shape[0], layer.out_channels, &mut out);
                    for (d, s) in y.iter_mut().zip(&out) {
                        *d += scale * s;
                    }
                }
                WeightKind::Conv => {
                    let g = self.geom(li, n, branch.kernel);
                    let c = kernels::im2col(&input, &g);
                    kernels::conv_forward(&c, &weight_used, &g, scale, &mut y);
                    cols = Some(c);
                }
                WeightKind::Depthwise => {
                    let g = self.geom(li, n, branch.kernel);
                    kernels::depthwise_forward(&input, &weight_used, &g, scale, &mut y);
                }
            }
            branch_caches.push(BranchCache {
                branch: bi,
                weight_used,
                weight_pass,
                cols,
            });
        }

        let active_out = layer.active_channels(arch.width_mult);
        let per_channel = out_len / layer.out_channels;
        for ex in 0..n {
            let row = &mut y[ex * out_len..(ex + 1) * out_len];
            for (ch, chunk) in row.chunks_mut(per_channel).enumerate() {
                if ch < active_out {
                    let b = layer.bias[ch];
                    chunk.iter_mut().for_each(|v| *v += b);
                } else {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        let cache = WeightCache {
            layer: li,
            batch: n,
            input,
            input_stats,
            act_pass,
            branches: branch_caches,
            active_out,
        };
        Ok((y, cache))
    }

    fn geom(&self, li: usize, n: usize, kernel: Option<usize>) -> ConvGeom {
        let l = &self.layers[li];
        ConvGeom {
            n,
            c_in: l.in_shape[0],
            c_out: l.out_channels,
            h: l.in_shape[1],
            w: l.in_shape[2],
            k: kernel.expect("conv layers carry a kernel"),
        }
    }

    /// Mean softmax cross-entropy and its gradient w.r.t. every master weight.
    ///
    /// Quantizers use the clipped straight-through estimator: identity inside
    /// the clipping range, zero outside. Masked channels get zero gradient.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradients), NetworkError> {
        let (loss, mut grad) = cross_entropy(&cache.logits, labels)?;
        let mut grads = Gradients::zeros_like(self);
        for (op, op_cache) in self.ops.iter().zip(&cache.ops).rev() {
            grad = match (op, op_cache) {
                (Op::Relu, OpCache::Relu { output }) => grad
                    .iter()
                    .zip(output)
                    .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                    .collect(),
                (Op::Flatten, OpCache::Flatten) => grad,
                (Op::MaxPool { .. }, OpCache::MaxPool { argmax, in_len }) => {
                    let mut dx = vec![0.0; *in_len];
                    for (&g, &i) in grad.iter().zip(argmax) {
                        dx[i] += g;
                    }
                    dx
                }
                (Op::Weight(_), OpCache::Weight(wc)) => self.weight_backward(wc, grad, &mut grads),
                _ => unreachable!("cache mirrors ops"),
            };
        }
        Ok((loss, grads))
    }

    fn weight_backward(&self, wc: &WeightCache, mut dy: Vec<f64>, grads: &mut Gradients) -> Vec<f64> {
        let layer = &self.layers[wc.layer];
        let n = wc.batch;
        let out_len = dy.len() / n;
        let per_channel = out_len / layer.out_channels;
        let lg = &mut grads.layers[wc.layer];
        for ex in 0..n {
            let row = &mut dy[ex * out_len..(ex + 1) * out_len];
            for (ch, chunk) in row.chunks_mut(per_channel).enumerate() {
                if ch < wc.active_out {
                    lg.bias[ch] += chunk.iter().sum::<f64>();
                } else {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let scale = 1.0 / wc.branches.len() as f64;
        let dy_scaled: Vec<f64> = if wc.branches.len() > 1 {
            dy.iter().map(|v| v * scale).collect()
        } else {
            dy
        };
        let mut dx = vec![0.0; wc.input.len()];
        for bc in &wc.branches {
            let branch = &layer.branches[bc.branch];
            let mut dw = vec![0.0; branch.weight.len()];
            match layer.kind {
                WeightKind::Dense => {
                    let mut dxb = vec![0.0; wc.input.len()];
                    kernels::dense_backward(
                        &wc.input,
                        &bc.weight_used,
                        &dy_scaled,
                        n,
                        layer.in_shape[0],
                        layer.out_channels,
                        &mut dw,
                        &mut dxb,
                    );
                    dx.iter_mut().zip(&dxb).for_each(|(a, b)| *a += b);
                }
                WeightKind::Conv => {
                    let g = self.geom(wc.layer, n, branch.kernel);
                    let cols = bc.cols.as_ref().expect("conv caches columns");
                    kernels::conv_backward(cols, &bc.weight_used, &dy_scaled, &g, &mut dw, &mut dx);
                }
                WeightKind::Depthwise => {
                    let g = self.geom(wc.layer, n, branch.kernel);
                    kernels::depthwise_backward(&wc.input, &bc.weight_used, &dy_scaled, &g, &mut dw, &mut dx);
                }
            }
            if let Some(pass) = &bc.weight_pass {
                dw.iter_mut().zip(pass).for_each(|(g, &p)| {
                    if !p {
                        *g = 0.0
                    }
                });
            }
            lg.weights[bc.branch].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        if let Some(pass) = &wc.act_pass {
            dx.iter_mut().zip(pass).for_each(|(g, &p)| {
                if !p {
                    *g = 0.0
                }
            });
        }
        dx
    }

    /// Profiles activation thresholds (std multiple × input std of each weight
    /// layer, over unquantized forwards) and weight thresholds (max |w|).
    pub fn profile_thresholds(
        &self,
        batches: &[Tensor],
        archs: &[ArchChoice],
        multiples: &StdMultiples,
        formats: &[NumericFormat],
    ) -> Result<ThresholdTable, NetworkError> {
        if batches.is_empty() {
            return Err(NetworkError::Config("threshold profiling needs at least one batch".into()));
        }
        let mut stats = vec![RunningStats::default(); self.layers.len()];
        let opts = ForwardOptions {
            archs,
            phase: QuantPhase::off(),
            thresholds: None,
            joint_kernels: false,
        };
        for batch in batches {
            let (_, cache) = self.forward(batch, &opts)?;
            for (acc, s) in stats.iter_mut().zip(cache.layer_input_stats()) {
                acc.merge(&s);
            }
        }
        let mut table = ThresholdTable::default();
        for (li, (layer, s)) in self.layers.iter().zip(&stats).enumerate() {
            let std = s.std();
            if !(std > 1e-12) {
                return Err(NetworkError::DegenerateThreshold {
                    layer: layer.name.clone(),
                });
            }
            let mut entry = LayerThresholds {
                name: layer.name.clone(),
                ..Default::default()
            };
            let mut all_formats: Vec<NumericFormat> = formats.to_vec();
            all_formats.push(layer.fixed_format);
            for f in all_formats {
                entry.activation.insert(f, multiples.for_format(f) * std);
            }
            table.layers.push(entry);
            table.set_weight_threshold(li, self.weight_max_abs(li));
        }
        Ok(table)
    }

    /// Largest |w| of a layer over all branches; 1 for an all-zero layer.
    pub fn weight_max_abs(&self, li: usize) -> f64 {
        let m = self.layers[li]
            .branches
            .iter()
            .flat_map(|b| b.weight.data())
            .fold(0.0f64, |m, &w| m.max(w.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    /// Resets every weight threshold to the current max |w| of its layer.
    pub fn refresh_weight_thresholds(&self, table: &mut ThresholdTable) {
        for li in 0..self.layers.len().min(table.layers.len()) {
            table.set_weight_threshold(li, self.weight_max_abs(li));
        }
    }
}

fn as_chw(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

fn build_weight_layer(
    lc: &LayerConfig,
    shape: &[usize],
    type_counts: &mut [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<WeightLayer, String> {
    let (kind, slot, prefix) = match lc.kind {
        LayerType::Dense => (WeightKind::Dense, 0, "dense"),
        LayerType::Conv => (WeightKind::Conv, 1, "conv"),
        _ => (WeightKind::Depthwise, 2, "depthwise"),
    };
    type_counts[slot] += 1;
    let name = lc.name.clone().unwrap_or_else(|| format!("{prefix}{}", type_counts[slot]));
    let width_options = lc.width_options.clone().unwrap_or_else(|| vec![1.0]);
    if width_options.is_empty() || width_options.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
        return Err(format!("width_options must be non-empty and within (0, 1], got {width_options:?}"));
    }

    let (in_shape, out_channels, kernels): (Vec<usize>, usize, Vec<Option<usize>>) = match kind {
        WeightKind::Dense => {
            if shape.len() != 1 {
                return Err(format!("dense expects a flat input, got {shape:?} (add a flatten layer)"));
            }
            let units = lc.params.units.ok_or("dense requires params.units")?;
            if let Some(declared) = lc.params.in_features {
                if declared != shape[0] {
                    return Err(format!("declared in_features {declared} but input has {}", shape[0]));
                }
            }
            if lc.kernel_options.is_some() {
                return Err("dense layers have no kernel options".into());
            }
            (shape.to_vec(), units, vec![None])
        }
        WeightKind::Conv | WeightKind::Depthwise => {
            let [c, _, _] = as_chw(shape).ok_or_else(|| format!("expects [C,H,W] input, got {shape:?}"))?;
            if let Some(declared) = lc.params.in_channels {
                if declared != c {
                    return Err(format!("declared in_channels {declared} but input has {c}"));
                }
            }
            let base = lc.params.kernel.ok_or("requires params.kernel")?;
            let mut ks = vec![base];
            for &k in lc.kernel_options.iter().flatten() {
                if !ks.contains(&k) {
                    ks.push(k);
                }
            }
            if ks.iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(format!("kernel sizes must be odd, got {ks:?}"));
            }
            let out = if kind == WeightKind::Conv {
                lc.params.out_channels.ok_or("conv requires params.out_channels")?
            } else {
                if let Some(o) = lc.params.out_channels {
                    if o != c {
                        return Err(format!("depthwise out_channels {o} must equal input channels {c}"));
                    }
                }
                c
            };
            (shape.to_vec(), out, ks.into_iter().map(Some).collect())
        }
    };
    if out_channels == 0 {
        return Err("layer has zero outputs".into());
    }

    let branches = kernels
        .into_iter()
        .map(|kernel| {
            let (wshape, fan_in) = match kind {
                WeightKind::Dense => (vec![out_channels, in_shape[0]], in_shape[0]),
                WeightKind::Conv => {
                    let k = kernel.unwrap();
                    (vec![out_channels, in_shape[0], k, k], in_shape[0] * k * k)
                }
                WeightKind::Depthwise => {
                    let k = kernel.unwrap();
                    (vec![out_channels, 1, k, k], k * k)
                }
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let count: usize = wshape.iter().product();
            let data = (0..count).map(|_| normal.sample(rng)).collect();
            Branch {
                kernel,
                weight: Tensor::new(wshape, data).expect("sized above"),
            }
        })
        .collect();

    Ok(WeightLayer {
        name,
        kind,
        in_shape,
        out_channels,
        branches,
        bias: vec![0.0; out_channels],
        searchable: lc.searchable,
        width_options,
        fixed_format: lc.fixed_format.unwrap_or(NumericFormat::Bf16),
    })
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>), NetworkError> {
    let n = logits.batch();
    let k = logits.row_len();
    if labels.len() != n {
        return Err(NetworkError::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(NetworkError::Shape(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[i * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Fraction of rows whose argmax equals the label (first maximum wins).
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let row = logits.row(*i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// SGD with momentum and decoupled-from-bias L2 weight decay on master weights.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    /// `v ← μ·v + g + λ·w`, `w ← w − lr·v` (bias without decay).
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        let velocity = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        for ((layer, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
            for ((branch, gw), vw) in layer.branches.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                for ((w, &gi), vi) in branch.weight.data_mut().iter_mut().zip(gw).zip(vw.iter_mut()) {
                    *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                    *w -= self.learning_rate * *vi;
                }
            }
            for ((b, &gi), vi) in layer.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *b -= self.learning_rate * *vi;
            }
        }
    }
}
