//! The one-shot search loop, fixed-format baselines, serving and sweeps.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchChoice, SearchSpace};
use crate::controller::{Controller, ControllerConfig, LayerPolicy};
use crate::costmodel::{model_cost, reward, RewardParams, GIGA};
use crate::data::{self, BatchPlan, DataError, Dataset, Split};
use crate::network::checkpoint::{load_checkpoint, round_to_f32};
use crate::network::thresholds::LayerThresholds;
use crate::network::{
    accuracy, ForwardOptions, ModelConfig, Network, NetworkError, QuantPhase, Sgd, StdMultiples, Tensor,
    ThresholdTable,
};
use crate::numerics::{NumericFormat, QuantConfig, Quantizer};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("step {step}: {message}")]
    Step {
        step: u64,
        message: String,
        /// Records of every step completed before the failure.
        partial: Vec<TraceRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    /// `mlp-<depth>x<width>` or `cnn-small`, sized from the dataset.
    Preset(String),
    Config(ModelConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dims: usize,
        n_per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic 28×28 digit-like glyphs in MNIST format.
    Glyphs {
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset, DataError> {
        match self {
            DataSource::Blobs {
                classes,
                dims,
                n_per_class,
                separation,
                seed,
            } => data::synth_blobs(*classes, *dims, *n_per_class, *separation, *seed),
            DataSource::Glyphs { n, seed } => data::synth_glyphs(*n, *seed),
            DataSource::Idx { images, labels, limit } => {
                let ds = data::load_idx(images, labels)?;
                Ok(match limit {
                    Some(n) => ds.truncate(*n),
                    None => ds,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CostTarget {
    Bops(f64),
    Gbops(f64),
    /// Cost of the model with every searchable layer in one format.
    Uniform(NumericFormat),
    /// `low + fraction · (high − low)` between two uniform costs.
    Interpolate {
        low: NumericFormat,
        high: NumericFormat,
        fraction: f64,
    },
}

impl std::fmt::Display for CostTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CostTarget::Bops(b) => write!(f, "{b}bops"),
            CostTarget::Gbops(g) => write!(f, "{g}gbops"),
            CostTarget::Uniform(fmt) => write!(f, "uniform-{fmt}"),
            CostTarget::Interpolate { low, high, fraction } => write!(f, "{low}-{high}@{fraction}"),
        }
    }
}

impl CostTarget {
    pub fn resolve(&self, net: &Network) -> Result<f64, SearchError> {
        let manifest = net.manifest();
        let uniform = |format: NumericFormat| -> Result<f64, SearchError> {
            let archs = uniform_archs(net, format)?;
            model_cost(&archs, &manifest).map_err(|e| SearchError::Config(e.to_string()))
        };
        let bops = match *self {
            CostTarget::Bops(b) => b,
            CostTarget::Gbops(g) => g * GIGA,
            CostTarget::Uniform(f) => uniform(f)?,
            CostTarget::Interpolate { low, high, fraction } => {
                let (l, h) = (uniform(low)?, uniform(high)?);
                l + fraction * (h - l)
            }
        };
        if !(bops > 0.0 && bops.is_finite()) {
            return Err(SearchError::Config(format!("cost target {self} resolves to {bops} BOPs")));
        }
        Ok(bops)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub validation_fraction: f64,
    pub calibration_batches: usize,
    pub std_multiples: StdMultiples,
    /// Batch size for the final served-model evaluation.
    pub eval_batch_size: usize,
    /// Skip weight updates (controller-only runs).
    pub freeze_weights: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            validation_fraction: 0.1,
            calibration_batches: 4,
            std_multiples: StdMultiples::default(),
            eval_batch_size: 500,
            freeze_weights: false,
        }
    }
}

fn default_act_start() -> f64 {
    0.2
}

fn default_gamma() -> f64 {
    crate::costmodel::default_gamma()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    #[serde(default = "default_space")]
    pub search_space: SearchSpace,
    pub total_steps: u64,
    #[serde(default = "default_act_start")]
    pub act_quant_start_fraction: f64,
    pub cost_target: CostTarget,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_space() -> SearchSpace {
    SearchSpace::FliqsSInt
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.act_quant_start_fraction > 0.0 && self.act_quant_start_fraction < 1.0) {
            return bad(format!(
                "act_quant_start_fraction must be in (0, 1), got {}",
                self.act_quant_start_fraction
            ));
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite".into());
        }
        self.controller.validate().map_err(SearchError::Config)?;
        let t = &self.trainer;
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(t.learning_rate >= 0.0 && (0.0..1.0).contains(&t.momentum) && t.weight_decay >= 0.0) {
            return bad("trainer needs learning_rate ≥ 0, momentum in [0, 1), weight_decay ≥ 0".into());
        }
        if !(t.validation_fraction > 0.0 && t.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must be in (0, 1), got {}", t.validation_fraction));
        }
        if t.calibration_batches == 0 {
            return bad("calibration_batches must be positive".into());
        }
        if self.search_space.formats().is_empty() {
            return bad("search space is empty".into());
        }
        Ok(())
    }

    /// Batch order and train/validation split of this run.
    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.trainer.batch_size,
            seed: derive_seed(self.seed, 2),
            validation_fraction: self.trainer.validation_fraction,
        }
    }

    /// Step at which activation quantization switches on.
    pub fn act_quant_start_step(&self) -> u64 {
        (self.act_quant_start_fraction * self.total_steps as f64).round() as u64
    }

    pub fn build_network(&self, ds: &Dataset) -> Result<Network, SearchError> {
        let config = match &self.model {
            ModelSpec::Preset(name) => ModelConfig::preset(name, ds.example_shape(), ds.classes)
                .ok_or_else(|| {
                    SearchError::Config(format!(
                        "unknown preset `{name}` for input shape {:?}",
                        ds.example_shape()
                    ))
                })?,
            ModelSpec::Config(c) => c.clone(),
        };
        if config.input_shape != ds.example_shape() {
            return Err(SearchError::Config(format!(
                "model input shape {:?} does not match data shape {:?}",
                config.input_shape,
                ds.example_shape()
            )));
        }
        let net = Network::build(&config, derive_seed(self.seed, 1))?;
        if net.num_classes() != ds.classes {
            return Err(SearchError::Config(format!(
                "model emits {} classes, data has {}",
                net.num_classes(),
                ds.classes
            )));
        }
        if net.searchable_layers().is_empty() {
            return Err(SearchError::Config("model has no searchable layers".into()));
        }
        Ok(net)
    }
}

/// Independent sub-seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One choice per searchable layer: `format` at full width and base kernel.
pub fn uniform_choices(net: &Network, format: NumericFormat) -> Vec<ArchChoice> {
    net.searchable_layers()
        .into_iter()
        .map(|i| ArchChoice {
            format,
            width_mult: 1.0,
            kernel: net.weight_layers()[i].base_kernel(),
        })
        .collect()
}

fn uniform_archs(net: &Network, format: NumericFormat) -> Result<Vec<ArchChoice>, SearchError> {
    Ok(net.resolve_archs(&uniform_choices(net, format))?)
}

/// One search step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Sampled choice per searchable layer.
    pub sampled: Vec<ArchChoice>,
    pub quality: f64,
    /// Model cost in BOPs.
    pub cost: f64,
    pub reward: f64,
    pub advantage: f64,
    pub entropy: f64,
    pub beta: f64,
    pub loss: f64,
    /// RMS change of the quantized weight view against the previous step's formats.
    pub switch_rms: f64,
    pub act_quant: bool,
    pub policy_updated: bool,
    pub argmax: Vec<ArchChoice>,
    pub pmax: Vec<f64>,
}

pub const TRACE_COLUMNS: [&str; 11] = [
    "step",
    "reward",
    "quality",
    "cost_gbops",
    "entropy",
    "beta",
    "loss",
    "advantage",
    "switch_rms",
    "act_quant",
    "policy_updated",
];

/// Writes the trace CSV: the fixed columns, then `<layer>.arch`,
/// `<layer>.argmax` and `<layer>.pmax` per searchable layer.
pub fn write_trace_csv<W: Write>(w: W, layers: &[String], trace: &[TraceRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for l in layers {
        header.extend([format!("{l}.arch"), format!("{l}.argmax"), format!("{l}.pmax")]);
    }
    out.write_record(&header)?;
    for r in trace {
        let mut row = vec![
            r.step.to_string(),
            r.reward.to_string(),
            r.quality.to_string(),
            (r.cost / GIGA).to_string(),
            r.entropy.to_string(),
            r.beta.to_string(),
            r.loss.to_string(),
            r.advantage.to_string(),
            r.switch_rms.to_string(),
            u8::from(r.act_quant).to_string(),
            u8::from(r.policy_updated).to_string(),
        ];
        for i in 0..layers.len() {
            row.push(r.sampled.get(i).map(ToString::to_string).unwrap_or_default());
            row.push(r.argmax.get(i).map(ToString::to_string).unwrap_or_default());
            row.push(r.pmax.get(i).map(ToString::to_string).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Outcome of a search or fixed-architecture run.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub layer_names: Vec<String>,
    /// Served choice per searchable layer (policy argmax for searches).
    pub final_archs: Vec<ArchChoice>,
    pub options: Vec<Vec<ArchChoice>>,
    /// Final policy probabilities per searchable layer; empty for fixed runs.
    pub final_probs: Vec<Vec<f64>>,
    pub trace: Vec<TraceRecord>,
    /// Accuracy of the served model on the full validation split.
    pub served_accuracy: f64,
    pub served_cost: f64,
    pub cost_target: f64,
    pub network: Network,
    pub thresholds: ThresholdTable,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultSummary {
    pub layers: Vec<ServedChoice>,
    pub final_probs: Vec<Vec<f64>>,
    pub served_accuracy: f64,
    pub served_cost_gbops: f64,
    pub cost_target_gbops: f64,
    pub steps: usize,
    pub weights: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ServedChoice {
    pub name: String,
    pub choice: String,
}

impl SearchResult {
    pub fn summary(&self, weights_file: &str) -> ResultSummary {
        ResultSummary {
            layers: self
                .layer_names
                .iter()
                .zip(&self.final_archs)
                .map(|(n, a)| ServedChoice {
                    name: n.clone(),
                    choice: a.to_string(),
                })
                .collect(),
            final_probs: self.final_probs.clone(),
            served_accuracy: self.served_accuracy,
            served_cost_gbops: self.served_cost / GIGA,
            cost_target_gbops: self.cost_target / GIGA,
            steps: self.trace.len(),
            weights: weights_file.to_string(),
        }
    }

    pub fn archs_label(&self) -> String {
        self.final_archs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }
}

/// Per-layer served architecture plus thresholds; together with a weight
/// checkpoint it reconstructs the served model exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServedConfig {
    pub model: ModelConfig,
    pub layers: Vec<ServedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServedLayer {
    pub name: String,
    pub searchable: bool,
    pub format: NumericFormat,
    pub width_mult: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    pub activation_threshold: f64,
    pub weight_threshold: f64,
}

pub fn serve_config(result: &SearchResult) -> ServedConfig {
    let net = &result.network;
    let archs = net.resolve_archs(&result.final_archs).expect("result archs match the network");
    let layers = net
        .weight_layers()
        .iter()
        .zip(&archs)
        .enumerate()
        .map(|(li, (l, a))| ServedLayer {
            name: l.name.clone(),
            searchable: l.searchable,
            format: a.format,
            width_mult: a.width_mult,
            kernel: a.kernel,
            activation_threshold: result.thresholds.activation(li, a.format).expect("profiled"),
            weight_threshold: result.thresholds.weight(li, a.format).expect("profiled"),
        })
        .collect();
    ServedConfig {
        model: net.config().clone(),
        layers,
    }
}

/// A reconstructed served model.
#[derive(Debug, Clone)]
pub struct ServedModel {
    pub network: Network,
    pub archs: Vec<ArchChoice>,
    pub thresholds: ThresholdTable,
}

impl ServedConfig {
    pub fn load<R: Read>(&self, weights: R) -> Result<ServedModel, SearchError> {
        let mut network = Network::build(&self.model, 0)?;
        load_checkpoint(&mut network, weights)?;
        if network.weight_layers().len() != self.layers.len() {
            return Err(SearchError::Config(format!(
                "served config lists {} layers, model has {}",
                self.layers.len(),
                network.weight_layers().len()
            )));
        }
        let mut thresholds = ThresholdTable::default();
        let mut archs = Vec::with_capacity(self.layers.len());
        for (l, s) in network.weight_layers().iter().zip(&self.layers) {
            if l.name != s.name {
                return Err(SearchError::Config(format!("served layer `{}` where model has `{}`", s.name, l.name)));
            }
            let mut entry = LayerThresholds {
                name: s.name.clone(),
                ..Default::default()
            };
            entry.activation.insert(s.format, s.activation_threshold);
            entry.weight.insert(s.format, s.weight_threshold);
            thresholds.layers.push(entry);
            archs.push(ArchChoice {
                format: s.format,
                width_mult: s.width_mult,
                kernel: s.kernel,
            });
        }
        Ok(ServedModel {
            network,
            archs,
            thresholds,
        })
    }
}

impl ServedModel {
    pub fn evaluate(&self, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64, SearchError> {
        evaluate(
            &self.network,
            ds,
            indices,
            &self.archs,
            QuantPhase::full(),
            Some(&self.thresholds),
            batch_size,
        )
    }
}

/// Accuracy over `indices` in chunks of `batch_size`.
pub fn evaluate(
    net: &Network,
    ds: &Dataset,
    indices: &[usize],
    archs: &[ArchChoice],
    phase: QuantPhase,
    thresholds: Option<&ThresholdTable>,
    batch_size: usize,
) -> Result<f64, SearchError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let opts = ForwardOptions {
        archs,
        phase,
        thresholds,
        joint_kernels: false,
    };
    let mut correct = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = ds.gather(chunk);
        let (logits, _) = net.forward(&x, &opts)?;
        correct += accuracy(&logits, &y) * chunk.len() as f64;
    }
    Ok(correct / indices.len() as f64)
}

/// Optional overrides for the search loop.
#[derive(Default)]
pub struct SearchHooks<'a> {
    /// Replaces the validation-accuracy quality signal.
    pub quality: Option<Box<dyn FnMut(u64, &[ArchChoice]) -> f64 + 'a>>,
}

struct Trainer<'d> {
    cfg: SearchConfig,
    data: &'d Dataset,
    net: Network,
    sgd: Sgd,
    plan: BatchPlan,
    split: Split,
    val_batches: Vec<(Tensor, Vec<usize>)>,
    queue: VecDeque<Vec<usize>>,
    epoch: u64,
    thresholds: ThresholdTable,
    formats: Vec<NumericFormat>,
    act_start: u64,
}

impl<'d> Trainer<'d> {
    fn new(cfg: &SearchConfig, data: &'d Dataset, extra_formats: &[NumericFormat]) -> Result<Self, SearchError> {
        cfg.validate()?;
        let net = cfg.build_network(data)?;
        let t = &cfg.trainer;
        let plan = cfg.batch_plan();
        let split = plan.split(data.len())?;
        if split.validation.is_empty() {
            return Err(SearchError::Config("validation split is empty".into()));
        }
        let val_batches = plan
            .validation_batches(&split)
            .iter()
            .map(|idx| data.gather(idx))
            .collect();
        let mut formats = cfg.search_space.formats();
        for f in extra_formats {
            if !formats.contains(f) {
                formats.push(*f);
            }
        }
        let mut trainer = Self {
            cfg: cfg.clone(),
            data,
            sgd: Sgd::new(t.learning_rate, t.momentum, t.weight_decay),
            net,
            plan,
            split,
            val_batches,
            queue: VecDeque::new(),
            epoch: 0,
            thresholds: ThresholdTable::default(),
            formats,
            act_start: cfg.act_quant_start_step(),
        };
        trainer.profile()?;
        Ok(trainer)
    }

    fn calibration(&self) -> Vec<Tensor> {
        self.split
            .train
            .chunks(self.plan.batch_size)
            .take(self.cfg.trainer.calibration_batches)
            .map(|idx| self.data.gather(idx).0)
            .collect()
    }

    fn profile(&mut self) -> Result<(), SearchError> {
        let archs = uniform_archs(&self.net, NumericFormat::Bf16)?;
        self.thresholds = self.net.profile_thresholds(
            &self.calibration(),
            &archs,
            &self.cfg.trainer.std_multiples,
            &self.formats,
        )?;
        Ok(())
    }

    fn next_batch(&mut self) -> Result<Vec<usize>, SearchError> {
        if self.queue.is_empty() {
            self.queue = self.plan.batches(&self.split, self.epoch)?.into();
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().expect("refilled"))
    }

    fn phase(&self, step: u64) -> QuantPhase {
        QuantPhase::at_step(step, self.act_start)
    }

    /// Profiles activations at the activation-quantization start step and
    /// refreshes weight thresholds every step.
    fn prepare(&mut self, step: u64) -> Result<(), SearchError> {
        if step == self.act_start && step > 0 {
            self.profile()?;
        }
        self.net.refresh_weight_thresholds(&mut self.thresholds);
        Ok(())
    }

    fn train_step(&mut self, step: u64, archs: &[ArchChoice], joint: bool) -> Result<f64, SearchError> {
        let idx = self.next_batch()?;
        let (x, y) = self.data.gather(&idx);
        let opts = ForwardOptions {
            archs,
            phase: self.phase(step),
            thresholds: Some(&self.thresholds),
            joint_kernels: joint,
        };
        let (_, cache) = self.net.forward(&x, &opts)?;
        let (loss, grads) = self.net.backward(&cache, &y)?;
        if !self.cfg.trainer.freeze_weights {
            let base = self.cfg.trainer.learning_rate;
            self.sgd.learning_rate = match self.cfg.trainer.lr_schedule {
                LrSchedule::Constant => base,
                LrSchedule::Cosine => {
                    let s = step as f64 / self.cfg.total_steps as f64;
                    0.5 * base * (1.0 + (std::f64::consts::PI * s).cos())
                }
            };
            self.sgd.step(&mut self.net, &grads);
        }
        if !loss.is_finite() {
            return Err(NetworkError::NonFinite {
                layer: self.net.weight_layers().len(),
                value: loss,
            }
            .into());
        }
        Ok(loss)
    }

    fn quality(&self, step: u64, archs: &[ArchChoice]) -> Result<f64, SearchError> {
        let (x, y) = &self.val_batches[(step as usize) % self.val_batches.len()];
        let opts = ForwardOptions {
            archs,
            phase: self.phase(step),
            thresholds: Some(&self.thresholds),
            joint_kernels: false,
        };
        let (logits, _) = self.net.forward(x, &opts)?;
        Ok(accuracy(&logits, y))
    }

    /// RMS difference between the weight views of searchable layers under
    /// two choices, over all searchable weights.
    fn switch_rms(&self, prev: &[ArchChoice], cur: &[ArchChoice]) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((li, a), b) in self.net.searchable_layers().into_iter().zip(prev).zip(cur) {
            let layer = &self.net.weight_layers()[li];
            let w = layer.branches[0].weight.data();
            count += w.len();
            if a.format == b.format {
                continue;
            }
            let q = |f: NumericFormat| {
                let t = self.thresholds.weight(li, f).expect("profiled");
                Quantizer::new(f, QuantConfig::new(t).expect("positive threshold"))
            };
            let (qa, qb) = (q(a.format), q(b.format));
            sum += w.iter().map(|&v| (qa.apply(v) - qb.apply(v)).powi(2)).sum::<f64>();
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64).sqrt()
        }
    }

    fn finish(
        mut self,
        served: Vec<ArchChoice>,
        options: Vec<Vec<ArchChoice>>,
        final_probs: Vec<Vec<f64>>,
        trace: Vec<TraceRecord>,
        cost_target: f64,
    ) -> Result<SearchResult, SearchError> {
        round_to_f32(&mut self.net);
        self.net.refresh_weight_thresholds(&mut self.thresholds);
        let archs = self.net.resolve_archs(&served)?;
        let served_accuracy = evaluate(
            &self.net,
            self.data,
            &self.split.validation,
            &archs,
            QuantPhase::full(),
            Some(&self.thresholds),
            self.cfg.trainer.eval_batch_size,
        )?;
        let served_cost = model_cost(&archs, &self.net.manifest()).map_err(|e| SearchError::Config(e.to_string()))?;
        let layer_names = self
            .net
            .searchable_layers()
            .into_iter()
            .map(|i| self.net.weight_layers()[i].name.clone())
            .collect();
        Ok(SearchResult {
            layer_names,
            final_archs: served,
            options,
            final_probs,
            trace,
            served_accuracy,
            served_cost,
            cost_target,
            network: self.net,
            thresholds: self.thresholds,
        })
    }
}

fn step_error(step: u64, err: SearchError, trace: &[TraceRecord]) -> SearchError {
    SearchError::Step {
        step,
        message: err.to_string(),
        partial: trace.to_vec(),
    }
}

pub fn run_search(cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    let data = cfg.data.load()?;
    run_search_on(cfg, &data, &mut SearchHooks::default())
}

/// The search loop on an already loaded dataset.
pub fn run_search_on(cfg: &SearchConfig, data: &Dataset, hooks: &mut SearchHooks<'_>) -> Result<SearchResult, SearchError> {
    let mut trainer = Trainer::new(cfg, data, &[])?;
    let cost_target = cfg.cost_target.resolve(&trainer.net)?;
    let params = RewardParams {
        cost_target,
        gamma: cfg.gamma,
    };
    let manifest = trainer.net.manifest();
    let formats = cfg.search_space.formats();
    let options: Vec<Vec<ArchChoice>> = trainer.net.layer_options(&formats).iter().map(|o| o.choices()).collect();
    let policies = options.iter().cloned().map(LayerPolicy::uniform).collect();
    let mut controller = Controller::new(policies, cfg.controller.clone(), derive_seed(cfg.seed, 3));
    let has_kernel_choice = trainer.net.weight_layers().iter().any(|l| l.branches.len() > 1);
    let warmup = cfg.controller.warmup_fraction;

    let mut trace: Vec<TraceRecord> = Vec::with_capacity(cfg.total_steps as usize);
    let mut prev: Option<Vec<ArchChoice>> = None;
    for step in 0..cfg.total_steps {
        let progress = step as f64 / cfg.total_steps as f64;
        let fail = |e: SearchError, t: &[TraceRecord]| step_error(step, e, t);
        trainer.prepare(step).map_err(|e| fail(e, &trace))?;

        let entropy = controller.model_entropy();
        let argmax = controller.choices(&controller.argmax());
        let pmax = controller
            .probs()
            .iter()
            .map(|p| p.iter().copied().fold(0.0, f64::max))
            .collect();
        let sampled_idx = controller.sample(step, progress);
        let sampled = controller.choices(&sampled_idx);
        let archs = trainer.net.resolve_archs(&sampled).map_err(|e| fail(e.into(), &trace))?;

        let joint = has_kernel_choice && progress < warmup && {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
            rng.set_stream(step);
            rng.gen::<f64>() < 1.0 - progress / warmup
        };
        let loss = trainer.train_step(step, &archs, joint).map_err(|e| fail(e, &trace))?;
        let quality = match hooks.quality.as_mut() {
            Some(q) => q(step, &sampled),
            None => trainer.quality(step, &archs).map_err(|e| fail(e, &trace))?,
        };
        let cost = model_cost(&archs, &manifest).map_err(|e| fail(SearchError::Config(e.to_string()), &trace))?;
        let r = reward(quality, cost, &params).map_err(|e| fail(SearchError::Config(e.to_string()), &trace))?;
        let outcome = controller.observe(&sampled_idx, r, progress);
        let switch_rms = prev.as_ref().map_or(0.0, |p| trainer.switch_rms(p, &sampled));
        trace.push(TraceRecord {
            step,
            sampled: sampled.clone(),
            quality,
            cost,
            reward: r,
            advantage: outcome.advantage,
            entropy,
            beta: outcome.beta,
            loss,
            switch_rms,
            act_quant: trainer.phase(step).act_quant_active,
            policy_updated: outcome.updated,
            argmax,
            pmax,
        });
        prev = Some(sampled);
    }
    let served = controller.choices(&controller.argmax());
    trainer.net.refresh_weight_thresholds(&mut trainer.thresholds);
    trainer.finish(served, options, controller.probs(), trace, cost_target)
}

/// Trains with a fixed choice per searchable layer; no controller.
pub fn run_fixed_on(cfg: &SearchConfig, data: &Dataset, choices: &[ArchChoice]) -> Result<SearchResult, SearchError> {
    let extra: Vec<NumericFormat> = choices.iter().map(|c| c.format).collect();
    let mut trainer = Trainer::new(cfg, data, &extra)?;
    let cost_target = cfg.cost_target.resolve(&trainer.net)?;
    let params = RewardParams {
        cost_target,
        gamma: cfg.gamma,
    };
    let manifest = trainer.net.manifest();
    let archs = trainer.net.resolve_archs(choices)?;
    let cost = model_cost(&archs, &manifest).map_err(|e| SearchError::Config(e.to_string()))?;
    let options: Vec<Vec<ArchChoice>> = choices.iter().map(|c| vec![*c]).collect();
    let mut trace = Vec::with_capacity(cfg.total_steps as usize);
    for step in 0..cfg.total_steps {
        let fail = |e: SearchError, t: &[TraceRecord]| step_error(step, e, t);
        trainer.prepare(step).map_err(|e| fail(e, &trace))?;
        let loss = trainer.train_step(step, &archs, false).map_err(|e| fail(e, &trace))?;
        let quality = trainer.quality(step, &archs).map_err(|e| fail(e, &trace))?;
        let r = reward(quality, cost, &params).map_err(|e| fail(SearchError::Config(e.to_string()), &trace))?;
        trace.push(TraceRecord {
            step,
            sampled: choices.to_vec(),
            quality,
            cost,
            reward: r,
            advantage: 0.0,
            entropy: 0.0,
            beta: 0.0,
            loss,
            switch_rms: 0.0,
            act_quant: trainer.phase(step).act_quant_active,
            policy_updated: false,
            argmax: choices.to_vec(),
            pmax: vec![1.0; choices.len()],
        });
    }
    trainer.finish(choices.to_vec(), options, Vec::new(), trace, cost_target)
}

pub fn run_uniform_on(cfg: &SearchConfig, data: &Dataset, format: NumericFormat) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let net = cfg.build_network(data)?;
    run_fixed_on(cfg, data, &uniform_choices(&net, format))
}

pub fn run_uniform(cfg: &SearchConfig, format: NumericFormat) -> Result<SearchResult, SearchError> {
    let data = cfg.data.load()?;
    run_uniform_on(cfg, &data, format)
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// Cost target or format name.
    pub key: String,
    pub seed: u64,
    pub cost_target_gbops: f64,
    pub achieved_gbops: f64,
    pub accuracy: f64,
    pub archs: String,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn from_result(key: String, seed: u64, r: Result<SearchResult, SearchError>) -> Self {
        match r {
            Ok(r) => SweepRow {
                key,
                seed,
                cost_target_gbops: r.cost_target / GIGA,
                achieved_gbops: r.served_cost / GIGA,
                accuracy: r.served_accuracy,
                archs: r.archs_label(),
                error: None,
            },
            Err(e) => SweepRow {
                key,
                seed,
                cost_target_gbops: f64::NAN,
                achieved_gbops: f64::NAN,
                accuracy: f64::NAN,
                archs: String::new(),
                error: Some(e.to_string()),
            },
        }
    }
}

/// Runs `tasks` on at most `jobs` threads; results keep task order.
pub fn run_pool<T: Send, F: Fn(usize) -> T + Sync>(count: usize, jobs: usize, task: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let out = task(i);
                results.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect()
}

/// One search per (target, seed), target-major.
pub fn pareto_sweep(
    cfg: &SearchConfig,
    data: &Dataset,
    targets: &[CostTarget],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>, SearchError> {
    if targets.is_empty() || seeds.is_empty() {
        return Err(SearchError::Config("sweep needs at least one target and one seed".into()));
    }
    let tasks: Vec<(CostTarget, u64)> = targets.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    Ok(run_pool(tasks.len(), jobs, |i| {
        let (target, seed) = tasks[i];
        let mut c = cfg.clone();
        c.cost_target = target;
        c.seed = seed;
        SweepRow::from_result(target.to_string(), seed, run_search_on(&c, data, &mut SearchHooks::default()))
    }))
}

/// One uniform-format run per (format, seed), format-major.
pub fn uniform_sweep(
    cfg: &SearchConfig,
    data: &Dataset,
    formats: &[NumericFormat],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SweepRow>, SearchError> {
    if formats.is_empty() || seeds.is_empty() {
        return Err(SearchError::Config("sweep needs at least one format and one seed".into()));
    }
    let tasks: Vec<(NumericFormat, u64)> = formats.iter().flat_map(|&f| seeds.iter().map(move |&s| (f, s))).collect();
    Ok(run_pool(tasks.len(), jobs, |i| {
        let (format, seed) = tasks[i];
        let mut c = cfg.clone();
        c.seed = seed;
        SweepRow::from_result(format.to_string(), seed, run_uniform_on(&c, data, format))
    }))
}

#[cfg(test)]
mod tests;
