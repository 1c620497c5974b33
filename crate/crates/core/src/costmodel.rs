//! Quadratic bit-operation (BOPs) cost model and the absolute reward.
//!
//! A layer running at total bitwidth `b` with `macs` multiply-accumulates costs
//! `b² · macs` BOPs. Model cost is the sum over layers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchChoice;
use crate::numerics::NumericFormat;

const RESNET18_JSON: &str = include_str!("../manifests/resnet18.json");
const MOBILENETV2_JSON: &str = include_str!("../manifests/mobilenetv2.json");

/// Names accepted by [`ModelManifest::bundled`].
pub const BUNDLED_MANIFESTS: [&str; 2] = ["resnet18", "mobilenetv2"];

pub const GIGA: f64 = 1e9;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest schema error: {0}")]
    Schema(String),
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("layer `{layer}`: no mac_table entry for width {width} kernel {kernel:?}")]
    MissingOption {
        layer: String,
        width: f64,
        kernel: Option<usize>,
    },
    #[error("expected {expected} layer choices, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("unknown bundled manifest `{0}`")]
    UnknownBundled(String),
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("cost target must be positive and finite, got {0}")]
    CostTarget(f64),
    #[error("cost must be non-negative and finite, got {0}")]
    Cost(f64),
}

/// A (width multiplier, kernel size) key of a layer's MAC table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacKey {
    pub width: f64,
    pub kernel: usize,
}

impl MacKey {
    /// Parses `w<multiplier>_k<kernel>`.
    pub fn parse(key: &str) -> Option<Self> {
        let (w, k) = key.strip_prefix('w')?.split_once("_k")?;
        let width: f64 = w.parse().ok()?;
        let kernel: usize = k.parse().ok()?;
        (width > 0.0 && width.is_finite()).then_some(Self { width, kernel })
    }

    pub fn to_key(&self) -> String {
        format!("w{}_k{}", self.width, self.kernel)
    }

    fn same_width(&self, width: f64) -> bool {
        (self.width - width).abs() < 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub macs: u64,
    pub searchable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_format: Option<NumericFormat>,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "ser_mac_table")]
    pub mac_table: Option<Vec<(MacKey, u64)>>,
}

fn ser_mac_table<S: serde::Serializer>(
    table: &Option<Vec<(MacKey, u64)>>,
    s: S,
) -> Result<S::Ok, S::Error> {
    let map: BTreeMap<String, u64> = table
        .iter()
        .flatten()
        .map(|(k, v)| (k.to_key(), *v))
        .collect();
    map.serialize(s)
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, macs: u64) -> Self {
        Self {
            name: name.into(),
            macs,
            searchable: true,
            fixed_format: None,
            mac_table: None,
        }
    }

    /// Kernel size of the identity (1.0×, base kernel) table entry.
    fn base_kernel(&self) -> Option<usize> {
        self.mac_table.as_ref().and_then(|t| {
            t.iter()
                .find(|(k, v)| k.same_width(1.0) && *v == self.macs)
                .map(|(k, _)| k.kernel)
        })
    }

    /// MACs of this layer under the given width/kernel choice.
    pub fn resolve_macs(&self, arch: &ArchChoice) -> Result<u64, ManifestError> {
        let missing = || ManifestError::MissingOption {
            layer: self.name.clone(),
            width: arch.width_mult,
            kernel: arch.kernel,
        };
        match &self.mac_table {
            None if (arch.width_mult - 1.0).abs() < 1e-9 => Ok(self.macs),
            None => Err(missing()),
            Some(table) => {
                let kernel = arch.kernel.or_else(|| self.base_kernel()).ok_or_else(missing)?;
                table
                    .iter()
                    .find(|(k, _)| k.same_width(arch.width_mult) && k.kernel == kernel)
                    .map(|(_, v)| *v)
                    .ok_or_else(missing)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelManifest {
    pub model_name: String,
    pub layers: Vec<LayerSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    model_name: String,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    macs: i64,
    searchable: bool,
    #[serde(default)]
    fixed_format: Option<String>,
    #[serde(default)]
    mac_table: Option<BTreeMap<String, i64>>,
}

impl ModelManifest {
    pub fn new(model_name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self, ManifestError> {
        let manifest = Self {
            model_name: model_name.into(),
            layers,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| ManifestError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let mut layers = Vec::with_capacity(raw.layers.len());
        for (i, l) in raw.layers.into_iter().enumerate() {
            let ctx = |field: &str, msg: String| {
                ManifestError::Schema(format!("layers[{i}] (`{}`).{field}: {msg}", l.name))
            };
            if l.macs < 0 {
                return Err(ctx("macs", format!("must be non-negative, got {}", l.macs)));
            }
            let fixed_format = l
                .fixed_format
                .as_deref()
                .map(str::parse::<NumericFormat>)
                .transpose()
                .map_err(|e| ctx("fixed_format", e.to_string()))?;
            let mac_table = match &l.mac_table {
                None => None,
                Some(t) => {
                    let mut entries = Vec::with_capacity(t.len());
                    for (key, &v) in t {
                        let k = MacKey::parse(key).ok_or_else(|| {
                            ctx("mac_table", format!("bad key `{key}`, expected w<multiplier>_k<kernel>"))
                        })?;
                        if v < 0 {
                            return Err(ctx("mac_table", format!("entry `{key}` is negative")));
                        }
                        entries.push((k, v as u64));
                    }
                    Some(entries)
                }
            };
            layers.push(LayerSpec {
                name: l.name.clone(),
                macs: l.macs as u64,
                searchable: l.searchable,
                fixed_format,
                mac_table,
            });
        }
        Self::new(raw.model_name, layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn validate(&self) -> Result<(), ManifestError> {
        if self.layers.is_empty() {
            return Err(ManifestError::Schema("layers: must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !seen.insert(l.name.as_str()) {
                return Err(ManifestError::Schema(format!(
                    "layers[{i}].name: duplicate layer name `{}`",
                    l.name
                )));
            }
            if l.mac_table.is_some() && l.base_kernel().is_none() {
                return Err(ManifestError::Schema(format!(
                    "layers[{i}] (`{}`).mac_table: missing identity entry w1_k<base> equal to macs",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn bundled(name: &str) -> Result<Self, ManifestError> {
        match name {
            "resnet18" => Self::from_json(RESNET18_JSON),
            "mobilenetv2" => Self::from_json(MOBILENETV2_JSON),
            other => Err(ManifestError::UnknownBundled(other.to_string())),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn searchable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].searchable)
            .collect()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Reads a manifest file, or a bundled manifest when `path` names one.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelManifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelManifest::from_json(&text)
}

/// BOPs of one layer: `b² · MACs`.
pub fn layer_cost(arch: &ArchChoice, layer: &LayerSpec) -> Result<f64, ManifestError> {
    let bits = arch.format.total_bitwidth() as f64;
    Ok(bits * bits * layer.resolve_macs(arch)? as f64)
}

/// Sum of layer costs. `archs` has one entry per manifest layer; layers that
/// are not searchable and declare a fixed format use that format instead.
pub fn model_cost(archs: &[ArchChoice], manifest: &ModelManifest) -> Result<f64, ManifestError> {
    if archs.len() != manifest.layers.len() {
        return Err(ManifestError::Arity {
            expected: manifest.layers.len(),
            got: archs.len(),
        });
    }
    archs
        .iter()
        .zip(&manifest.layers)
        .map(|(arch, layer)| match (layer.searchable, layer.fixed_format) {
            (false, Some(format)) => layer_cost(&ArchChoice { format, ..*arch }, layer),
            _ => layer_cost(arch, layer),
        })
        .sum()
}

/// Cost with every layer at `format`, identity width and base kernel.
pub fn uniform_cost(format: NumericFormat, manifest: &ModelManifest) -> f64 {
    let archs = vec![ArchChoice::new(format); manifest.layers.len()];
    model_cost(&archs, manifest).expect("identity option always resolves")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// Target model cost in BOPs.
    pub cost_target: f64,
    /// Cost scalar; negative values penalize deviation from the target.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

pub fn default_gamma() -> f64 {
    -1.0
}

/// Absolute reward `Q + γ·|cost/C_T − 1|`.
pub fn reward(quality: f64, cost: f64, params: &RewardParams) -> Result<f64, RewardError> {
    if !(params.cost_target > 0.0 && params.cost_target.is_finite()) {
        return Err(RewardError::CostTarget(params.cost_target));
    }
    if !(cost >= 0.0 && cost.is_finite()) {
        return Err(RewardError::Cost(cost));
    }
    Ok(quality + params.gamma * (cost / params.cost_target - 1.0).abs())
}
