use serde::{Deserialize, Serialize};

use crate::numerics::NumericFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Dense,
    Conv,
    Depthwise,
    Relu,
    Maxpool,
    Flatten,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    /// Dense output features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    /// Optional declared input size; checked against the inferred shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    /// Base kernel size (conv, depthwise).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    /// Pool window (maxpool).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(rename = "type")]
    pub kind: LayerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub params: LayerParams,
    #[serde(default)]
    pub searchable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_options: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_options: Option<Vec<usize>>,
    /// Format of a non-searchable weight layer; BF16 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_format: Option<NumericFormat>,
}

impl LayerConfig {
    pub fn of(kind: LayerType) -> Self {
        Self {
            kind,
            name: None,
            params: LayerParams::default(),
            searchable: false,
            width_options: None,
            kernel_options: None,
            fixed_format: None,
        }
    }

    pub fn dense(units: usize) -> Self {
        let mut c = Self::of(LayerType::Dense);
        c.params.units = Some(units);
        c.searchable = true;
        c
    }

    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        let mut c = Self::of(LayerType::Conv);
        c.params.out_channels = Some(out_channels);
        c.params.kernel = Some(kernel);
        c.searchable = true;
        c
    }

    pub fn depthwise(kernel: usize) -> Self {
        let mut c = Self::of(LayerType::Depthwise);
        c.params.kernel = Some(kernel);
        c.searchable = true;
        c
    }

    pub fn maxpool(size: usize) -> Self {
        let mut c = Self::of(LayerType::Maxpool);
        c.params.size = Some(size);
        c
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self.kind, LayerType::Dense | LayerType::Conv | LayerType::Depthwise)
    }
}

/// Layer list plus the per-example input shape (`[C, H, W]` or `[D]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    /// Expands a preset name: `mlp-<depth>x<width>` or `cnn-small`.
    pub fn preset(name: &str, input_shape: &[usize], classes: usize) -> Option<Self> {
        let mut layers = Vec::new();
        if let Some(spec) = name.strip_prefix("mlp-") {
            let (depth, width) = spec.split_once('x')?;
            let depth: usize = depth.parse().ok()?;
            let width: usize = width.parse().ok()?;
            if depth == 0 || width == 0 {
                return None;
            }
            if input_shape.len() > 1 {
                layers.push(LayerConfig::of(LayerType::Flatten));
            }
            for _ in 0..depth {
                layers.push(LayerConfig::dense(width));
                layers.push(LayerConfig::of(LayerType::Relu));
            }
            layers.push(LayerConfig::dense(classes));
        } else if name == "cnn-small" {
            if input_shape.len() != 3 {
                return None;
            }
            for ch in [8, 16, 32] {
                layers.push(LayerConfig::conv(ch, 3));
                layers.push(LayerConfig::of(LayerType::Relu));
                layers.push(LayerConfig::maxpool(2));
            }
            layers.push(LayerConfig::of(LayerType::Flatten));
            layers.push(LayerConfig::dense(64));
            layers.push(LayerConfig::of(LayerType::Relu));
            layers.push(LayerConfig::dense(classes));
        } else {
            return None;
        }
        Some(Self {
            name: name.to_string(),
            input_shape: input_shape.to_vec(),
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_preset_expansion() {
        let c = ModelConfig::preset("mlp-2x64", &[20], 10).unwrap();
        let kinds: Vec<_> = c.layers.iter().map(|l| l.kind).collect();
        use LayerType::*;
        assert_eq!(kinds, vec![Dense, Relu, Dense, Relu, Dense]);
        assert_eq!(c.layers[0].params.units, Some(64));
        assert_eq!(c.layers[4].params.units, Some(10));
        let img = ModelConfig::preset("mlp-3x128", &[1, 28, 28], 10).unwrap();
        assert_eq!(img.layers[0].kind, Flatten);
        assert!(ModelConfig::preset("mlp-0x4", &[4], 2).is_none());
        assert!(ModelConfig::preset("resnet", &[4], 2).is_none());
    }

    #[test]
    fn cnn_small_has_five_weight_layers() {
        let c = ModelConfig::preset("cnn-small", &[1, 28, 28], 10).unwrap();
        assert_eq!(c.layers.iter().filter(|l| l.is_weighted()).count(), 5);
        assert!(ModelConfig::preset("cnn-small", &[784], 10).is_none());
    }

    #[test]
    fn json_schema() {
        let text = r#"{"name":"t","input_shape":[8],"layers":[
            {"type":"dense","params":{"units":4},"searchable":true,"width_options":[0.5,1.0]},
            {"type":"relu"},
            {"type":"dense","params":{"units":2},"fixed_format":"INT8"}]}"#;
        let c: ModelConfig = serde_json::from_str(text).unwrap();
        assert_eq!(c.layers[2].fixed_format, Some("INT8".parse().unwrap()));
        let bad = r#"{"name":"t","input_shape":[8],"layers":[{"type":"dense","params":{"unit":4}}]}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
    }
}
