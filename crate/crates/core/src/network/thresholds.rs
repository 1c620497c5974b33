//! Switchable clipping thresholds: one activation and one weight threshold per
//! (layer, format).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::NumericFormat;

/// Activation std multiple as a function of the format's bitwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StdMultiples {
    /// Formats of at most 4 bits.
    pub upto_4_bits: f64,
    /// 5 and 6 bit formats.
    pub bits_5_to_6: f64,
    /// 7 bits and wider.
    pub from_7_bits: f64,
    /// Per-format overrides, keyed by format name.
    pub overrides: BTreeMap<NumericFormat, f64>,
}

impl Default for StdMultiples {
    fn default() -> Self {
        Self {
            upto_4_bits: 3.0,
            bits_5_to_6: 3.5,
            from_7_bits: 4.0,
            overrides: BTreeMap::new(),
        }
    }
}

impl StdMultiples {
    /// The same multiple for every format.
    pub fn uniform(multiple: f64) -> Self {
        Self {
            upto_4_bits: multiple,
            bits_5_to_6: multiple,
            from_7_bits: multiple,
            overrides: BTreeMap::new(),
        }
    }

    pub fn for_format(&self, format: NumericFormat) -> f64 {
        if let Some(&m) = self.overrides.get(&format) {
            return m;
        }
        match format.total_bitwidth() {
            0..=4 => self.upto_4_bits,
            5..=6 => self.bits_5_to_6,
            _ => self.from_7_bits,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    pub name: String,
    pub activation: BTreeMap<NumericFormat, f64>,
    pub weight: BTreeMap<NumericFormat, f64>,
}

/// Per-layer, per-format clipping thresholds, in weight-layer order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub layers: Vec<LayerThresholds>,
}

impl ThresholdTable {
    pub fn activation(&self, layer: usize, format: NumericFormat) -> Option<f64> {
        self.layers.get(layer)?.activation.get(&format).copied()
    }

    pub fn weight(&self, layer: usize, format: NumericFormat) -> Option<f64> {
        self.layers.get(layer)?.weight.get(&format).copied()
    }

    /// Sets one weight threshold for every format already present in the layer.
    pub fn set_weight_threshold(&mut self, layer: usize, threshold: f64) {
        let entry = &mut self.layers[layer];
        let formats: Vec<_> = entry.activation.keys().chain(entry.weight.keys()).copied().collect();
        for f in formats {
            entry.weight.insert(f, threshold);
        }
    }

    pub fn all_positive(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.activation.values().chain(l.weight.values()).all(|&t| t > 0.0 && t.is_finite()))
    }
}

/// Streaming mean/variance with exact batch merging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn from_slice(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let count = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / count;
        let m2 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        Self { count, mean, m2 }
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count / n;
        self.m2 += other.m2 + delta * delta * self.count * other.count / n;
        self.count = n;
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            (self.m2 / self.count).sqrt()
        }
    }
}
