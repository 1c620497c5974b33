//! Per-layer architecture decisions and the named format search spaces.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::numerics::NumericFormat;

/// One layer's sampled decision: numeric format, channel width multiplier and
/// kernel size. `kernel` is `None` for layers without a spatial kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchChoice {
    pub format: NumericFormat,
    #[serde(default = "default_width")]
    pub width_mult: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
}

fn default_width() -> f64 {
    1.0
}

impl ArchChoice {
    pub fn new(format: NumericFormat) -> Self {
        Self {
            format,
            width_mult: 1.0,
            kernel: None,
        }
    }

    pub fn with_width(mut self, width_mult: f64) -> Self {
        self.width_mult = width_mult;
        self
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = Some(kernel);
        self
    }
}

impl fmt::Display for ArchChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.format)?;
        if self.width_mult != 1.0 {
            write!(f, "/w{}", self.width_mult)?;
        }
        if let Some(k) = self.kernel {
            write!(f, "/k{k}")?;
        }
        Ok(())
    }
}

/// The option set of one searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOptions {
    pub formats: Vec<NumericFormat>,
    pub widths: Vec<f64>,
    pub kernels: Vec<Option<usize>>,
}

impl LayerOptions {
    pub fn formats_only(formats: Vec<NumericFormat>) -> Self {
        Self {
            formats,
            widths: vec![1.0],
            kernels: vec![None],
        }
    }

    /// Cartesian product, format-major.
    pub fn choices(&self) -> Vec<ArchChoice> {
        let mut out = Vec::with_capacity(self.formats.len() * self.widths.len() * self.kernels.len());
        for &format in &self.formats {
            for &width_mult in &self.widths {
                for &kernel in &self.kernels {
                    out.push(ArchChoice {
                        format,
                        width_mult,
                        kernel,
                    });
                }
            }
        }
        out
    }
}

/// Named format option sets, or an explicit list.
#[derive(Debug, Clone, PartialEq)]
pub enum SearchSpace {
    FliqsSInt,
    FliqsLInt,
    FliqsSFp,
    FliqsLFp,
    Custom(Vec<NumericFormat>),
}

impl SearchSpace {
    pub fn formats(&self) -> Vec<NumericFormat> {
        let parse = |names: &[&str]| -> Vec<NumericFormat> {
            names.iter().map(|n| n.parse().expect("builtin format")).collect()
        };
        match self {
            SearchSpace::FliqsSInt => parse(&["INT4", "INT8", "BF16"]),
            SearchSpace::FliqsLInt => parse(&["INT4", "INT5", "INT6", "INT7", "INT8", "BF16"]),
            SearchSpace::FliqsSFp => parse(&["E2M1", "E4M3", "BF16"]),
            SearchSpace::FliqsLFp => parse(&[
                "E2M1", "E2M2", "E2M3", "E2M4", "E2M5", "E3M1", "E3M2", "E3M3", "E3M4", "E4M1",
                "E4M2", "E4M3", "E5M1", "E5M2", "E6M1", "BF16",
            ]),
            SearchSpace::Custom(formats) => formats.clone(),
        }
    }

    pub fn name(&self) -> Option<&'static str> {
        match self {
            SearchSpace::FliqsSInt => Some("FLIQS-S-int"),
            SearchSpace::FliqsLInt => Some("FLIQS-L-int"),
            SearchSpace::FliqsSFp => Some("FLIQS-S-fp"),
            SearchSpace::FliqsLFp => Some("FLIQS-L-fp"),
            SearchSpace::Custom(_) => None,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "FLIQS-S-int" => Some(SearchSpace::FliqsSInt),
            "FLIQS-L-int" => Some(SearchSpace::FliqsLInt),
            "FLIQS-S-fp" => Some(SearchSpace::FliqsSFp),
            "FLIQS-L-fp" => Some(SearchSpace::FliqsLFp),
            _ => None,
        }
    }
}

impl Serialize for SearchSpace {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.name() {
            Some(name) => serializer.serialize_str(name),
            None => self.formats().serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            List(Vec<NumericFormat>),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Name(name) => SearchSpace::from_name(&name).ok_or_else(|| {
                serde::de::Error::custom(format!(
                    "unknown search space `{name}` (expected FLIQS-S-int, FLIQS-L-int, FLIQS-S-fp, FLIQS-L-fp or a list of formats)"
                ))
            }),
            Repr::List(list) if list.is_empty() => {
                Err(serde::de::Error::custom("custom search space must not be empty"))
            }
            Repr::List(list) => Ok(SearchSpace::Custom(list)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_sizes() {
        assert_eq!(SearchSpace::FliqsSInt.formats().len(), 3);
        assert_eq!(SearchSpace::FliqsLInt.formats().len(), 6);
        assert_eq!(SearchSpace::FliqsSFp.formats().len(), 3);
        assert_eq!(SearchSpace::FliqsLFp.formats().len(), 16);
        for f in SearchSpace::FliqsLFp.formats() {
            let b = f.total_bitwidth();
            assert!(f == NumericFormat::Bf16 || (4..=8).contains(&b), "{f}");
        }
    }

    #[test]
    fn space_serde() {
        let s: SearchSpace = serde_json::from_str("\"FLIQS-L-fp\"").unwrap();
        assert_eq!(s, SearchSpace::FliqsLFp);
        let c: SearchSpace = serde_json::from_str("[\"INT8\",\"E4M3\"]").unwrap();
        assert_eq!(c.formats().len(), 2);
        assert_eq!(serde_json::to_string(&c).unwrap(), "[\"INT8\",\"E4M3\"]");
        assert!(serde_json::from_str::<SearchSpace>("\"FLIQS-XL\"").is_err());
        assert!(serde_json::from_str::<SearchSpace>("[]").is_err());
    }

    #[test]
    fn option_product_is_format_major() {
        let opts = LayerOptions {
            formats: vec!["INT4".parse().unwrap(), "INT8".parse().unwrap()],
            widths: vec![0.5, 1.0],
            kernels: vec![Some(3), Some(5)],
        };
        let c = opts.choices();
        assert_eq!(c.len(), 8);
        assert_eq!(c[0].to_string(), "INT4/w0.5/k3");
        assert_eq!(c[7].to_string(), "INT8/k5");
    }
}
