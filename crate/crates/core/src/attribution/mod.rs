//! Attribution maps: gradient saliency, occlusion sensitivity, DeepLIFT and
//! Integrated Gradients, plus min-max normalization and heatmap export.

mod deeplift;
mod heatmap;
mod integrated;
mod occlusion;
mod saliency;

use std::fmt;
use std::str::FromStr;

pub use deeplift::{deeplift, deeplift_contributions};
pub use heatmap::{read_heatmap, write_heatmap, HeatmapRecord};
pub use integrated::{integrated_gradients, integrated_gradients_signed, PathConfig};
pub use occlusion::{occlusion, occlusion_grid, occlusion_linearized, occlusion_linearized_grid, OcclusionConfig, OcclusionGrid};
pub use saliency::saliency;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Saliency,
    Occlusion,
    DeepLift,
    IntegratedGradients,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Saliency,
        Method::Occlusion,
        Method::DeepLift,
        Method::IntegratedGradients,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::Occlusion => "occlusion",
            Method::DeepLift => "deeplift",
            Method::IntegratedGradients => "integrated_gradients",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::arg(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

/// Per-pixel scores for one image and one target class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values.
    pub values: Vec<f64>,
    pub method: Method,
    pub target_class: usize,
    pub config_digest: String,
}

impl AttributionMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Result of min-max normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub map: AttributionMap,
    pub min: f64,
    pub max: f64,
    /// `max == min`; the map is then all zeros.
    pub degenerate: bool,
}

/// `(S - min) / (max - min)`; a constant map becomes all zeros and is flagged.
pub fn normalize(map: &AttributionMap) -> Normalized {
    let min = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater);
    let values = if degenerate {
        vec![0.0; map.values.len()]
    } else {
        let range = max - min;
        map.values
            .iter()
            .map(|v| ((v - min) / range).clamp(0.0, 1.0))
            .collect()
    };
    Normalized {
        map: AttributionMap {
            values,
            ..map.clone()
        },
        min,
        max,
        degenerate,
    }
}

/// Per-pixel maximum of `|t|` over channels of a `[c, h, w]` tensor.
pub fn channel_max_abs(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let plane = s[1] * s[2];
    let mut out = vec![0.0f64; plane];
    for ch in t.data().chunks(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o = o.max(v.abs());
        }
    }
    out
}

/// Reference input for DeepLIFT and Integrated Gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Zero,
    /// Typically the training-set mean image.
    Image(Tensor),
}

impl Baseline {
    pub fn for_input(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Baseline::Zero => Ok(Tensor::zeros(x.shape())),
            Baseline::Image(t) => {
                t.expect_shape(x.shape(), "baseline")?;
                Ok(t.clone())
            }
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Baseline::Zero => "zero",
            Baseline::Image(_) => "mean",
        }
    }
}

/// Settings for every method, as used by batch pipelines.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub occlusion: OcclusionConfig,
    pub ig_steps: usize,
    pub ig_baseline: Baseline,
    pub deeplift_reference: Baseline,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            occlusion: OcclusionConfig::default(),
            ig_steps: 20,
            ig_baseline: Baseline::Zero,
            deeplift_reference: Baseline::Zero,
        }
    }
}

/// Runs one method with the settings in `cfg`.
pub fn generate(model: &Model, x: &Tensor, class: usize, method: Method, cfg: &MethodConfig) -> Result<AttributionMap> {
    match method {
        Method::Saliency => saliency(model, x, class),
        Method::Occlusion => occlusion(model, x, class, &cfg.occlusion),
        Method::DeepLift => {
            let reference = cfg.deeplift_reference.for_input(x)?;
            let mut map = deeplift(model, x, class, &reference)?;
            map.config_digest = format!("deeplift reference={}", cfg.deeplift_reference.describe());
            Ok(map)
        }
        Method::IntegratedGradients => {
            let path = PathConfig {
                baseline: cfg.ig_baseline.for_input(x)?,
                n_steps: cfg.ig_steps,
            };
            let mut map = integrated_gradients(model, x, class, &path)?;
            map.config_digest = format!(
                "integrated_gradients steps={} baseline={}",
                cfg.ig_steps,
                cfg.ig_baseline.describe()
            );
            Ok(map)
        }
    }
}

pub(crate) fn spatial(x: &Tensor) -> (usize, usize) {
    let s = x.shape();
    (s[1], s[2])
}
