//! Heatmap export: a normalized 8-bit PGM plus a TOML sidecar holding the
//! raw range and the settings that produced the map.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{normalize, AttributionMap};
use crate::error::{Error, Result};
use crate::pnm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub image_id: String,
    pub model_id: String,
    pub method: String,
    pub target_class: usize,
    pub config_digest: String,
    pub seed: u64,
    /// Raw score range before normalization.
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("toml")
}

/// Writes `map` normalized to `[0, 1]` as a PGM at `path` and the record
/// next to it with a `.toml` extension. Returns the record.
pub fn write_heatmap(path: &Path, map: &AttributionMap, image_id: &str, model_id: &str, seed: u64) -> Result<HeatmapRecord> {
    let n = normalize(map);
    let record = HeatmapRecord {
        image_id: image_id.to_string(),
        model_id: model_id.to_string(),
        method: map.method.name().to_string(),
        target_class: map.target_class,
        config_digest: map.config_digest.clone(),
        seed,
        min: n.min,
        max: n.max,
        degenerate: n.degenerate,
    };
    let bytes: Vec<u8> = n.map.values.iter().map(|&v| pnm::quantize(v)).collect();
    let comment = vec![format!(
        "robustmap method={} class={} seed={} {}",
        record.method, record.target_class, seed, record.config_digest
    )];
    fs::write(path, pnm::encode(1, map.height, map.width, &bytes, &comment)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = toml::to_string(&record).map_err(|e| Error::format(&side, e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(record)
}

/// Reads a heatmap written by [`write_heatmap`]: the quantized values in
/// `[0, 1]` and the sidecar record.
pub fn read_heatmap(path: &Path) -> Result<(Vec<f64>, HeatmapRecord)> {
    let image = pnm::read_image(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let record = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    Ok((image.into_data(), record))
}
