//! Percentile masks and the point coverage ratio against annotated coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, AttributionMap, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Dataset, Split};

/// Pixel coordinate: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

/// Expert fracture coordinates keyed by image id.
///
/// On disk this is a JSON object mapping each id to a list of `[x, y]` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, Vec<[u32; 2]>>", into = "BTreeMap<String, Vec<[u32; 2]>>")]
pub struct AnnotationSet {
    entries: BTreeMap<String, Vec<Point>>,
}

impl From<BTreeMap<String, Vec<[u32; 2]>>> for AnnotationSet {
    fn from(raw: BTreeMap<String, Vec<[u32; 2]>>) -> Self {
        AnnotationSet {
            entries: raw
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().map(|[x, y]| Point { x, y }).collect()))
                .collect(),
        }
    }
}

impl From<AnnotationSet> for BTreeMap<String, Vec<[u32; 2]>> {
    fn from(set: AnnotationSet) -> Self {
        set.entries
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|p| [p.x, p.y]).collect()))
            .collect()
    }
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; duplicate points within the entry are rejected.
    pub fn insert(&mut self, image_id: impl Into<String>, points: Vec<Point>) -> Result<()> {
        let image_id = image_id.into();
        let mut seen = points.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != points.len() {
            return Err(Error::arg(format!("duplicate annotation points for {image_id}")));
        }
        self.entries.insert(image_id, points);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&[Point]> {
        self.entries.get(image_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Point])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every point against the image bounds and for duplicates.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (id, points) in &self.entries {
            check_points(id, points, height, width)?;
            let mut sorted = points.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != points.len() {
                return Err(Error::arg(format!("duplicate annotation points for {id}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        for (id, points) in &set.entries {
            let mut sorted = points.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != points.len() {
                return Err(Error::format(path, format!("duplicate annotation points for {id}")));
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("annotation sets serialize");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn check_points(image_id: &str, points: &[Point], height: usize, width: usize) -> Result<()> {
    for p in points {
        if p.x as usize >= width || p.y as usize >= height {
            return Err(Error::PointOutOfBounds {
                image_id: image_id.to_string(),
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
    }
    Ok(())
}

/// Boolean mask over a map's pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
    pub percentile: f64,
    pub source_digest: String,
}

impl BinaryMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Nearest-rank percentile: the smallest sample `v` such that at least `nu`
/// percent of the samples are `<= v`.
pub fn nearest_rank(values: &[f64], nu: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&nu) {
        return Err(Error::arg(format!("percentile must lie in [0, 100], got {nu}")));
    }
    if values.is_empty() {
        return Err(Error::arg("percentile of an empty map"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (nu / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// `M(x, y) = S(x, y) >= percentile(S, nu)`.
pub fn threshold_mask(map: &AttributionMap, nu: f64) -> Result<BinaryMask> {
    let cut = nearest_rank(&map.values, nu)?;
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        values: map.values.iter().map(|&v| v >= cut).collect(),
        percentile: nu,
        source_digest: map.config_digest.clone(),
    })
}

/// Fraction of annotated points that fall inside the mask.
pub fn point_coverage(mask: &BinaryMask, image_id: &str, points: &[Point]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::NoPoints(image_id.to_string()));
    }
    check_points(image_id, points, mask.height, mask.width)?;
    let hits = points
        .iter()
        .filter(|p| mask.get(p.x as usize, p.y as usize))
        .count();
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CoverageValue {
    /// Mean point coverage ratio, in percent.
    Percent(f64),
    NotAvailable(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub model_id: String,
    pub method: Method,
    pub percentile: f64,
    pub coverage: CoverageValue,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

/// Which logit the maps explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetClass {
    /// Index of the `fractured` class (or class 0 when the model has no such name).
    Fracture,
    Predicted,
    Fixed(usize),
}

#[derive(Clone, Debug)]
pub struct CoverageSpec<'a> {
    pub models: Vec<(String, &'a Model)>,
    pub methods: Vec<Method>,
    pub percentiles: Vec<f64>,
    pub split: Split,
    pub target: TargetClass,
    pub config: MethodConfig,
}

fn format_percentile(nu: f64) -> String {
    if nu.fract() == 0.0 {
        format!("{}", nu as i64)
    } else {
        format!("{nu}")
    }
}

impl CoverageReport {
    pub fn get(&self, model_id: &str, method: Method, percentile: f64) -> Option<&CoverageValue> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.method == method && r.percentile == percentile)
            .map(|r| &r.coverage)
    }

    /// `model,method,percentile,coverage` with two-decimal percentages or `N/A:<reason>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,method,percentile,coverage\n");
        for r in &self.rows {
            let value = match &r.coverage {
                CoverageValue::Percent(p) => format!("{p:.2}"),
                CoverageValue::NotAvailable(reason) => format!("N/A:{}", reason.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.model_id,
                r.method.name(),
                format_percentile(r.percentile),
                value
            );
        }
        out
    }
}

/// Mean point coverage per (model, method, percentile) over the annotated
/// images of the requested split.
///
/// Cells that cannot be computed are reported as `N/A` with a reason rather
/// than skipped.
pub fn coverage_table(spec: &CoverageSpec<'_>, ds: &Dataset, ann: &AnnotationSet) -> Result<CoverageReport> {
    for &nu in &spec.percentiles {
        if !(0.0..=100.0).contains(&nu) {
            return Err(Error::arg(format!("percentile must lie in [0, 100], got {nu}")));
        }
    }
    for (id, _) in ann.iter() {
        if ds.find(id).is_none() {
            return Err(Error::arg(format!("annotated image {id} is not in the dataset")));
        }
    }
    let images: Vec<_> = ds
        .split(spec.split)
        .filter_map(|s| ann.get(&s.id).map(|pts| (s, pts)))
        .collect();

    let mut report = CoverageReport::default();
    for (model_id, model) in &spec.models {
        for &method in &spec.methods {
            let cells = if images.is_empty() {
                Err(format!("no annotated images in the {} split", spec.split.name()))
            } else {
                method_coverage(model, method, spec, &images)
            };
            for (k, &nu) in spec.percentiles.iter().enumerate() {
                let coverage = match &cells {
                    Ok(means) => CoverageValue::Percent(means[k]),
                    Err(reason) => CoverageValue::NotAvailable(reason.clone()),
                };
                report.rows.push(CoverageRow {
                    model_id: model_id.clone(),
                    method,
                    percentile: nu,
                    coverage,
                });
            }
        }
    }
    Ok(report)
}

fn method_coverage(
    model: &Model,
    method: Method,
    spec: &CoverageSpec<'_>,
    images: &[(&crate::synth::Sample, &[Point])],
) -> std::result::Result<Vec<f64>, String> {
    let per_image: Vec<Result<Vec<f64>>> = images
        .par_iter()
        .map(|(sample, points)| {
            let class = match spec.target {
                TargetClass::Fracture => model.class_index("fractured").unwrap_or(0),
                TargetClass::Predicted => crate::autodiff::predict(model, &sample.image)?.argmax(),
                TargetClass::Fixed(c) => c,
            };
            let map = attribution::generate(model, &sample.image, class, method, &spec.config)?;
            spec.percentiles
                .iter()
                .map(|&nu| point_coverage(&threshold_mask(&map, nu)?, &sample.id, points))
                .collect()
        })
        .collect();
    let mut sums = vec![0.0; spec.percentiles.len()];
    for r in per_image {
        let ratios = r.map_err(|e| e.to_string())?;
        for (s, v) in sums.iter_mut().zip(ratios) {
            *s += v;
        }
    }
    let n = images.len() as f64;
    Ok(sums.into_iter().map(|s| 100.0 * s / n).collect())
}
