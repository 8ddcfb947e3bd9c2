//! Procedural fracture images and the on-disk corpus format.
//!
//! Every image shows a bright capsule-shaped bone on a dark textured
//! background. Fractured images additionally carry a dark crack crossing the
//! bone; annotation points are sampled along the crack.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{AnnotationSet, Point};
use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["fractured", "healthy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fractured,
    Healthy,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Fractured => 0,
            Label::Healthy => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub annotations: AnnotationSet,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// `[channels, height, width]` of the first image.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let sh = s.image.shape();
            [sh[0], sh[1], sh[2]]
        })
    }

    /// Per-channel pixel mean and standard deviation over a split.
    pub fn channel_stats(&self, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
        let [c, h, w] = self
            .image_shape()
            .ok_or_else(|| Error::EmptySplit(split.name().into()))?;
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for s in self.split(split) {
            for ch in 0..c {
                for &v in &s.image.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += plane;
        }
        if n == 0 {
            return Err(Error::EmptySplit(split.name().into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok((mean, std))
    }

    /// Per-channel mean image of a split, used as the mean-shifted baseline.
    pub fn mean_image(&self, split: Split) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        let mut n = 0.0;
        for s in self.split(split) {
            acc = Some(match acc {
                None => s.image.clone(),
                Some(a) => a.zip_map(&s.image, |p, q| p + q)?,
            });
            n += 1.0;
        }
        let acc = acc.ok_or_else(|| Error::EmptySplit(split.name().into()))?;
        Ok(acc.map(|v| v / n))
    }
}

/// Generator parameters. Image geometry and the split fractions live here;
/// the remaining fields shape the rendered content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// 1 for grayscale, 3 for identical RGB copies.
    pub channels: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub points_per_crack: usize,
    /// Amplitude of the uniform per-pixel noise.
    pub pixel_noise: f64,
    /// Fractional intensity removed along the crack, sampled in this range.
    pub crack_depth: (f64, f64),
    pub crack_half_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            channels: 1,
            train_fraction: 0.8,
            val_fraction: 0.1,
            points_per_crack: 5,
            pixel_noise: 0.06,
            crack_depth: (0.7, 0.85),
            crack_half_width: 1.5,
        }
    }
}

/// One rendered image with its ground-truth structure.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor,
    pub bone: Vec<bool>,
    pub crack: Vec<bool>,
    pub points: Vec<Point>,
}

struct Bone {
    cx: f64,
    cy: f64,
    ux: f64,
    uy: f64,
    half_length: f64,
    radius: f64,
    intensity: f64,
}

impl Bone {
    /// Coordinates along the axis and across it.
    fn frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * self.ux + dy * self.uy, -dx * self.uy + dy * self.ux)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (t, d) = self.frame(x, y);
        let overshoot = (t.abs() - self.half_length).max(0.0);
        overshoot * overshoot + d * d <= self.radius * self.radius
    }
}

struct Crack {
    ax: f64,
    ay: f64,
    vx: f64,
    vy: f64,
    /// Half-extent of the segment along `v`.
    reach: f64,
    half_width: f64,
    depth: f64,
}

impl Crack {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.ax, y - self.ay);
        let along = dx * self.vx + dy * self.vy;
        let across = -dx * self.vy + dy * self.vx;
        along.abs() <= self.reach && across.abs() <= self.half_width
    }
}

/// Renders image `index` of the corpus drawn from `seed`.
pub fn render(seed: u64, index: u64, fractured: bool, cfg: &SynthConfig) -> Result<Rendered> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (cfg.height, cfg.width);
    let size = h.min(w) as f64;

    let base = rng.gen_range(0.08..0.18);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(0.04..0.15) * 2.0 * PI;
            (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.01..0.035))
        })
        .collect();

    let angle = rng.gen_range(0.0..PI);
    let bone = Bone {
        cx: w as f64 / 2.0 + rng.gen_range(-0.08..0.08) * size,
        cy: h as f64 / 2.0 + rng.gen_range(-0.08..0.08) * size,
        ux: angle.cos(),
        uy: angle.sin(),
        half_length: rng.gen_range(0.3..0.38) * size,
        radius: rng.gen_range(0.1..0.14) * size,
        intensity: rng.gen_range(0.62..0.8),
    };

    let crack = fractured.then(|| {
        let t0 = rng.gen_range(-0.5..0.5) * bone.half_length;
        let tilt = rng.gen_range(-PI / 6.0..PI / 6.0);
        // Rotate the bone normal by the tilt.
        let (nx, ny) = (-bone.uy, bone.ux);
        let (vx, vy) = (nx * tilt.cos() - ny * tilt.sin(), nx * tilt.sin() + ny * tilt.cos());
        Crack {
            ax: bone.cx + t0 * bone.ux,
            ay: bone.cy + t0 * bone.uy,
            vx,
            vy,
            reach: bone.radius / tilt.cos() + 1.0,
            half_width: cfg.crack_half_width,
            depth: rng.gen_range(cfg.crack_depth.0..cfg.crack_depth.1),
        }
    });

    let mut plane = vec![0.0; h * w];
    let mut bone_mask = vec![false; h * w];
    let mut crack_mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base
                + waves
                    .iter()
                    .map(|(kx, ky, phase, amp)| amp * (kx * fx + ky * fy + phase).sin())
                    .sum::<f64>();
            if bone.contains(fx, fy) {
                bone_mask[y * w + x] = true;
                let (_, d) = bone.frame(fx, fy);
                let edge = (d / bone.radius).min(1.0);
                v = bone.intensity * (0.85 + 0.15 * edge * edge);
                if let Some(c) = &crack {
                    if c.contains(fx, fy) {
                        crack_mask[y * w + x] = true;
                        v *= 1.0 - c.depth;
                    }
                }
            }
            v += rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise);
            plane[y * w + x] = (pnm::quantize(v) as f64) / 255.0;
        }
    }

    let mut points = Vec::new();
    if let Some(c) = &crack {
        // Sample along the centreline, keeping points on crack pixels inside the bone.
        let limit = (c.reach - 1.0) * (bone.radius - 1.5).max(0.5) / bone.radius;
        let mut attempts = 0;
        while points.len() < cfg.points_per_crack && attempts < 10_000 {
            attempts += 1;
            let s = rng.gen_range(-limit..=limit);
            let (px, py) = ((c.ax + s * c.vx).round(), (c.ay + s * c.vy).round());
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                continue;
            }
            let idx = py as usize * w + px as usize;
            let p = Point { x: px as u32, y: py as u32 };
            if crack_mask[idx] && !points.contains(&p) {
                points.push(p);
            }
        }
        if points.is_empty() {
            return Err(Error::arg(format!("image {index}: crack too small to annotate")));
        }
    }

    let mut data = Vec::with_capacity(cfg.channels * h * w);
    for _ in 0..cfg.channels {
        data.extend_from_slice(&plane);
    }
    Ok(Rendered {
        image: Tensor::new(vec![cfg.channels, h, w], data)?,
        bone: bone_mask,
        crack: crack_mask,
        points,
    })
}

fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Balanced corpus of `n` images: pairs of (fractured, healthy) images,
/// assigned to train/val/test by pair so every split stays balanced.
pub fn generate_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::arg(format!("image count must be even and at least 2, got {n}")));
    }
    if cfg.channels != 1 && cfg.channels != 3 {
        return Err(Error::arg(format!("channels must be 1 or 3, got {}", cfg.channels)));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(Error::arg("images must be at least 16x16"));
    }
    if cfg.points_per_crack == 0 {
        return Err(Error::arg("points_per_crack must be positive"));
    }
    let fractions_ok = (0.0..=1.0).contains(&cfg.train_fraction)
        && (0.0..=1.0).contains(&cfg.val_fraction)
        && cfg.train_fraction + cfg.val_fraction <= 1.0;
    if !fractions_ok {
        return Err(Error::arg("split fractions must be in [0, 1] and sum to at most 1"));
    }
    let pairs = n / 2;
    let train_pairs = (cfg.train_fraction * pairs as f64).round() as usize;
    let val_pairs = ((cfg.val_fraction * pairs as f64).round() as usize).min(pairs - train_pairs);
    let split_of = |pair: usize| {
        if pair < train_pairs {
            Split::Train
        } else if pair < train_pairs + val_pairs {
            Split::Val
        } else {
            Split::Test
        }
    };

    let rendered: Vec<Rendered> = (0..n)
        .into_par_iter()
        .map(|i| render(seed, i as u64, i % 2 == 0, cfg))
        .collect::<Result<_>>()?;

    let mut annotations = AnnotationSet::new();
    let mut samples = Vec::with_capacity(n);
    for (i, r) in rendered.into_iter().enumerate() {
        let id = image_id(i);
        let label = if i % 2 == 0 { Label::Fractured } else { Label::Healthy };
        if label == Label::Fractured {
            annotations.insert(id.clone(), r.points)?;
        }
        samples.push(Sample {
            id,
            image: r.image,
            label,
            split: split_of(i / 2),
        });
    }
    Ok(Dataset {
        samples,
        annotations,
        seed,
    })
}

/// The dataset manifest stored next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Relative to the manifest's directory.
    pub annotations: PathBuf,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Writes images, the annotation file and `dataset.toml` under `dir`.
/// Returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let [c, h, w] = ds.image_shape().ok_or_else(|| Error::arg("empty dataset"))?;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let mut images = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let rel = PathBuf::from("images").join(format!("{}.{ext}", s.id));
        let comment = vec![format!("robustmap seed={} id={}", ds.seed, s.id)];
        pnm::write_image(&dir.join(&rel), &s.image, &comment)?;
        images.push(ImageEntry {
            id: s.id.clone(),
            path: rel,
            label: s.label,
            split: s.split,
        });
    }
    ds.annotations.save(&dir.join(ANNOTATION_FILE))?;
    let manifest = DatasetManifest {
        seed: ds.seed,
        channels: c,
        height: h,
        width: w,
        annotations: PathBuf::from(ANNOTATION_FILE),
        images,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset manifest, its images and its annotations.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let samples = manifest
        .images
        .par_iter()
        .map(|entry| {
            let path = root.join(&entry.path);
            let image = pnm::read_image(&path)?;
            if image.shape() != [manifest.channels, manifest.height, manifest.width] {
                return Err(Error::format(
                    &path,
                    format!(
                        "image is {:?}, manifest declares {}x{}x{}",
                        image.shape(),
                        manifest.channels,
                        manifest.height,
                        manifest.width
                    ),
                ));
            }
            Ok(Sample {
                id: entry.id.clone(),
                image,
                label: entry.label,
                split: entry.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let annotations = AnnotationSet::load(&root.join(&manifest.annotations))?;
    annotations.validate(manifest.height, manifest.width)?;
    Ok(Dataset {
        samples,
        annotations,
        seed: manifest.seed,
    })
}
