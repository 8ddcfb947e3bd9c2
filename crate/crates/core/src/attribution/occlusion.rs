//! Occlusion sensitivity: the drop of the class logit when a patch is
//! replaced by a baseline intensity, evaluated on a strided grid.

use rayon::prelude::*;

use super::{spatial, AttributionMap, Method};
use crate::autodiff::{check_class, grad_input, predict};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    /// Replacement intensity, in `[0, 1]`.
    pub baseline_value: f64,
    /// Occlude each channel separately and sum the per-channel scores,
    /// instead of occluding all channels at once.
    pub per_channel: bool,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch_h: 8,
            patch_w: 8,
            stride_h: 4,
            stride_w: 4,
            baseline_value: 0.0,
            per_channel: false,
        }
    }
}

impl OcclusionConfig {
    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::arg("occlusion patch and stride must be positive"));
        }
        if !(0.0..=1.0).contains(&self.baseline_value) {
            return Err(Error::arg(format!(
                "occlusion baseline must lie in [0, 1], got {}",
                self.baseline_value
            )));
        }
        if self.patch_h > height || self.patch_w > width {
            return Err(Error::arg(format!(
                "occlusion patch {}x{} exceeds image {height}x{width}",
                self.patch_h, self.patch_w
            )));
        }
        Ok(())
    }

    fn digest(&self, linearized: bool) -> String {
        format!(
            "occlusion{} patch={}x{} stride={}x{} baseline={} {}",
            if linearized { "_linearized" } else { "" },
            self.patch_h,
            self.patch_w,
            self.stride_h,
            self.stride_w,
            self.baseline_value,
            if self.per_channel { "per_channel" } else { "joint" }
        )
    }
}

/// Scores at the strided patch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionGrid {
    /// Top row of each grid row's patch.
    pub rows: Vec<usize>,
    /// Left column of each grid column's patch.
    pub cols: Vec<usize>,
    /// Row-major, `rows.len() * cols.len()` scores.
    pub scores: Vec<f64>,
}

impl OcclusionGrid {
    /// Full-resolution map: each pixel takes the mean score of the patch
    /// positions covering it, or 0 when no patch covers it.
    pub fn upsample(&self, height: usize, width: usize, patch_h: usize, patch_w: usize) -> Vec<f64> {
        let mut sum = vec![0.0; height * width];
        let mut count = vec![0u32; height * width];
        for (r, &top) in self.rows.iter().enumerate() {
            for (c, &left) in self.cols.iter().enumerate() {
                let score = self.scores[r * self.cols.len() + c];
                for y in top..top + patch_h {
                    for x in left..left + patch_w {
                        sum[y * width + x] += score;
                        count[y * width + x] += 1;
                    }
                }
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }
}

fn positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=extent - patch).step_by(stride).collect()
}

/// Copy of `x` with the patch at `(top, left)` replaced in the given channels.
fn occluded(x: &Tensor, cfg: &OcclusionConfig, top: usize, left: usize, channels: std::ops::Range<usize>) -> Tensor {
    let (h, w) = spatial(x);
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in channels {
        for y in top..top + cfg.patch_h {
            let row = ch * h * w + y * w;
            d[row + left..row + left + cfg.patch_w].fill(cfg.baseline_value);
        }
    }
    out
}

pub fn occlusion_grid(model: &Model, x: &Tensor, class: usize, cfg: &OcclusionConfig) -> Result<OcclusionGrid> {
    check_class(model, class)?;
    let (h, w) = spatial(x);
    cfg.validate(h, w)?;
    let channels = x.shape()[0];
    let base = predict(model, x)?.data()[class];
    let rows = positions(h, cfg.patch_h, cfg.stride_h);
    let cols = positions(w, cfg.patch_w, cfg.stride_w);
    let cells: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(top, left)| {
            if cfg.per_channel {
                (0..channels)
                    .map(|ch| Ok(base - predict(model, &occluded(x, cfg, top, left, ch..ch + 1))?.data()[class]))
                    .sum::<Result<f64>>()
            } else {
                Ok(base - predict(model, &occluded(x, cfg, top, left, 0..channels))?.data()[class])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OcclusionGrid { rows, cols, scores })
}

/// `S(i, j) = f(x)_c - f(x^(i,j))_c`, upsampled to the image grid.
pub fn occlusion(model: &Model, x: &Tensor, class: usize, cfg: &OcclusionConfig) -> Result<AttributionMap> {
    let grid = occlusion_grid(model, x, class, cfg)?;
    let (height, width) = spatial(x);
    Ok(AttributionMap {
        height,
        width,
        values: grid.upsample(height, width, cfg.patch_h, cfg.patch_w),
        method: Method::Occlusion,
        target_class: class,
        config_digest: cfg.digest(false),
    })
}

/// First-order estimate `S(i, j) ≈ -∇f(x)_c · Δx_(i,j)` with
/// `Δx_(i,j) = x^(i,j) - x`; one gradient evaluation replaces every
/// occluded forward pass.
pub fn occlusion_linearized_grid(model: &Model, x: &Tensor, class: usize, cfg: &OcclusionConfig) -> Result<OcclusionGrid> {
    let (h, w) = spatial(x);
    cfg.validate(h, w)?;
    let grad = grad_input(model, x, class)?;
    let channels = x.shape()[0];
    let rows = positions(h, cfg.patch_h, cfg.stride_h);
    let cols = positions(w, cfg.patch_w, cfg.stride_w);
    let (g, xd) = (grad.data(), x.data());
    let mut scores = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            // Joint and per-channel occlusion share the same first-order sum.
            let mut s = 0.0;
            for ch in 0..channels {
                for y in top..top + cfg.patch_h {
                    for xx in left..left + cfg.patch_w {
                        let k = ch * h * w + y * w + xx;
                        s -= g[k] * (cfg.baseline_value - xd[k]);
                    }
                }
            }
            scores.push(s);
        }
    }
    Ok(OcclusionGrid { rows, cols, scores })
}

pub fn occlusion_linearized(model: &Model, x: &Tensor, class: usize, cfg: &OcclusionConfig) -> Result<AttributionMap> {
    let grid = occlusion_linearized_grid(model, x, class, cfg)?;
    let (height, width) = spatial(x);
    Ok(AttributionMap {
        height,
        width,
        values: grid.upsample(height, width, cfg.patch_h, cfg.patch_w),
        method: Method::Occlusion,
        target_class: class,
        config_digest: cfg.digest(true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_positions_respect_stride() {
        assert_eq!(positions(64, 8, 4), (0..=56).step_by(4).collect::<Vec<_>>());
        assert_eq!(positions(4, 2, 2), vec![0, 2]);
        assert_eq!(positions(5, 2, 2), vec![0, 2]);
    }

    #[test]
    fn overlapping_patches_average() {
        let grid = OcclusionGrid {
            rows: vec![0],
            cols: vec![0, 1],
            scores: vec![2.0, 4.0],
        };
        assert_eq!(grid.upsample(1, 4, 1, 2), vec![2.0, 3.0, 4.0, 0.0]);
    }
}
