use super::{channel_max_abs, spatial, AttributionMap, Method};
use crate::autodiff::grad_input;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    pub baseline: Tensor,
    /// Riemann-sum resolution.
    pub n_steps: usize,
}

/// Signed attributions `(x - x') ⊙ mean_k ∇F(x' + α_k (x - x'))` with
/// midpoint nodes `α_k = (k - 1/2) / n`.
pub fn integrated_gradients_signed(model: &Model, x: &Tensor, class: usize, cfg: &PathConfig) -> Result<Tensor> {
    if cfg.n_steps < 1 {
        return Err(Error::arg("integrated gradients needs at least one step"));
    }
    cfg.baseline.expect_shape(x.shape(), "integrated gradients baseline")?;
    let delta = x.sub(&cfg.baseline)?;
    let n = cfg.n_steps as f64;
    let mut total = Tensor::zeros(x.shape());
    for k in 1..=cfg.n_steps {
        let alpha = (k as f64 - 0.5) / n;
        let point = cfg.baseline.zip_map(&delta, |b, d| b + alpha * d)?;
        let g = grad_input(model, &point, class)?;
        for (t, v) in total.data_mut().iter_mut().zip(g.data()) {
            *t += v;
        }
    }
    delta.zip_map(&total, |d, t| d * t / n)
}

/// Integrated Gradients reduced to a map by the per-pixel channel maximum of `|IG|`.
pub fn integrated_gradients(model: &Model, x: &Tensor, class: usize, cfg: &PathConfig) -> Result<AttributionMap> {
    let signed = integrated_gradients_signed(model, x, class, cfg)?;
    let (height, width) = spatial(x);
    Ok(AttributionMap {
        height,
        width,
        values: channel_max_abs(&signed),
        method: Method::IntegratedGradients,
        target_class: class,
        config_digest: format!("integrated_gradients steps={} baseline=custom", cfg.n_steps),
    })
}
