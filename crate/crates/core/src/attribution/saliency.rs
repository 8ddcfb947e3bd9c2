use super::{channel_max_abs, spatial, AttributionMap, Method};
use crate::autodiff::grad_input;
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// `|∂f_c/∂x|`, reduced over channels by the maximum.
pub fn saliency(model: &Model, x: &Tensor, class: usize) -> Result<AttributionMap> {
    let grad = grad_input(model, x, class)?;
    let (height, width) = spatial(x);
    Ok(AttributionMap {
        height,
        width,
        values: channel_max_abs(&grad),
        method: Method::Saliency,
        target_class: class,
        config_digest: "saliency".into(),
    })
}
