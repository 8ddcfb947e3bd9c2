use super::{channel_max_abs, spatial, AttributionMap, Method};
use crate::autodiff::{check_class, forward};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Signed per-input contributions `m ⊙ (x - x_ref)`, where the multipliers
/// `m` come from the rescale-rule reverse pass. They sum to
/// `f_c(x) - f_c(x_ref)`.
pub fn deeplift_contributions(model: &Model, x: &Tensor, class: usize, reference: &Tensor) -> Result<Tensor> {
    check_class(model, class)?;
    reference.expect_shape(x.shape(), "deeplift reference")?;
    let (logits, tape) = forward(model, x)?;
    let (_, ref_tape) = forward(model, reference)?;
    let mut upstream = Tensor::zeros(logits.shape());
    upstream.data_mut()[class] = 1.0;
    let multipliers = tape.backward_rescale(ref_tape, model, &upstream)?;
    let delta = x.sub(reference)?;
    multipliers.zip_map(&delta, |m, d| m * d)
}

/// Per-pixel maximum absolute contribution over channels.
pub fn deeplift(model: &Model, x: &Tensor, class: usize, reference: &Tensor) -> Result<AttributionMap> {
    let contributions = deeplift_contributions(model, x, class, reference)?;
    let (height, width) = spatial(x);
    Ok(AttributionMap {
        height,
        width,
        values: channel_max_abs(&contributions),
        method: Method::DeepLift,
        target_class: class,
        config_digest: "deeplift reference=custom".into(),
    })
}
