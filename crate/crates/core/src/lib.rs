//! Adversarial robustness and attribution alignment for small CNN classifiers.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`autodiff`]: forward evaluation and reverse-mode input/parameter gradients.
//! - [`model`] and [`weights`]: architecture, head replacement, freezing and the `MWF1` format.
//! - [`synth`] and [`train`]: synthetic fracture images, standard and adversarial training.
//! - [`attack`]: L∞ PGD, adversarial accuracy and robustness ranking.
//! - [`attribution`]: saliency, occlusion, DeepLIFT and Integrated Gradients maps.
//! - [`coverage`]: percentile masks and the point coverage ratio.

pub mod attack;
pub mod attribution;
pub mod autodiff;
pub mod coverage;
pub mod error;
pub mod model;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use model::{Layer, LayerKind, Model, ModelBuilder, Padding, Param};
pub use tensor::Tensor;
