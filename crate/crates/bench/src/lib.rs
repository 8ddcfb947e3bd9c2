//! Shared fixtures for the benchmarks.

use robustmap::synth::{self, Dataset, SynthConfig, CLASS_NAMES};
use robustmap::{model, Model, Tensor};

/// A small synthetic dataset and an untrained tiny CNN sized for it.
pub fn fixture(n: usize) -> (Dataset, Model) {
    let ds = synth::generate_dataset(3, n, &SynthConfig::default()).expect("synthetic dataset");
    let shape = ds.image_shape().expect("non-empty dataset");
    let (mean, std) = ds.channel_stats(synth::Split::Train).expect("channel stats");
    let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let m = model::tiny_cnn(shape, mean, std, names, 3).expect("tiny cnn");
    (ds, m)
}

pub fn first_image(ds: &Dataset) -> Tensor {
    ds.samples[0].image.clone()
}
