#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robustmap::autodiff::forward;
use robustmap::model::{Layer, LayerKind, Model, ModelBuilder, Padding};
use robustmap::Tensor;

pub fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Copies `model` with every bias redrawn uniformly from `[-scale, scale]`,
/// so that ReLU inputs are not pinned at zero by construction.
pub fn with_random_biases(model: &Model, rng: &mut ChaCha8Rng, scale: f64) -> Model {
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            if layer.params.is_empty() {
                return layer.clone();
            }
            let weight = layer.params[0].value.clone();
            let bias = random_tensor(rng, layer.params[1].value.shape(), -scale, scale);
            Layer::with_params(i, layer.kind.clone(), vec![weight, bias]).unwrap()
        })
        .collect();
    Model::new(model.input_shape(), layers, model.class_names().to_vec()).unwrap()
}

/// A random small CNN covering every supported layer kind across draws.
pub fn random_cnn(seed: u64) -> Model {
    let mut r = rng(seed);
    let channels = r.gen_range(1..=3);
    let (h, w) = (r.gen_range(6..=10), r.gen_range(6..=10));
    let classes = r.gen_range(2..=3);
    let mut b = ModelBuilder::new([channels, h, w]);
    if r.gen_bool(0.5) {
        let mean = (0..channels).map(|_| r.gen_range(0.2..0.6)).collect();
        let std = (0..channels).map(|_| r.gen_range(0.2..0.5)).collect();
        b = b.standardize(mean, std);
    }
    // Same padding needs an odd kernel.
    let (kernel, padding) = match r.gen_range(0..4) {
        0 => (1, Padding::Same),
        1 => (3, Padding::Same),
        2 => (2, Padding::Valid),
        _ => (3, Padding::Valid),
    };
    b = b.conv(r.gen_range(1..=4), kernel, padding).relu();
    if r.gen_bool(0.6) {
        b = b.max_pool();
    }
    if r.gen_bool(0.5) {
        b = b.conv(r.gen_range(1..=4), [1, 3][r.gen_range(0..2)], Padding::Same).relu();
    }
    b = if r.gen_bool(0.5) { b.global_avg_pool() } else { b.flatten() };
    if r.gen_bool(0.4) {
        b = b.dense(r.gen_range(2..=5)).relu();
    }
    let model = b.dense(classes).build(names(classes), seed).unwrap();
    with_random_biases(&model, &mut r, 0.2)
}

/// `f(x) = W x + b` on a flattened input.
pub fn linear_model(shape: [usize; 3], weight: Tensor, bias: Tensor) -> Model {
    let inputs = shape.iter().product();
    let outputs = bias.len();
    let layers = vec![
        Layer::stateless(LayerKind::Flatten),
        Layer::with_params(1, LayerKind::Dense { inputs, outputs }, vec![weight, bias]).unwrap(),
    ];
    Model::new(shape, layers, names(outputs)).unwrap()
}

/// Random linear model whose weights, biases and inputs are multiples of
/// small powers of two, so every sum a forward pass forms is exact.
pub fn dyadic_linear(seed: u64, shape: [usize; 3], classes: usize) -> (Model, Tensor) {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(vec![classes, n], (0..classes * n).map(|_| r.gen_range(-16i32..=16) as f64 / 16.0).collect()).unwrap();
    let b = Tensor::new(vec![classes], (0..classes).map(|_| r.gen_range(-8i32..=8) as f64 / 8.0).collect()).unwrap();
    let x = Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0..=64) as f64 / 64.0).collect()).unwrap();
    (linear_model(shape, w, b), x)
}

pub fn logit(model: &Model, x: &Tensor, class: usize) -> f64 {
    forward(model, x).unwrap().0.data()[class]
}

/// `max |a - b| / max(max |a|, max |b|)`, or 0 when both are zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().max_abs();
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
