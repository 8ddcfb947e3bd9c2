//! CNN architecture description, head replacement and backbone freezing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding of `kernel / 2` on every side; kernels must be odd.
    Same,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Per-channel affine map `(x - mean) / std`.
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    /// Weight `[out, in, k, k]`, bias `[out]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    /// 2x2 window, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    /// Weight `[out, in]`, bias `[out]`.
    Dense { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Standardize { .. } => "standardize",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
        }
    }

    /// Shapes of the parameter tensors this layer owns, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerKind::Dense { inputs, outputs } => {
                vec![("weight", vec![outputs, inputs]), ("bias", vec![outputs])]
            }
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or a description of the incompatibility.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let chw = || -> std::result::Result<(usize, usize, usize), String> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(format!("expected [channels, height, width], got {input:?}")),
            }
        };
        match self {
            LayerKind::Standardize { mean, std } => {
                let (c, _, _) = chw()?;
                if mean.len() != c || std.len() != c {
                    return Err(format!(
                        "standardize has {} means / {} stds for {c} channels",
                        mean.len(),
                        std.len()
                    ));
                }
                if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err("standardize std must be positive".into());
                }
                Ok(input.to_vec())
            }
            &LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (c, h, w) = chw()?;
                if c != in_channels {
                    return Err(format!("expected {in_channels} input channels, got {c}"));
                }
                if kernel == 0 || out_channels == 0 {
                    return Err("empty kernel".into());
                }
                match padding {
                    Padding::Same if kernel % 2 == 0 => {
                        Err(format!("same padding needs an odd kernel, got {kernel}"))
                    }
                    Padding::Same => Ok(vec![out_channels, h, w]),
                    Padding::Valid if kernel > h || kernel > w => {
                        Err(format!("kernel {kernel} exceeds input {h}x{w}"))
                    }
                    Padding::Valid => Ok(vec![out_channels, h - kernel + 1, w - kernel + 1]),
                }
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2 => {
                let (c, h, w) = chw()?;
                if h < 2 || w < 2 {
                    return Err(format!("max-pool needs at least 2x2, got {h}x{w}"));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = chw()?;
                Ok(vec![c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            &LayerKind::Dense { inputs, outputs } => match *input {
                [n] if n == inputs && outputs > 0 => Ok(vec![outputs]),
                _ => Err(format!("expected [{inputs}], got {input:?}")),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Param>,
}

impl Layer {
    /// A parameter-free layer; panics for conv/dense, which need weights.
    pub fn stateless(kind: LayerKind) -> Self {
        assert!(kind.param_shapes().is_empty(), "{} needs parameters", kind.name());
        Layer {
            kind,
            params: Vec::new(),
        }
    }

    /// Conv or dense layer with explicit weight and bias values.
    pub fn with_params(index: usize, kind: LayerKind, values: Vec<Tensor>) -> Result<Self> {
        let shapes = kind.param_shapes();
        if shapes.len() != values.len() {
            return Err(Error::InvalidModel(format!(
                "layer {index} ({}) takes {} parameter tensors, got {}",
                kind.name(),
                shapes.len(),
                values.len()
            )));
        }
        let params = shapes
            .into_iter()
            .zip(values)
            .map(|((suffix, shape), value)| {
                value.expect_shape(&shape, &format!("layer {index} {suffix}"))?;
                Ok(Param {
                    name: format!("layer{index}.{suffix}"),
                    value,
                    trainable: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layer { kind, params })
    }

    pub(crate) fn weight(&self) -> &[f64] {
        self.params[0].value.data()
    }

    pub(crate) fn bias(&self) -> &[f64] {
        self.params[1].value.data()
    }
}

/// An ordered stack of layers ending in a dense classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    class_names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, class_names: Vec<String>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("empty input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let expected = layer.kind.param_shapes();
            if expected.len() != layer.params.len()
                || expected
                    .iter()
                    .zip(&layer.params)
                    .any(|((_, s), p)| p.value.shape() != s.as_slice())
            {
                return Err(Error::InvalidModel(format!(
                    "layer {i} ({}) parameters do not match its declared shape",
                    layer.kind.name()
                )));
            }
            let out = layer
                .kind
                .output_shape(shapes.last().unwrap())
                .map_err(|msg| Error::ShapeMismatch {
                    layer: format!("layer {i} ({})", layer.kind.name()),
                    expected: msg,
                    actual: format!("{:?}", shapes.last().unwrap()),
                })?;
            shapes.push(out);
        }
        let head_outputs = match layers.last().map(|l| &l.kind) {
            Some(LayerKind::Dense { outputs, .. }) => *outputs,
            _ => return Err(Error::InvalidModel("the final layer must be a dense head".into())),
        };
        if class_names.len() != head_outputs {
            return Err(Error::InvalidModel(format!(
                "{} class names for a {head_outputs}-output head",
                class_names.len()
            )));
        }
        if class_names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return Err(Error::InvalidModel(
                "class names must be non-empty and contain no whitespace".into(),
            ));
        }
        Ok(Model {
            input_shape,
            layers,
            class_names,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Activation shapes: entry `i` is the input of layer `i`, the last entry is the logits.
    pub fn activation_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes() {
            return Err(Error::InvalidModel(format!(
                "{} class names for a {}-output head",
                names.len(),
                self.num_classes()
            )));
        }
        self.class_names = names;
        Model::new(self.input_shape, self.layers, self.class_names)
    }

    /// Swaps the final dense layer for a freshly initialized `k`-output head.
    ///
    /// Weights and biases are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Every other parameter, including its trainable flag, is carried over unchanged.
    pub fn replace_head(&self, k: usize, seed: u64) -> Result<Model> {
        if k < 2 {
            return Err(Error::arg(format!("a classification head needs at least 2 outputs, got {k}")));
        }
        let head = self.head_index();
        let inputs = match self.layers[head].kind {
            LayerKind::Dense { inputs, .. } => inputs,
            _ => unreachable!("validated at construction"),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let weight = Tensor::new(vec![k, inputs], draw(k * inputs))?;
        let bias = Tensor::new(vec![k], draw(k))?;
        let new_head = Layer::with_params(head, LayerKind::Dense { inputs, outputs: k }, vec![weight, bias])?;

        let mut layers = self.layers.clone();
        layers[head] = new_head;
        let names = (0..k).map(|i| format!("class{i}")).collect();
        Model::new(self.input_shape, layers, names)
    }

    /// Marks every parameter outside the head as frozen and the head as trainable.
    pub fn freeze_backbone(&self) -> Model {
        let head = self.head_index();
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            for p in &mut layer.params {
                p.trainable = i == head;
            }
        }
        out
    }
}

/// Fluent construction of a model with He-uniform initial weights.
pub struct ModelBuilder {
    input_shape: [usize; 3],
    current: Vec<usize>,
    kinds: Vec<LayerKind>,
}

impl ModelBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        ModelBuilder {
            input_shape,
            current: input_shape.to_vec(),
            kinds: Vec::new(),
        }
    }

    fn push(mut self, kind: LayerKind) -> Self {
        if let Ok(next) = kind.output_shape(&self.current) {
            self.current = next;
        }
        self.kinds.push(kind);
        self
    }

    pub fn standardize(self, mean: Vec<f64>, std: Vec<f64>) -> Self {
        self.push(LayerKind::Standardize { mean, std })
    }

    pub fn conv(self, out_channels: usize, kernel: usize, padding: Padding) -> Self {
        let in_channels = self.current.first().copied().unwrap_or(0);
        self.push(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        })
    }

    pub fn relu(self) -> Self {
        self.push(LayerKind::Relu)
    }

    pub fn max_pool(self) -> Self {
        self.push(LayerKind::MaxPool2)
    }

    pub fn global_avg_pool(self) -> Self {
        self.push(LayerKind::GlobalAvgPool)
    }

    pub fn flatten(self) -> Self {
        self.push(LayerKind::Flatten)
    }

    pub fn dense(self, outputs: usize) -> Self {
        let inputs = self.current.iter().product();
        self.push(LayerKind::Dense { inputs, outputs })
    }

    pub fn build(self, class_names: Vec<String>, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .kinds
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let shapes = kind.param_shapes();
                if shapes.is_empty() {
                    return Ok(Layer::stateless(kind));
                }
                let fan_in: usize = shapes[0].1[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight_shape = shapes[0].1.clone();
                let n = weight_shape.iter().product();
                let weight = Tensor::new(
                    weight_shape,
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
                )?;
                let bias = Tensor::zeros(&shapes[1].1);
                Layer::with_params(i, kind, vec![weight, bias])
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(self.input_shape, layers, class_names)
    }
}

/// The desk-scale classifier used by the pipelines: four valid 3x3 conv
/// blocks (the first three max-pooled), global average pooling and a dense
/// head. Inputs need to be at least 46 pixels on each side.
pub fn tiny_cnn(input_shape: [usize; 3], mean: Vec<f64>, std: Vec<f64>, class_names: Vec<String>, seed: u64) -> Result<Model> {
    let classes = class_names.len();
    ModelBuilder::new(input_shape)
        .standardize(mean, std)
        .conv(4, 3, Padding::Valid)
        .relu()
        .max_pool()
        .conv(8, 3, Padding::Valid)
        .relu()
        .max_pool()
        .conv(8, 3, Padding::Valid)
        .relu()
        .max_pool()
        .conv(8, 3, Padding::Valid)
        .relu()
        .global_avg_pool()
        .dense(classes)
        .build(class_names, seed)
}
