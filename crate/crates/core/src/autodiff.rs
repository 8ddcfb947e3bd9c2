//! Forward evaluation with a layer-granular tape and the matching reverse pass.
//!
//! Every layer is recorded with its input activation (and the max-pool
//! routing indices), which is everything the reverse pass needs. The same
//! reverse machinery also propagates DeepLIFT multipliers: affine layers use
//! their Jacobian in both cases, only ReLU and max-pool switch rules.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Model, Padding};
use crate::tensor::Tensor;

/// `|Δinput|` below which the ReLU rescale rule falls back to the gradient.
pub const RESCALE_EPSILON: f64 = 1e-7;

/// Record of one forward evaluation.
///
/// The reverse pass consumes the tape, so each tape drives exactly one
/// backward evaluation.
#[derive(Clone, Debug)]
pub struct Tape {
    activations: Vec<Tensor>,
    pool_routes: Vec<Option<Vec<usize>>>,
}

/// Gradients produced by one reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Gradient with respect to the model input; `None` when not requested.
    pub input: Option<Tensor>,
    /// Per layer, per parameter gradient, aligned with [`Layer::params`].
    /// Empty when parameter gradients were not requested.
    pub params: Vec<Vec<Tensor>>,
}

/// Evaluates the model on one input, recording the tape for a reverse pass.
pub fn forward(model: &Model, x: &Tensor) -> Result<(Tensor, Tape)> {
    check_input(model, x)?;
    let layers = model.layers();
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut pool_routes = Vec::with_capacity(layers.len());
    activations.push(x.clone());
    for (i, layer) in layers.iter().enumerate() {
        let input = &activations[i];
        let (out, route) = layer_forward(layer, input, &model.activation_shapes()[i + 1])?;
        activations.push(out);
        pool_routes.push(route);
    }
    let logits = activations.last().unwrap().clone();
    Ok((
        logits,
        Tape {
            activations,
            pool_routes,
        },
    ))
}

fn check_input(model: &Model, x: &Tensor) -> Result<()> {
    let name = model.layers()[0].kind.name();
    x.expect_shape(&model.input_shape(), &format!("layer 0 ({name}) input"))
}

/// Logits only; no tape is kept.
pub fn predict(model: &Model, x: &Tensor) -> Result<Tensor> {
    check_input(model, x)?;
    let mut current = Cow::Borrowed(x);
    for (i, layer) in model.layers().iter().enumerate() {
        let (out, _) = layer_forward(layer, &current, &model.activation_shapes()[i + 1])?;
        current = Cow::Owned(out);
    }
    Ok(current.into_owned())
}

/// `∂f_c(x)/∂x` for the pre-softmax logit of class `c`.
pub fn grad_input(model: &Model, x: &Tensor, class: usize) -> Result<Tensor> {
    check_class(model, class)?;
    let (logits, tape) = forward(model, x)?;
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[class] = 1.0;
    Ok(tape.backward(model, &seed, true, false)?.input.unwrap())
}

/// Central-difference estimate of `∂f_c(x)/∂x`, one coordinate at a time.
pub fn numeric_gradient(model: &Model, x: &Tensor, class: usize, h: f64) -> Result<Tensor> {
    check_class(model, class)?;
    central_difference(|probe| Ok(predict(model, probe)?.data()[class]), x, h)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Softmax cross-entropy of `logits` against `label`, with its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, label: usize) -> (f64, Tensor) {
    let z = logits.data();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - z[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    (loss, Tensor::from_vec(grad))
}

pub(crate) fn check_class(model: &Model, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    /// Entry `i` is the input of layer `i`; the last entry is the logits.
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Re-executes every recorded layer from its recorded input and returns
    /// the final output.
    pub fn replay(&self, model: &Model) -> Result<Tensor> {
        let mut last = None;
        for (i, layer) in model.layers().iter().enumerate() {
            let (out, _) = layer_forward(layer, &self.activations[i], &model.activation_shapes()[i + 1])?;
            last = Some(out);
        }
        Ok(last.unwrap())
    }

    /// Smallest distance of any ReLU input to zero, or of any max-pool
    /// window's runner-up to its maximum. Central differences with a step
    /// below this margin see a locally linear network.
    pub fn kink_margin(&self, model: &Model) -> f64 {
        let mut margin = f64::INFINITY;
        for (i, layer) in model.layers().iter().enumerate() {
            let input = &self.activations[i];
            match layer.kind {
                LayerKind::Relu => {
                    for v in input.data() {
                        margin = margin.min(v.abs());
                    }
                }
                LayerKind::MaxPool2 => {
                    let s = input.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    for ch in 0..c {
                        for y in 0..h / 2 {
                            for x in 0..w / 2 {
                                let mut vals = window(input.data(), ch, h, w, y, x).map(|(_, v)| v).collect::<Vec<_>>();
                                vals.sort_by(|a, b| b.total_cmp(a));
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Propagates `upstream` (a gradient with respect to the logits) back
    /// through the network.
    pub fn backward(self, model: &Model, upstream: &Tensor, want_input: bool, want_params: bool) -> Result<Gradients> {
        reverse(model, &self, None, upstream, want_input, want_params)
    }

    /// DeepLIFT reverse pass: propagates multipliers relative to the
    /// evaluation recorded in `reference`. Affine layers use the linear rule,
    /// ReLU the rescale rule and max-pool an interpolation between the input
    /// and reference argmax positions, so that `Σ m_i (x_i - r_i)` equals
    /// `Σ upstream_j (y_j - y_ref_j)` at every layer.
    pub fn backward_rescale(self, reference: Tape, model: &Model, upstream: &Tensor) -> Result<Tensor> {
        let grads = reverse(model, &self, Some(&reference), upstream, true, false)?;
        Ok(grads.input.unwrap())
    }
}

fn reverse(
    model: &Model,
    tape: &Tape,
    reference: Option<&Tape>,
    upstream: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<Gradients> {
    upstream.expect_shape(tape.logits().shape(), "upstream gradient")?;
    let layers = model.layers();
    let mut params: Vec<Vec<Tensor>> = if want_params {
        layers.iter().map(|l| Vec::with_capacity(l.params.len())).collect()
    } else {
        Vec::new()
    };
    let mut grad = upstream.clone();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let input = &tape.activations[i];
        let need_input = i > 0 || want_input;
        let out = match &layer.kind {
            LayerKind::Standardize { std, .. } => {
                let s = input.shape();
                let plane = s[1] * s[2];
                let mut g = grad.into_data();
                for (ch, sd) in std.iter().enumerate() {
                    for v in &mut g[ch * plane..(ch + 1) * plane] {
                        *v /= sd;
                    }
                }
                Some(Tensor::new(s.to_vec(), g)?)
            }
            &LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let geo = ConvGeometry::new(input.shape(), in_channels, out_channels, kernel, padding);
                if want_params {
                    let (dw, db) = conv_param_grad(layer, input, &grad, &geo);
                    params[i].push(dw);
                    params[i].push(db);
                }
                need_input.then(|| conv_input_grad(layer, &grad, input.shape(), &geo))
            }
            LayerKind::Relu => {
                let g = match reference {
                    None => relu_grad(input, &grad),
                    Some(r) => relu_rescale(input, &tape.activations[i + 1], &r.activations[i], &r.activations[i + 1], &grad),
                };
                Some(g)
            }
            LayerKind::MaxPool2 => {
                let route = tape.pool_routes[i].as_ref().expect("max-pool route recorded");
                let g = match reference {
                    None => maxpool_grad(input.shape(), route, &grad),
                    Some(r) => maxpool_rescale(
                        input,
                        route,
                        &r.activations[i],
                        r.pool_routes[i].as_ref().expect("max-pool route recorded"),
                        &grad,
                    ),
                };
                Some(g)
            }
            LayerKind::GlobalAvgPool => {
                let s = input.shape();
                let plane = s[1] * s[2];
                let scale = 1.0 / plane as f64;
                let mut g = Vec::with_capacity(input.len());
                for &go in grad.data() {
                    g.extend(std::iter::repeat(go * scale).take(plane));
                }
                Some(Tensor::new(s.to_vec(), g)?)
            }
            LayerKind::Flatten => Some(grad.reshape(input.shape())?),
            &LayerKind::Dense { inputs, outputs } => {
                let w = layer.weight();
                let go = grad.data();
                if want_params {
                    let x = input.data();
                    let mut dw = Vec::with_capacity(outputs * inputs);
                    for &g in go {
                        dw.extend(x.iter().map(|v| g * v));
                    }
                    params[i].push(Tensor::new(vec![outputs, inputs], dw)?);
                    params[i].push(grad.clone());
                }
                need_input.then(|| {
                    let mut gi = vec![0.0; inputs];
                    for (o, &g) in go.iter().enumerate() {
                        for (d, wv) in gi.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *d += g * wv;
                        }
                    }
                    Tensor::from_vec(gi)
                })
            }
        };
        match out {
            Some(g) => grad = g,
            None => return Ok(Gradients { input: None, params }),
        }
    }
    Ok(Gradients {
        input: want_input.then_some(grad),
        params,
    })
}

fn relu_grad(input: &Tensor, grad: &Tensor) -> Tensor {
    input.zip_map(grad, |z, g| if z > 0.0 { g } else { 0.0 }).unwrap()
}

fn relu_rescale(z: &Tensor, y: &Tensor, z_ref: &Tensor, y_ref: &Tensor, grad: &Tensor) -> Tensor {
    let data = z
        .data()
        .iter()
        .zip(y.data())
        .zip(z_ref.data().iter().zip(y_ref.data()))
        .zip(grad.data())
        .map(|(((&zi, &yi), (&zr, &yr)), &g)| {
            let dz = zi - zr;
            let m = if dz.abs() < RESCALE_EPSILON {
                if zi > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (yi - yr) / dz
            };
            g * m
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data).unwrap()
}

fn maxpool_grad(input_shape: &[usize], route: &[usize], grad: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let d = g.data_mut();
    for (&idx, &go) in route.iter().zip(grad.data()) {
        d[idx] += go;
    }
    g
}

/// Per window, `Δy = x[a] - r[b]` where `a`, `b` are the argmax positions of
/// input and reference. Since `Δx[b] <= Δy <= Δx[a]`, `Δy` is a convex
/// combination `λ Δx[a] + (1 - λ) Δx[b]`; the multipliers are `λ` and `1 - λ`.
fn maxpool_rescale(input: &Tensor, route: &[usize], reference: &Tensor, ref_route: &[usize], grad: &Tensor) -> Tensor {
    let x = input.data();
    let r = reference.data();
    let mut g = Tensor::zeros(input.shape());
    let d = g.data_mut();
    for ((&a, &b), &go) in route.iter().zip(ref_route).zip(grad.data()) {
        if a == b {
            d[a] += go;
            continue;
        }
        let dy = x[a] - r[b];
        let dxa = x[a] - r[a];
        let dxb = x[b] - r[b];
        let lambda = if dxa > dxb {
            ((dy - dxb) / (dxa - dxb)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        d[a] += go * lambda;
        d[b] += go * (1.0 - lambda);
    }
    g
}

/// Input positions of one 2x2 window in row-major order, as `(flat index, value)`.
fn window(data: &[f64], ch: usize, h: usize, w: usize, y: usize, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let base = ch * h * w;
    [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().map(move |(dy, dx)| {
        let idx = base + (2 * y + dy) * w + 2 * x + dx;
        (idx, data[idx])
    })
}

fn layer_forward(layer: &Layer, input: &Tensor, out_shape: &[usize]) -> Result<(Tensor, Option<Vec<usize>>)> {
    let out = match &layer.kind {
        LayerKind::Standardize { mean, std } => {
            let s = input.shape();
            let plane = s[1] * s[2];
            let mut data = input.data().to_vec();
            for ch in 0..s[0] {
                for v in &mut data[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean[ch]) / std[ch];
                }
            }
            Tensor::new(s.to_vec(), data)?
        }
        &LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            padding,
        } => {
            let geo = ConvGeometry::new(input.shape(), in_channels, out_channels, kernel, padding);
            conv_forward(layer, input, &geo)
        }
        LayerKind::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
        LayerKind::MaxPool2 => {
            let s = input.shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut route = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best: Option<(usize, f64)> = None;
                        for (idx, v) in window(input.data(), ch, h, w, y, x) {
                            if best.map_or(true, |(_, b)| v > b) {
                                best = Some((idx, v));
                            }
                        }
                        let (idx, v) = best.unwrap();
                        out.push(v);
                        route.push(idx);
                    }
                }
            }
            return Ok((Tensor::new(vec![c, oh, ow], out)?, Some(route)));
        }
        LayerKind::GlobalAvgPool => {
            let s = input.shape();
            let plane = s[1] * s[2];
            let means = input
                .data()
                .chunks(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Tensor::from_vec(means)
        }
        LayerKind::Flatten => input.clone().reshape(&[input.len()])?,
        &LayerKind::Dense { inputs, outputs } => {
            let w = layer.weight();
            let b = layer.bias();
            let x = input.data();
            let out = (0..outputs)
                .map(|o| b[o] + w[o * inputs..(o + 1) * inputs].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            Tensor::from_vec(out)
        }
    };
    debug_assert_eq!(out.shape(), out_shape);
    Ok((out, None))
}

struct ConvGeometry {
    in_c: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(shape: &[usize], in_c: usize, out_c: usize, k: usize, padding: Padding) -> Self {
        let (h, w) = (shape[1], shape[2]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => k / 2,
        };
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        ConvGeometry {
            in_c,
            out_c,
            k,
            pad,
            h,
            w,
            hp,
            wp,
            oh: hp - k + 1,
            ow: wp - k + 1,
        }
    }

    fn padded<'a>(&self, x: &'a [f64]) -> Cow<'a, [f64]> {
        if self.pad == 0 {
            return Cow::Borrowed(x);
        }
        let mut p = vec![0.0; self.in_c * self.hp * self.wp];
        for c in 0..self.in_c {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..][..self.w];
                p[(c * self.hp + y + self.pad) * self.wp + self.pad..][..self.w].copy_from_slice(src);
            }
        }
        Cow::Owned(p)
    }
}

fn conv_forward(layer: &Layer, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let w = layer.weight();
    let b = layer.bias();
    let xp = g.padded(input.data());
    let plane_in = g.hp * g.wp;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.out_c * plane_out];
    for (o, out_o) in out.chunks_mut(plane_out).enumerate() {
        out_o.fill(b[o]);
        for i in 0..g.in_c {
            let inp = &xp[i * plane_in..(i + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * g.in_c + i) * g.k + ky) * g.k + kx];
                    for y in 0..g.oh {
                        let src = &inp[(y + ky) * g.wp + kx..][..g.ow];
                        let dst = &mut out_o[y * g.ow..][..g.ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_c, g.oh, g.ow], out).unwrap()
}

fn conv_input_grad(layer: &Layer, grad: &Tensor, input_shape: &[usize], g: &ConvGeometry) -> Tensor {
    let w = layer.weight();
    let go = grad.data();
    let plane_in = g.hp * g.wp;
    let plane_out = g.oh * g.ow;
    let mut dxp = vec![0.0; g.in_c * plane_in];
    for o in 0..g.out_c {
        let go_o = &go[o * plane_out..(o + 1) * plane_out];
        for (i, dx_i) in dxp.chunks_mut(plane_in).enumerate() {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w[((o * g.in_c + i) * g.k + ky) * g.k + kx];
                    for y in 0..g.oh {
                        let src = &go_o[y * g.ow..][..g.ow];
                        let dst = &mut dx_i[(y + ky) * g.wp + kx..][..g.ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    let data = if g.pad == 0 {
        dxp
    } else {
        let mut dx = Vec::with_capacity(g.in_c * g.h * g.w);
        for c in 0..g.in_c {
            for y in 0..g.h {
                dx.extend_from_slice(&dxp[(c * g.hp + y + g.pad) * g.wp + g.pad..][..g.w]);
            }
        }
        dx
    };
    Tensor::new(input_shape.to_vec(), data).unwrap()
}

fn conv_param_grad(layer: &Layer, input: &Tensor, grad: &Tensor, g: &ConvGeometry) -> (Tensor, Tensor) {
    let xp = g.padded(input.data());
    let go = grad.data();
    let plane_in = g.hp * g.wp;
    let plane_out = g.oh * g.ow;
    let mut dw = vec![0.0; layer.weight().len()];
    let mut db = vec![0.0; g.out_c];
    for o in 0..g.out_c {
        let go_o = &go[o * plane_out..(o + 1) * plane_out];
        db[o] = go_o.iter().sum();
        for i in 0..g.in_c {
            let inp = &xp[i * plane_in..(i + 1) * plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let mut acc = 0.0;
                    for y in 0..g.oh {
                        let a = &go_o[y * g.ow..][..g.ow];
                        let b = &inp[(y + ky) * g.wp + kx..][..g.ow];
                        acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                    }
                    dw[((o * g.in_c + i) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    (
        Tensor::new(layer.params[0].value.shape().to_vec(), dw).unwrap(),
        Tensor::from_vec(db),
    )
}
