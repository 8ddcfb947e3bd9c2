mod common;

use rand::Rng;

use common::*;
use robustmap::attribution::{
    channel_max_abs, deeplift, deeplift_contributions, integrated_gradients, integrated_gradients_signed, normalize,
    occlusion, occlusion_grid, occlusion_linearized, saliency, OcclusionConfig, PathConfig,
};
use robustmap::autodiff::{forward, numeric_gradient};
use robustmap::model::{Layer, LayerKind, Model, Padding};
use robustmap::Tensor;

fn occ(patch: usize, stride: usize, baseline: f64) -> OcclusionConfig {
    OcclusionConfig {
        patch_h: patch,
        patch_w: patch,
        stride_h: stride,
        stride_w: stride,
        baseline_value: baseline,
        per_channel: false,
    }
}

fn constant_model(shape: [usize; 3]) -> Model {
    let n = shape.iter().product();
    linear_model(shape, Tensor::zeros(&[2, n]), Tensor::new(vec![2], vec![0.5, -0.5]).unwrap())
}

#[test]
fn saliency_of_a_linear_model_is_the_absolute_weight() {
    let (model, x) = dyadic_linear(1, [1, 4, 5], 2);
    let w = model.layers()[1].params[0].value.data();
    let map = saliency(&model, &x, 1).unwrap();
    assert_eq!((map.height, map.width), (4, 5));
    let expected: Vec<f64> = w[20..].iter().map(|v| v.abs()).collect();
    assert_eq!(map.values, expected);
}

#[test]
fn saliency_matches_numeric_gradient_away_from_kinks() {
    let mut r = rng(2);
    let mut checked = 0;
    for seed in 0..60 {
        let model = random_cnn(4000 + seed);
        let x = random_tensor(&mut r, &model.input_shape(), 0.0, 1.0);
        if forward(&model, &x).unwrap().1.kink_margin(&model) < 1e-4 {
            continue;
        }
        let map = saliency(&model, &x, 0).unwrap();
        let oracle = channel_max_abs(&numeric_gradient(&model, &x, 0, 1e-5).unwrap());
        for (a, b) in map.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(map.values.iter().all(|v| *v >= 0.0));
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn occlusion_of_constant_and_linear_models() {
    let shape = [2, 6, 6];
    let x = random_tensor(&mut rng(3), &shape, 0.0, 1.0);
    let constant = constant_model(shape);
    for cfg in [occ(2, 2, 0.0), occ(3, 1, 0.5)] {
        assert!(occlusion(&constant, &x, 0, &cfg).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(occlusion_linearized(&constant, &x, 0, &cfg).unwrap().values.iter().all(|v| *v == 0.0));
    }

    // One patch covering the whole image with baseline 0 scores w . x.
    let (lin, x) = dyadic_linear(4, [1, 6, 6], 2);
    let w = lin.layers()[1].params[0].value.data();
    let dot: f64 = w[..36].iter().zip(x.data()).map(|(a, b)| a * b).sum();
    let grid = occlusion_grid(&lin, &x, 0, &occ(6, 1, 0.0)).unwrap();
    assert_eq!(grid.scores, vec![dot]);
    let map = occlusion(&lin, &x, 0, &occ(6, 1, 0.0)).unwrap();
    assert!(map.values.iter().all(|v| *v == dot));
}

#[test]
fn occlusion_on_a_fixed_conv_model_matches_hand_computation() {
    // One 2x2 conv of ones feeding global average pooling: f(x) is a
    // weighted sum of pixels with weights counting covering windows / 9.
    let layers = vec![
        Layer::with_params(
            0,
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                padding: Padding::Valid,
            },
            vec![Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1])],
        )
        .unwrap(),
        Layer::stateless(LayerKind::GlobalAvgPool),
        Layer::with_params(
            2,
            LayerKind::Dense { inputs: 1, outputs: 2 },
            vec![Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(), Tensor::zeros(&[2])],
        )
        .unwrap(),
    ];
    let model = Model::new([1, 4, 4], layers, names(2)).unwrap();
    let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
    // Windows covering pixel (r, c) of a 4x4 image under a 2x2 valid conv.
    let cover = |i: usize| -> f64 { if i == 0 || i == 3 { 1.0 } else { 2.0 } };
    let mut expected = Vec::new();
    for top in [0, 2] {
        for left in [0, 2] {
            let mut drop = 0.0;
            for r in top..top + 2 {
                for c in left..left + 2 {
                    drop += cover(r) * cover(c) * x.data()[r * 4 + c] / 9.0;
                }
            }
            expected.push(drop);
        }
    }
    let grid = occlusion_grid(&model, &x, 0, &occ(2, 2, 0.0)).unwrap();
    assert_eq!(grid.rows, vec![0, 2]);
    assert_eq!(grid.cols, vec![0, 2]);
    for (a, b) in grid.scores.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn linearized_occlusion_is_first_order_accurate() {
    let mut r = rng(5);
    let mut checked = 0;
    for seed in 0..2000 {
        if checked == 10 {
            break;
        }
        let model = random_cnn(5000 + seed);
        if model.input_shape()[0] != 1 {
            continue;
        }
        let x = random_tensor(&mut r, &model.input_shape(), 0.2, 0.8);
        if forward(&model, &x).unwrap().1.kink_margin(&model) < 1e-2 {
            continue;
        }
        let [_, h, w] = model.input_shape();
        let (py, px) = (r.gen_range(0..h), r.gen_range(0..w));
        // A 1x1 patch at one pixel, baseline 1e-3 below it.
        let cfg = occ(1, 1, x.data()[py * w + px] - 1e-3);
        let exact = occlusion_grid(&model, &x, 0, &cfg).unwrap();
        let approx = robustmap::attribution::occlusion_linearized_grid(&model, &x, 0, &cfg).unwrap();
        let k = py * w + px;
        assert!((exact.scores[k] - approx.scores[k]).abs() < 1e-6);
        checked += 1;
    }
    assert_eq!(checked, 10);
}

#[test]
fn per_channel_occlusion_sums_channel_scores() {
    let (lin, x) = dyadic_linear(8, [3, 4, 4], 2);
    let mut cfg = occ(2, 2, 0.25);
    cfg.per_channel = true;
    let split = occlusion_grid(&lin, &x, 1, &cfg).unwrap();
    cfg.per_channel = false;
    let joint = occlusion_grid(&lin, &x, 1, &cfg).unwrap();
    // Linear models make the two readings coincide.
    assert_eq!(split.scores, joint.scores);
}

#[test]
fn occlusion_rejects_bad_configs() {
    let model = constant_model([1, 4, 4]);
    let x = Tensor::zeros(&[1, 4, 4]);
    assert!(occlusion(&model, &x, 0, &occ(5, 1, 0.0)).is_err());
    assert!(occlusion(&model, &x, 0, &occ(2, 0, 0.0)).is_err());
    assert!(occlusion(&model, &x, 0, &occ(2, 1, 1.5)).is_err());
}

#[test]
fn deeplift_linear_rule_and_zero_delta() {
    let (lin, x) = dyadic_linear(6, [2, 3, 3], 2);
    let reference = random_tensor(&mut rng(6), &[2, 3, 3], 0.0, 1.0);
    let contrib = deeplift_contributions(&lin, &x, 1, &reference).unwrap();
    let w = &lin.layers()[1].params[0].value.data()[18..];
    for (i, wi) in w.iter().enumerate() {
        let expected = wi * (x.data()[i] - reference.data()[i]);
        assert!((contrib.data()[i] - expected).abs() < 1e-15);
    }
    let model = random_cnn(77);
    let x = random_tensor(&mut rng(7), &model.input_shape(), 0.0, 1.0);
    let map = deeplift(&model, &x, 0, &x).unwrap();
    assert!(map.values.iter().all(|v| *v == 0.0));
    assert!(deeplift(&model, &x, 0, &Tensor::zeros(&[1, 2, 2])).is_err());
}

#[test]
fn integrated_gradients_axioms() {
    // Linear: exact for every step count.
    let (lin, x) = dyadic_linear(9, [1, 4, 4], 2);
    let base = Tensor::full(&[1, 4, 4], 0.5);
    let w = &lin.layers()[1].params[0].value.data()[..16];
    for n_steps in [1, 3, 20] {
        let ig = integrated_gradients_signed(&lin, &x, 0, &PathConfig { baseline: base.clone(), n_steps }).unwrap();
        for (i, wi) in w.iter().enumerate() {
            assert!((ig.data()[i] - wi * (x.data()[i] - 0.5)).abs() < 1e-15);
        }
    }
    // An ignored input coordinate gets no attribution.
    let mut weights = w.to_vec();
    weights[5] = 0.0;
    weights.extend(vec![0.25; 16]);
    weights[16 + 5] = 0.0;
    let lin = linear_model([1, 4, 4], Tensor::new(vec![2, 16], weights).unwrap(), Tensor::zeros(&[2]));
    let ig = integrated_gradients(&lin, &x, 0, &PathConfig { baseline: Tensor::zeros(&[1, 4, 4]), n_steps: 20 }).unwrap();
    assert_eq!(ig.values[5], 0.0);

    // Baseline at the input gives the zero map; zero steps are rejected.
    let model = random_cnn(31);
    let x = random_tensor(&mut rng(8), &model.input_shape(), 0.0, 1.0);
    let at_input = PathConfig { baseline: x.clone(), n_steps: 20 };
    assert!(integrated_gradients(&model, &x, 0, &at_input).unwrap().values.iter().all(|v| *v == 0.0));
    assert!(integrated_gradients(&model, &x, 0, &PathConfig { baseline: x.clone(), n_steps: 0 }).is_err());
}

#[test]
fn integrated_gradients_residual_constant() {
    // Report C = max_n residual * n over a few random CNNs.
    let mut r = rng(10);
    let mut c_max = 0.0f64;
    for seed in 0..10 {
        let model = random_cnn(6000 + seed);
        let x = random_tensor(&mut r, &model.input_shape(), 0.0, 1.0);
        let zero = Tensor::zeros(&model.input_shape());
        let delta = logit(&model, &x, 0) - logit(&model, &zero, 0);
        for n in [16, 64, 256] {
            let ig = integrated_gradients_signed(&model, &x, 0, &PathConfig { baseline: zero.clone(), n_steps: n }).unwrap();
            let residual = (ig.sum() - delta).abs();
            c_max = c_max.max(residual * n as f64);
        }
    }
    println!("measured IG residual constant C = {c_max:.3e}");
    assert!(c_max.is_finite());
}

#[test]
fn normalization_is_idempotent_and_monotone() {
    let model = random_cnn(12);
    let x = random_tensor(&mut rng(12), &model.input_shape(), 0.0, 1.0);
    let map = occlusion(&model, &x, 0, &occ(2, 1, 0.0)).unwrap();
    let once = normalize(&map);
    assert!(!once.degenerate);
    let twice = normalize(&once.map);
    for (a, b) in once.map.values.iter().zip(&twice.map.values) {
        assert!((a - b).abs() < 1e-15);
    }
    for i in 0..map.values.len() {
        for j in 0..map.values.len() {
            if map.values[i] < map.values[j] {
                assert!(once.map.values[i] <= once.map.values[j]);
            }
        }
    }
}
