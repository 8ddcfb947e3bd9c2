mod common;

use std::sync::OnceLock;

use common::*;
use robustmap::attack::{adv_accuracy, adv_predictions, pgd, AttackConfig};
use robustmap::model::{tiny_cnn, Layer, LayerKind, Model};
use robustmap::synth::{generate_dataset, Dataset, Split, SynthConfig, CLASS_NAMES};
use robustmap::train::{evaluate, train, TrainConfig};
use robustmap::Tensor;

/// A briefly trained standard model on a small corpus.
fn fixture() -> &'static (Dataset, Model) {
    static FIXTURE: OnceLock<(Dataset, Model)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let ds = generate_dataset(21, 400, &SynthConfig::default()).unwrap();
        let (mean, std) = ds.channel_stats(Split::Train).unwrap();
        let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let init = tiny_cnn(ds.image_shape().unwrap(), mean, std, names, 21).unwrap();
        let model = train(&init, &ds, &TrainConfig::default()).unwrap().model;
        (ds, model)
    })
}

#[test]
fn standard_model_loses_accuracy_under_attack() {
    let (ds, model) = fixture();
    let clean = evaluate(model, ds, Split::Test).unwrap();
    let adv = adv_accuracy(model, ds, Split::Test, &AttackConfig::default()).unwrap();
    assert!(adv < clean, "clean {clean} adv {adv}");
}

#[test]
fn zero_radius_matches_clean_accuracy() {
    let (ds, model) = fixture();
    let cfg = AttackConfig {
        epsilon: 0.0,
        ..AttackConfig::default()
    };
    assert_eq!(adv_accuracy(model, ds, Split::Test, &cfg).unwrap(), evaluate(model, ds, Split::Test).unwrap());
}

#[test]
fn mean_adversarial_accuracy_falls_with_radius() {
    let (ds, model) = fixture();
    let accs: Vec<f64> = [0.0, 1.0, 2.0, 4.0]
        .iter()
        .map(|k| {
            let cfg = AttackConfig {
                epsilon: k / 255.0,
                ..AttackConfig::default()
            };
            adv_accuracy(model, ds, Split::Test, &cfg).unwrap()
        })
        .collect();
    assert!(accs.windows(2).all(|w| w[1] <= w[0]), "{accs:?}");
}

#[test]
fn constant_model_cannot_be_attacked() {
    let (ds, _) = fixture();
    let [c, h, w] = ds.image_shape().unwrap();
    let n = c * h * w;
    let model = linear_model(
        [c, h, w],
        Tensor::zeros(&[2, n]),
        Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
    );
    let cfg = AttackConfig::default();
    assert_eq!(adv_accuracy(&model, ds, Split::Test, &cfg).unwrap(), evaluate(&model, ds, Split::Test).unwrap());
    assert_eq!(evaluate(&model, ds, Split::Test).unwrap(), 0.5);
}

#[test]
fn attacks_are_deterministic_and_contained() {
    let (ds, model) = fixture();
    let cfg = AttackConfig::default();
    assert_eq!(
        adv_predictions(model, ds, Split::Test, &cfg).unwrap(),
        adv_predictions(model, ds, Split::Test, &cfg).unwrap()
    );
    for s in ds.split(Split::Val) {
        let a = pgd(model, &s.image, s.label.index(), &cfg).unwrap();
        let b = pgd(model, &s.image, s.label.index(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.sub(&s.image).unwrap().max_abs() <= cfg.epsilon + 1e-12);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn single_step_on_a_linear_model_follows_the_weight_sign() {
    // Binary linear model: the CE gradient for label y points along w_other - w_y.
    let mut r = rng(4);
    let shape = [1, 4, 4];
    let w = random_tensor(&mut r, &[2, 16], -1.0, 1.0);
    let model = Model::new(
        shape,
        vec![
            Layer::stateless(LayerKind::Flatten),
            Layer::with_params(1, LayerKind::Dense { inputs: 16, outputs: 2 }, vec![w.clone(), Tensor::zeros(&[2])]).unwrap(),
        ],
        names(2),
    )
    .unwrap();
    let x = random_tensor(&mut r, &shape, 0.0, 1.0);
    let cfg = AttackConfig {
        epsilon: 1.0,
        step_size: 0.1,
        iters: 1,
        ..AttackConfig::default()
    };
    for y in 0..2 {
        let adv = pgd(&model, &x, y, &cfg).unwrap();
        for i in 0..16 {
            let dir = w.data()[(1 - y) * 16 + i] - w.data()[y * 16 + i];
            let expected = (x.data()[i] + 0.1 * dir.signum()).clamp(0.0, 1.0);
            assert_eq!(adv.data()[i], expected);
        }
    }
}
