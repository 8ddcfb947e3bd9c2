mod common;

use common::*;
use robustmap::model::{Layer, LayerKind, Model, ModelBuilder, Padding};
use robustmap::synth::{generate_dataset, SynthConfig};
use robustmap::train::{train, TrainConfig};
use robustmap::weights::{self, load_model, save_model, WeightFile};
use robustmap::{Error, Tensor};

fn conv_model(kernel: Vec<f64>) -> Model {
    let layers = vec![
        Layer::with_params(
            0,
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
                padding: Padding::Valid,
            },
            vec![Tensor::new(vec![1, 1, 3, 3], kernel).unwrap(), Tensor::zeros(&[1])],
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
    Model::new([1, 5, 5], layers, names(2)).unwrap()
}

#[test]
fn blob_holds_little_endian_f32_in_row_major_order() {
    let kernel: Vec<f64> = (1..=9).map(|v| v as f64 * 0.25 - 1.0).collect();
    let file = weights::encode(&conv_model(kernel.clone()), &Default::default());
    let mut expected = Vec::new();
    for v in kernel.iter().chain(&[0.0]).chain(&[1.0, -1.0, 0.0, 0.0]) {
        expected.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    assert_eq!(file.blob, expected);

    let bytes = file.to_bytes();
    assert_eq!(&bytes[..4], b"MWF1");
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    assert_eq!(&bytes[8 + len..], expected.as_slice());
}

#[test]
fn save_load_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..20 {
        let model = random_cnn(seed);
        let path = dir.path().join(format!("m{seed}.mwf"));
        save_model(&model, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_model(&model, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap(), "saves differ");
        let back = load_model(&path).unwrap();
        assert_eq!(back, weights::quantize(&model));
        for (a, b) in back.params().zip(model.params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mwf");
    let bytes = weights::encode(&random_cnn(3), &Default::default()).to_bytes();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(Error::BadMagic { .. })));

    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Truncated(_))));

    let mut file = WeightFile::from_bytes(&bytes).unwrap();
    file.manifest = file.manifest.replacen("offset=0 ", "offset=4 ", 1);
    std::fs::write(&path, file.to_bytes()).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Manifest(_))));

    assert!(matches!(load_model(dir.path().join("missing.mwf")), Err(Error::Io { .. })));
}

#[test]
fn head_replacement_on_a_wide_head() {
    let model = ModelBuilder::new([1, 8, 8])
        .conv(3, 3, Padding::Same)
        .relu()
        .global_avg_pool()
        .dense(1000)
        .build(names(1000), 4)
        .unwrap();
    let two = model.replace_head(2, 9).unwrap();
    assert_eq!(two.num_classes(), 2);
    let head = two.head_index();
    for (i, (a, b)) in model.layers().iter().zip(two.layers()).enumerate() {
        if i != head {
            assert_eq!(a, b);
        }
    }
    assert_eq!(two, model.replace_head(2, 9).unwrap());
    assert_ne!(two, model.replace_head(2, 10).unwrap());
    let bound = 1.0 / 3f64.sqrt();
    assert!(two.layers()[head].params.iter().all(|p| p.value.data().iter().all(|v| v.abs() <= bound)));
    assert!(model.replace_head(1, 0).is_err());
}

#[test]
fn frozen_backbone_survives_training() {
    let ds = generate_dataset(5, 40, &SynthConfig::default()).unwrap();
    let model = tiny_model(&ds);
    let frozen = model.freeze_backbone();
    assert_eq!(frozen.freeze_backbone(), frozen);
    let head = frozen.head_index();
    let head_count: usize = frozen.layers()[head].params.iter().map(|p| p.value.len()).sum();
    assert_eq!(frozen.trainable_param_count(), head_count);

    let cfg = TrainConfig {
        epochs: 3,
        head_only: true,
        ..TrainConfig::default()
    };
    let trained = train(&frozen, &ds, &cfg).unwrap().model;
    for (i, (a, b)) in frozen.layers().iter().zip(trained.layers()).enumerate() {
        let same = a.params.iter().zip(&b.params).all(|(p, q)| {
            p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        assert_eq!(same, i != head, "layer {i}");
    }
    // head_only training needs a frozen backbone.
    assert!(train(&model, &ds, &cfg).is_err());
}

fn tiny_model(ds: &robustmap::synth::Dataset) -> Model {
    let (mean, std) = ds.channel_stats(robustmap::synth::Split::Train).unwrap();
    robustmap::model::tiny_cnn(ds.image_shape().unwrap(), mean, std, names(2), 1).unwrap()
}
