use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use robustmap::attack::{rank_models, reports_to_csv, robustness_report, AttackConfig};
use robustmap::attribution::{self, write_heatmap, Baseline, Method, MethodConfig, OcclusionConfig};
use robustmap::coverage::{coverage_table, AnnotationSet, CoverageSpec, TargetClass};
use robustmap::synth::{self, Dataset, Split, SynthConfig, CLASS_NAMES};
use robustmap::train::{adv_train, evaluate, train, TrainConfig};
use robustmap::weights::{self, Metadata};
use robustmap::{autodiff, model, Model};

use crate::manifest::{AttributionSection, Loaded};
use crate::status::{digest, tracked};
use crate::{Command, Common, Mode};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, n, channels } => synth_cmd(&common, n, channels as usize),
        Command::Train {
            common,
            dataset,
            mode,
            init,
            name,
            epochs,
            epsilon,
        } => train_cmd(&common, dataset.as_deref(), mode, init.as_deref(), name, epochs, epsilon),
        Command::Attack {
            common,
            dataset,
            models,
            epsilon,
            iters,
            random_start,
            split,
        } => attack_cmd(&common, dataset.as_deref(), &models, epsilon, iters, random_start, &split),
        Command::Attribute {
            common,
            dataset,
            model,
            methods,
            images,
            target,
        } => attribute_cmd(&common, dataset.as_deref(), &model, &methods, &images, target),
        Command::Coverage {
            common,
            dataset,
            annotations,
            models,
            methods,
            percentiles,
            split,
            target,
        } => coverage_cmd(
            &common,
            dataset.as_deref(),
            annotations.as_deref(),
            &models,
            &methods,
            percentiles,
            split,
            target,
        ),
    }
}

struct RunContext {
    loaded: Loaded,
    seed: u64,
    out: PathBuf,
}

fn context(common: &Common) -> Result<RunContext> {
    let loaded = Loaded::from_path(common.manifest.as_deref())?;
    let seed = loaded.seed(common.seed);
    let out = loaded.out_dir(common.out.as_deref());
    Ok(RunContext { loaded, seed, out })
}

fn load_dataset(ctx: &RunContext, flag: Option<&Path>) -> Result<Dataset> {
    let path = ctx.loaded.input_path("dataset", flag)?;
    synth::load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).context("serializing metadata")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    if names.is_empty() {
        bail!("no attribution methods given");
    }
    names
        .iter()
        .map(|n| n.parse::<Method>().map_err(anyhow::Error::from))
        .collect()
}

fn parse_target(s: &str) -> Result<TargetClass> {
    match s {
        "fracture" => Ok(TargetClass::Fracture),
        "predicted" => Ok(TargetClass::Predicted),
        other => other
            .parse()
            .map(TargetClass::Fixed)
            .map_err(|_| anyhow::anyhow!("target must be fracture, predicted or a class index, got {other:?}")),
    }
}

fn resolve_class(model: &Model, x: &robustmap::Tensor, target: TargetClass) -> Result<usize> {
    Ok(match target {
        TargetClass::Fracture => model.class_index("fractured").unwrap_or(0),
        TargetClass::Predicted => autodiff::predict(model, x)?.argmax(),
        TargetClass::Fixed(c) => {
            if c >= model.num_classes() {
                bail!("target class {c} out of range for {} classes", model.num_classes());
            }
            c
        }
    })
}

fn method_config(section: &AttributionSection, ds: &Dataset) -> Result<MethodConfig> {
    let baseline = match section.baseline.as_str() {
        "zero" => Baseline::Zero,
        "mean" => Baseline::Image(ds.mean_image(Split::Train)?),
        other => bail!("manifest field `attribution.baseline`: expected zero or mean, got {other:?}"),
    };
    Ok(MethodConfig {
        occlusion: OcclusionConfig {
            patch_h: section.patch[0],
            patch_w: section.patch[1],
            stride_h: section.stride[0],
            stride_w: section.stride[1],
            baseline_value: section.occlusion_baseline,
            per_channel: section.per_channel,
        },
        ig_steps: section.ig_steps,
        ig_baseline: baseline.clone(),
        deeplift_reference: baseline,
    })
}

fn synth_cmd(common: &Common, n: usize, channels: usize) -> Result<()> {
    let ctx = context(common)?;
    let cfg = SynthConfig {
        channels,
        ..SynthConfig::default()
    };
    let config_digest = digest(&cfg)?;
    tracked(&ctx.out, "synth", ctx.seed, &config_digest, || {
        let ds = synth::generate_dataset(ctx.seed, n, &cfg)?;
        let manifest = synth::save_dataset(&ds, &ctx.out)?;
        let annotations = ctx.out.join(synth::ANNOTATION_FILE);
        println!("wrote {} images to {}", ds.samples.len(), ctx.out.display());
        Ok(vec![manifest, annotations])
    })
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    model: &'a str,
    mode: &'a str,
    seed: u64,
    config_digest: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<String>,
    epoch_losses: &'a [f64],
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
}

fn train_cmd(
    common: &Common,
    dataset: Option<&Path>,
    mode: Mode,
    init: Option<&Path>,
    name: Option<String>,
    epochs: Option<usize>,
    epsilon: Option<f64>,
) -> Result<()> {
    let ctx = context(common)?;
    let mut cfg: TrainConfig = ctx.loaded.manifest.train.clone();
    cfg.seed = ctx.seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let mut atk: AttackConfig = ctx.loaded.manifest.attack.clone();
    atk.seed = ctx.seed;
    if let Some(e) = epsilon {
        atk.epsilon = e;
    }
    let name = name.unwrap_or_else(|| mode.name().to_string());
    if name.is_empty() || name.contains(['/', '\\']) {
        bail!("--name must be a plain file stem, got {name:?}");
    }
    let config_digest = digest(&cfg)?;
    tracked(&ctx.out, &format!("train-{name}"), ctx.seed, &config_digest, || {
        let ds = load_dataset(&ctx, dataset)?;
        let start = match init {
            Some(path) => weights::load_model(path).with_context(|| format!("--init {}", path.display()))?,
            None => {
                let shape = ds.image_shape().context("dataset has no images")?;
                let (mean, std) = ds.channel_stats(Split::Train)?;
                let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
                model::tiny_cnn(shape, mean, std, names, ctx.seed)?
            }
        };
        let trained = match mode {
            Mode::Standard => train(&start, &ds, &cfg)?,
            Mode::Adversarial => adv_train(&start, &ds, &atk, &cfg)?,
        };
        // Only the seed and training config go into the weight file, so an
        // adversarial run at epsilon 0 reproduces the standard file byte for byte.
        let mut meta = Metadata::new();
        meta.insert("seed".into(), ctx.seed.to_string());
        meta.insert("config_digest".into(), config_digest.clone());
        let weights_path = ctx.out.join(format!("{name}.mwf"));
        weights::save_model_with_meta(&trained.model, &weights_path, &meta)?;

        let metrics = TrainMetrics {
            model: &name,
            mode: mode.name(),
            seed: ctx.seed,
            config_digest: &config_digest,
            attack_digest: (mode == Mode::Adversarial).then(|| digest(&atk)).transpose()?,
            init: init.map(|p| p.display().to_string()),
            epoch_losses: &trained.epoch_losses,
            train_accuracy: evaluate(&trained.model, &ds, Split::Train)? * 100.0,
            val_accuracy: evaluate(&trained.model, &ds, Split::Val)? * 100.0,
            test_accuracy: evaluate(&trained.model, &ds, Split::Test)? * 100.0,
        };
        let metrics_path = ctx.out.join(format!("{name}.metrics.json"));
        let text = serde_json::to_string_pretty(&metrics)?;
        fs::write(&metrics_path, text + "\n").with_context(|| format!("writing {}", metrics_path.display()))?;
        println!(
            "{name}: final loss {:.4}, test accuracy {:.2}%",
            trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
            metrics.test_accuracy
        );
        Ok(vec![weights_path, metrics_path])
    })
}

fn model_refs(ctx: &RunContext, flags: &[String]) -> Result<Vec<(String, PathBuf)>> {
    let refs: Vec<String> = if flags.is_empty() {
        ctx.loaded.manifest.models.keys().cloned().collect()
    } else {
        flags.to_vec()
    };
    if refs.is_empty() {
        bail!("no models given: pass --models or fill the manifest's [models] table");
    }
    refs.iter().map(|r| ctx.loaded.model(r)).collect()
}

fn load_models(refs: &[(String, PathBuf)]) -> Result<Vec<(String, Model)>> {
    refs.iter()
        .map(|(id, path)| {
            let m = weights::load_model(path).with_context(|| format!("loading model {id} from {}", path.display()))?;
            Ok((id.clone(), m))
        })
        .collect()
}

#[derive(Serialize)]
struct AttackMeta<'a> {
    seed: u64,
    config_digest: &'a str,
    split: &'a str,
    attack: &'a AttackConfig,
    models: BTreeMap<String, String>,
}

fn attack_cmd(
    common: &Common,
    dataset: Option<&Path>,
    models: &[String],
    epsilon: Option<f64>,
    iters: Option<usize>,
    random_start: bool,
    split: &str,
) -> Result<()> {
    let ctx = context(common)?;
    let split = Split::parse(split)?;
    let mut cfg = ctx.loaded.manifest.attack.clone();
    cfg.seed = ctx.seed;
    if let Some(e) = epsilon {
        cfg.epsilon = e;
    }
    if let Some(i) = iters {
        cfg.iters = i;
    }
    cfg.random_start |= random_start;
    cfg.validate()?;
    let config_digest = digest(&cfg)?;
    tracked(&ctx.out, "attack", ctx.seed, &config_digest, || {
        let ds = load_dataset(&ctx, dataset)?;
        let refs = model_refs(&ctx, models)?;
        let loaded = load_models(&refs)?;
        let reports = loaded
            .iter()
            .map(|(id, m)| robustness_report(id, m, &ds, split, &cfg).map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?;
        let ranked = rank_models(reports)?;
        let csv_path = ctx.out.join("robustness.csv");
        let csv = reports_to_csv(&ranked);
        fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
        let meta_path = ctx.out.join("robustness.meta.toml");
        write_toml(
            &meta_path,
            &AttackMeta {
                seed: ctx.seed,
                config_digest: &config_digest,
                split: split.name(),
                attack: &cfg,
                models: refs.iter().map(|(id, p)| (id.clone(), p.display().to_string())).collect(),
            },
        )?;
        print!("{csv}");
        Ok(vec![csv_path, meta_path])
    })
}

fn attribute_cmd(
    common: &Common,
    dataset: Option<&Path>,
    model_ref: &str,
    methods: &[String],
    images: &[String],
    target: Option<String>,
) -> Result<()> {
    let ctx = context(common)?;
    let section = &ctx.loaded.manifest.attribution;
    let methods = parse_methods(if methods.is_empty() { &section.methods } else { methods })?;
    let target = parse_target(target.as_deref().unwrap_or(&section.target))?;
    let config_digest = digest(section)?;
    tracked(&ctx.out, "attribute", ctx.seed, &config_digest, || {
        let ds = load_dataset(&ctx, dataset)?;
        let (model_id, path) = ctx.loaded.model(model_ref)?;
        let model = weights::load_model(&path).with_context(|| format!("loading model {}", path.display()))?;
        let cfg = method_config(section, &ds)?;
        let samples = if images.is_empty() {
            ds.split(Split::Test)
                .filter(|s| ds.annotations.get(&s.id).is_some())
                .collect::<Vec<_>>()
        } else {
            images
                .iter()
                .map(|id| ds.find(id).with_context(|| format!("image {id:?} is not in the dataset")))
                .collect::<Result<Vec<_>>>()?
        };
        let dir = ctx.out.join("heatmaps");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        for sample in samples {
            let class = resolve_class(&model, &sample.image, target)?;
            for &method in &methods {
                let map = attribution::generate(&model, &sample.image, class, method, &cfg)?;
                let file = dir.join(format!("{}_{}_{}_c{}.pgm", sample.id, model_id, method.name(), class));
                write_heatmap(&file, &map, &sample.id, &model_id, ctx.seed)?;
                written.push(file.with_extension("toml"));
                written.push(file);
            }
        }
        println!("wrote {} heatmaps to {}", written.len() / 2, dir.display());
        Ok(written)
    })
}

#[derive(Serialize)]
struct CoverageMeta<'a> {
    seed: u64,
    config_digest: &'a str,
    split: &'a str,
    target: &'a str,
    annotations: String,
    attribution: &'a AttributionSection,
    models: BTreeMap<String, String>,
}

#[allow(clippy::too_many_arguments)]
fn coverage_cmd(
    common: &Common,
    dataset: Option<&Path>,
    annotations: Option<&Path>,
    models: &[String],
    methods: &[String],
    percentiles: Vec<f64>,
    split: Option<String>,
    target: Option<String>,
) -> Result<()> {
    let ctx = context(common)?;
    let section = &ctx.loaded.manifest.coverage;
    let methods = parse_methods(if methods.is_empty() { &section.methods } else { methods })?;
    let percentiles = if percentiles.is_empty() { section.percentiles.clone() } else { percentiles };
    let split = Split::parse(split.as_deref().unwrap_or(&section.split))?;
    let target_name = target.unwrap_or_else(|| ctx.loaded.manifest.attribution.target.clone());
    let target = parse_target(&target_name)?;
    #[derive(Serialize)]
    struct Digested<'a> {
        attribution: &'a AttributionSection,
        coverage: &'a crate::manifest::CoverageSection,
    }
    let config_digest = digest(&Digested {
        attribution: &ctx.loaded.manifest.attribution,
        coverage: section,
    })?;
    tracked(&ctx.out, "coverage", ctx.seed, &config_digest, || {
        let ds = load_dataset(&ctx, dataset)?;
        let ann_path = ctx.loaded.optional_input("annotations", annotations)?;
        let ann = match &ann_path {
            Some(p) => AnnotationSet::load(p).with_context(|| format!("loading annotations {}", p.display()))?,
            None => ds.annotations.clone(),
        };
        let [_, h, w] = ds.image_shape().context("dataset has no images")?;
        ann.validate(h, w)?;
        let refs = model_refs(&ctx, models)?;
        let loaded = load_models(&refs)?;
        let spec = CoverageSpec {
            models: loaded.iter().map(|(id, m)| (id.clone(), m)).collect(),
            methods,
            percentiles,
            split,
            target,
            config: method_config(&ctx.loaded.manifest.attribution, &ds)?,
        };
        let report = coverage_table(&spec, &ds, &ann)?;
        let csv_path = ctx.out.join("coverage.csv");
        let csv = report.to_csv();
        fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
        let meta_path = ctx.out.join("coverage.meta.toml");
        write_toml(
            &meta_path,
            &CoverageMeta {
                seed: ctx.seed,
                config_digest: &config_digest,
                split: split.name(),
                target: &target_name,
                annotations: ann_path
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "dataset".to_string()),
                attribution: &ctx.loaded.manifest.attribution,
                models: refs.iter().map(|(id, p)| (id.clone(), p.display().to_string())).collect(),
            },
        )?;
        print!("{csv}");
        Ok(vec![csv_path, meta_path])
    })
}
