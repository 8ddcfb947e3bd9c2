//! The run manifest: a TOML file naming the dataset, model files and the
//! configuration of every stage. Relative paths resolve against the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use robustmap::attack::AttackConfig;
use robustmap::train::TrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Model id to weight file.
    #[serde(default)]
    pub models: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub attribution: AttributionSection,
    #[serde(default)]
    pub coverage: CoverageSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub methods: Vec<String>,
    /// Occlusion patch as `[height, width]`.
    pub patch: [usize; 2],
    pub stride: [usize; 2],
    pub occlusion_baseline: f64,
    pub per_channel: bool,
    pub ig_steps: usize,
    /// `zero` or `mean` (train-split mean image), for IG and DeepLIFT.
    pub baseline: String,
    /// `fracture`, `predicted` or a class index.
    pub target: String,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            methods: vec!["saliency".into(), "occlusion".into(), "deeplift".into()],
            patch: [8, 8],
            stride: [4, 4],
            occlusion_baseline: 0.0,
            per_channel: false,
            ig_steps: 20,
            baseline: "zero".into(),
            target: "fracture".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSection {
    pub percentiles: Vec<f64>,
    pub methods: Vec<String>,
    pub split: String,
}

impl Default for CoverageSection {
    fn default() -> Self {
        CoverageSection {
            percentiles: vec![15.0, 75.0, 85.0, 95.0],
            methods: vec!["saliency".into(), "occlusion".into(), "deeplift".into()],
            split: "test".into(),
        }
    }
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug, Default)]
pub struct Loaded {
    pub manifest: RunManifest,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_path(path: Option<&Path>) -> Result<Loaded> {
        let Some(path) = path else {
            return Ok(Loaded {
                manifest: RunManifest::default(),
                base: PathBuf::from("."),
            });
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: RunManifest =
            toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { manifest, base })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// The command-line value if given, else the manifest field resolved
    /// against the manifest directory. The path must exist.
    pub fn input_path(&self, field: &str, flag: Option<&Path>) -> Result<PathBuf> {
        let (path, origin) = match (flag, self.field(field)) {
            (Some(p), _) => (p.to_path_buf(), format!("--{field}")),
            (None, Some(p)) => (self.resolve(p), format!("manifest field `{field}`")),
            (None, None) => bail!("no {field} given: pass --{field} or set `{field}` in the manifest"),
        };
        if !path.exists() {
            bail!("{origin}: {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn optional_input(&self, field: &str, flag: Option<&Path>) -> Result<Option<PathBuf>> {
        if flag.is_none() && self.field(field).is_none() {
            return Ok(None);
        }
        self.input_path(field, flag).map(Some)
    }

    fn field(&self, field: &str) -> Option<&PathBuf> {
        match field {
            "dataset" => self.manifest.dataset.as_ref(),
            "annotations" => self.manifest.annotations.as_ref(),
            _ => None,
        }
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.manifest.out) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => PathBuf::from("."),
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.manifest.seed).unwrap_or(0)
    }

    /// Resolves a model reference: a key of the manifest's `[models]` table
    /// or a path to a weight file. Returns `(id, path)`.
    pub fn model(&self, reference: &str) -> Result<(String, PathBuf)> {
        let (id, path, origin) = match self.manifest.models.get(reference) {
            Some(p) => (reference.to_string(), self.resolve(p), format!("manifest field `models.{reference}`")),
            None => {
                let path = PathBuf::from(reference);
                let id = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| reference.to_string());
                (id, path, format!("model {reference:?}"))
            }
        };
        if !path.exists() {
            bail!("{origin}: {} does not exist", path.display());
        }
        Ok((id, path))
    }
}
