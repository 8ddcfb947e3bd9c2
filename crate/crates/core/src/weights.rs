//! The `MWF1` weight file.
//!
//! Layout:
//!
//! ```text
//! "MWF1"                    4 bytes
//! manifest length           u32, little-endian
//! manifest                  UTF-8 text, one record per line
//! blob                      little-endian f32 values, row-major per tensor, in manifest order
//! ```
//!
//! Manifest records:
//!
//! ```text
//! input <channels> <height> <width>
//! classes <name> <name> ...
//! layer standardize mean=<v,v,..> std=<v,v,..>
//! layer conv2d in=<n> out=<n> kernel=<k> padding=<valid|same>
//! layer relu | layer maxpool2 | layer gap | layer flatten
//! layer dense in=<n> out=<n>
//! param <name> shape=<d>x<d>.. offset=<byte> bytes=<len> trainable=<0|1>
//! meta <key>=<value>
//! ```
//!
//! Parameter records must follow the layer order. Their byte ranges tile the
//! blob exactly. Values are stored as `f32` and widened to `f64` on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, Model, Padding};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MWF1";

/// Free-form provenance entries written as `meta` records.
pub type Metadata = BTreeMap<String, String>;

/// A decoded but not yet validated weight file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub manifest: String,
    pub blob: Vec<u8>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(self.manifest.as_bytes());
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated(format!("{} bytes, no header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic { found });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated("missing manifest length".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Truncated(format!("manifest of {len} bytes exceeds file")))?;
        let manifest = std::str::from_utf8(&bytes[8..end])
            .map_err(|e| Error::Manifest(format!("manifest is not UTF-8: {e}")))?
            .to_string();
        Ok(WeightFile {
            manifest,
            blob: bytes[end..].to_vec(),
        })
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

pub fn encode(model: &Model, meta: &Metadata) -> WeightFile {
    let mut manifest = String::new();
    let [c, h, w] = model.input_shape();
    manifest.push_str(&format!("input {c} {h} {w}\n"));
    manifest.push_str(&format!("classes {}\n", model.class_names().join(" ")));
    for layer in model.layers() {
        let line = match &layer.kind {
            LayerKind::Standardize { mean, std } => {
                format!("layer standardize mean={} std={}", join(mean), join(std))
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => format!(
                "layer conv2d in={in_channels} out={out_channels} kernel={kernel} padding={}",
                padding.as_str()
            ),
            LayerKind::Dense { inputs, outputs } => format!("layer dense in={inputs} out={outputs}"),
            other => format!("layer {}", other.name()),
        };
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    for p in model.params() {
        let shape = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let bytes = p.value.len() * 4;
        manifest.push_str(&format!(
            "param {} shape={shape} offset={} bytes={bytes} trainable={}\n",
            p.name,
            blob.len(),
            u8::from(p.trainable)
        ));
        for v in p.value.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    for (k, v) in meta {
        manifest.push_str(&format!("meta {k}={v}\n"));
    }
    WeightFile { manifest, blob }
}

struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
    trainable: bool,
}

fn fields<'a>(line: &'a str, tokens: &[&'a str]) -> Result<BTreeMap<&'a str, &'a str>> {
    tokens
        .iter()
        .map(|t| {
            t.split_once('=')
                .ok_or_else(|| Error::Manifest(format!("expected key=value in {line:?}, got {t:?}")))
        })
        .collect()
}

fn field<'a>(map: &BTreeMap<&'a str, &'a str>, key: &str, line: &str) -> Result<&'a str> {
    map.get(key)
        .copied()
        .ok_or_else(|| Error::Manifest(format!("missing {key} in {line:?}")))
}

fn parse_num<T: std::str::FromStr>(s: &str, line: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Manifest(format!("bad number {s:?} in {line:?}")))
}

fn parse_list(s: &str, line: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| parse_num(v, line)).collect()
}

pub fn decode(file: &WeightFile) -> Result<(Model, Metadata)> {
    let mut input = None;
    let mut classes = None;
    let mut kinds = Vec::new();
    let mut records = Vec::new();
    let mut meta = Metadata::new();
    for line in file.manifest.lines().filter(|l| !l.trim().is_empty()) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "input" => {
                let dims = tokens[1..]
                    .iter()
                    .map(|t| parse_num::<usize>(t, line))
                    .collect::<Result<Vec<_>>>()?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| Error::Manifest(format!("input needs three dimensions: {line:?}")))?;
                input = Some(dims);
            }
            "classes" => classes = Some(tokens[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>()),
            "layer" => {
                let kind = *tokens
                    .get(1)
                    .ok_or_else(|| Error::Manifest(format!("layer without kind: {line:?}")))?;
                let f = fields(line, &tokens[2..])?;
                let kind = match kind {
                    "standardize" => LayerKind::Standardize {
                        mean: parse_list(field(&f, "mean", line)?, line)?,
                        std: parse_list(field(&f, "std", line)?, line)?,
                    },
                    "conv2d" => LayerKind::Conv2d {
                        in_channels: parse_num(field(&f, "in", line)?, line)?,
                        out_channels: parse_num(field(&f, "out", line)?, line)?,
                        kernel: parse_num(field(&f, "kernel", line)?, line)?,
                        padding: match field(&f, "padding", line)? {
                            "valid" => Padding::Valid,
                            "same" => Padding::Same,
                            other => return Err(Error::Manifest(format!("unknown padding {other:?}"))),
                        },
                    },
                    "relu" => LayerKind::Relu,
                    "maxpool2" => LayerKind::MaxPool2,
                    "gap" => LayerKind::GlobalAvgPool,
                    "flatten" => LayerKind::Flatten,
                    "dense" => LayerKind::Dense {
                        inputs: parse_num(field(&f, "in", line)?, line)?,
                        outputs: parse_num(field(&f, "out", line)?, line)?,
                    },
                    other => return Err(Error::Manifest(format!("unknown layer kind {other:?}"))),
                };
                kinds.push(kind);
            }
            "param" => {
                let name = tokens
                    .get(1)
                    .ok_or_else(|| Error::Manifest(format!("param without name: {line:?}")))?
                    .to_string();
                let f = fields(line, &tokens[2..])?;
                records.push(ParamRecord {
                    name,
                    shape: field(&f, "shape", line)?
                        .split('x')
                        .map(|d| parse_num(d, line))
                        .collect::<Result<_>>()?,
                    offset: parse_num(field(&f, "offset", line)?, line)?,
                    bytes: parse_num(field(&f, "bytes", line)?, line)?,
                    trainable: match field(&f, "trainable", line)? {
                        "1" => true,
                        "0" => false,
                        other => return Err(Error::Manifest(format!("bad trainable flag {other:?}"))),
                    },
                });
            }
            "meta" => {
                let rest = line.trim_start()["meta".len()..].trim();
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Manifest(format!("expected key=value in {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            other => return Err(Error::Manifest(format!("unknown record {other:?}"))),
        }
    }
    let input = input.ok_or_else(|| Error::Manifest("missing input record".into()))?;
    let classes = classes.ok_or_else(|| Error::Manifest("missing classes record".into()))?;

    // Byte ranges must tile the blob with no gaps or overlaps.
    let mut cursor = 0usize;
    for r in &records {
        let numel: usize = r.shape.iter().product();
        if r.offset != cursor {
            return Err(Error::Manifest(format!(
                "{} starts at byte {} but the previous tensor ends at {cursor}",
                r.name, r.offset
            )));
        }
        if r.bytes != numel * 4 {
            return Err(Error::Manifest(format!(
                "{} declares {} bytes for {numel} values",
                r.name, r.bytes
            )));
        }
        cursor += r.bytes;
    }
    if file.blob.len() < cursor {
        return Err(Error::Truncated(format!(
            "blob has {} bytes, manifest describes {cursor}",
            file.blob.len()
        )));
    }
    if file.blob.len() > cursor {
        return Err(Error::Manifest(format!(
            "blob has {} trailing bytes not described by the manifest",
            file.blob.len() - cursor
        )));
    }

    let mut records = records.into_iter();
    let mut layers = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.into_iter().enumerate() {
        let mut params = Vec::new();
        for (suffix, shape) in kind.param_shapes() {
            let expected = format!("layer{i}.{suffix}");
            let r = records
                .next()
                .ok_or_else(|| Error::Manifest(format!("missing parameter {expected}")))?;
            if r.name != expected || r.shape != shape {
                return Err(Error::Manifest(format!(
                    "expected {expected} with shape {shape:?}, found {} with shape {:?}",
                    r.name, r.shape
                )));
            }
            let values = file.blob[r.offset..r.offset + r.bytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            params.push(crate::model::Param {
                name: r.name,
                value: Tensor::new(r.shape, values)?,
                trainable: r.trainable,
            });
        }
        layers.push(Layer { kind, params });
    }
    if let Some(extra) = records.next() {
        return Err(Error::Manifest(format!("parameter {} belongs to no layer", extra.name)));
    }
    let model = Model::new(input, layers, classes).map_err(|e| Error::Manifest(e.to_string()))?;
    Ok((model, meta))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    save_model_with_meta(model, path, &Metadata::new())
}

pub fn save_model_with_meta(model: &Model, path: impl AsRef<Path>, meta: &Metadata) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model, meta).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(load_model_with_meta(path)?.0)
}

pub fn load_model_with_meta(path: impl AsRef<Path>) -> Result<(Model, Metadata)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&WeightFile::from_bytes(&bytes)?)
}

/// Rounds every parameter to the nearest `f32`, the precision kept on disk.
pub fn quantize(model: &Model) -> Model {
    let mut out = model.clone();
    for layer in out.layers_mut() {
        for p in &mut layer.params {
            p.value = p.value.map(|v| v as f32 as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_cnn, ModelBuilder};

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn model() -> Model {
        tiny_cnn([1, 48, 48], vec![0.25], vec![0.5], names(2), 9).unwrap()
    }

    #[test]
    fn round_trip_quantizes_parameters_only() {
        let m = model();
        let mut meta = Metadata::new();
        meta.insert("seed".into(), "9".into());
        let (back, meta_back) = decode(&WeightFile::from_bytes(&encode(&m, &meta).to_bytes()).unwrap()).unwrap();
        assert_eq!(back, quantize(&m));
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = model().freeze_backbone();
        assert_eq!(encode(&m, &Metadata::new()).to_bytes(), encode(&m, &Metadata::new()).to_bytes());
    }

    #[test]
    fn parameter_free_backbone() {
        let m = ModelBuilder::new([2, 4, 4])
            .max_pool()
            .global_avg_pool()
            .dense(2)
            .build(names(2), 1)
            .unwrap();
        let back = decode(&encode(&m, &Metadata::new())).unwrap().0;
        assert_eq!(back, quantize(&m));
    }

    #[test]
    fn distinct_diagnostics() {
        let mut bytes = encode(&model(), &Metadata::new()).to_bytes();
        let good = bytes.clone();

        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::BadMagic { .. })));

        let short = &good[..good.len() - 4];
        let err = decode(&WeightFile::from_bytes(short).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");

        let mut wf = WeightFile::from_bytes(&good).unwrap();
        wf.manifest = wf.manifest.replacen("offset=0 ", "offset=4 ", 1);
        let err = decode(&wf).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }
}
