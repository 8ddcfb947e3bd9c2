//! Binary PGM (`P5`) and PPM (`P6`) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes a `[channels, height, width]` byte raster. One channel writes
/// `P5`, three channels write interleaved `P6`. `comment` lines are embedded
/// in the header.
pub fn encode(channels: usize, height: usize, width: usize, planar: &[u8], comment: &[String]) -> Vec<u8> {
    assert!(channels == 1 || channels == 3, "PNM holds 1 or 3 channels");
    assert_eq!(planar.len(), channels * height * width);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n").into_bytes();
    for line in comment {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    out.extend_from_slice(format!("{width} {height}\n255\n").as_bytes());
    let plane = height * width;
    if channels == 1 {
        out.extend_from_slice(planar);
    } else {
        for i in 0..plane {
            for c in 0..3 {
                out.push(planar[c * plane + i]);
            }
        }
    }
    out
}

/// Decodes `P5`/`P6` into `(channels, height, width, planar bytes)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number {s:?}")));
    let (width, height, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit images are supported, maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    let plane = width * height;
    let raster = bytes.get(pos..pos + channels * plane).ok_or_else(|| bad("truncated raster"))?;
    let planar = if channels == 1 {
        raster.to_vec()
    } else {
        let mut p = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                p[c * plane + i] = raster[3 * i + c];
            }
        }
        p
    };
    Ok((channels, height, width, planar))
}

/// `round(v * 255)` of values clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &Tensor, comment: &[String]) -> Result<()> {
    let s = image.shape();
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode(s[0], s[1], s[2], &bytes, comment)).map_err(|e| Error::io(path, e))
}

/// Loads an image as `value / 255` in `[channels, height, width]` layout.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (c, h, w, planar) = decode(&bytes, path)?;
    Tensor::new(vec![c, h, w], planar.into_iter().map(|b| b as f64 / 255.0).collect())
}
