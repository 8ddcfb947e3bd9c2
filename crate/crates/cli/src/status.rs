//! Per-command run status and config digests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Short SHA-256 of a configuration's canonical TOML rendering.
pub fn digest<T: Serialize>(config: &T) -> Result<String> {
    let text = toml::to_string(config).context("serializing configuration")?;
    let hash = Sha256::digest(text.as_bytes());
    Ok(hash.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct Status<'a> {
    command: &'a str,
    status: &'a str,
    seed: u64,
    config_digest: &'a str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Writes `<out>/<command>.status.toml` as `running`, runs `body`, then
/// records `ok` with the produced files or `failed` with the error.
pub fn tracked<F>(out: &Path, command: &str, seed: u64, digest: &str, body: F) -> Result<()>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let path = out.join(format!("{command}.status.toml"));
    let write = |status: &Status| -> Result<()> {
        let text = toml::to_string(status)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    let mut status = Status {
        command,
        status: "running",
        seed,
        config_digest: digest,
        outputs: Vec::new(),
        error: None,
    };
    write(&status)?;
    match body() {
        Ok(outputs) => {
            status.status = "ok";
            status.outputs = outputs
                .iter()
                .map(|p| p.strip_prefix(out).unwrap_or(p).display().to_string())
                .collect();
            write(&status)
        }
        Err(e) => {
            status.status = "failed";
            status.error = Some(format!("{e:#}"));
            write(&status)?;
            Err(e)
        }
    }
}
