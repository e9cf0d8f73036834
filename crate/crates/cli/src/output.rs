//! Output files and their provenance sidecars.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "ORTHOAUGM_SEED";

/// Where a seed came from, recorded in every sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

/// `--seed`, then `ORTHOAUGM_SEED`, then `default`.
pub fn resolve_seed(flag: Option<u64>, default: u64) -> CliResult<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(|s| (s, SeedSource::Env)).map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok((default, SeedSource::Default)),
    }
}

/// Provenance shared by every file one command writes.
pub struct Provenance {
    command: &'static str,
    flags: Value,
    seeds: Value,
    extra: Value,
}

impl Provenance {
    pub fn new(command: &'static str, flags: &impl Serialize, seeds: Value) -> Self {
        Self {
            command,
            flags: serde_json::to_value(flags).unwrap_or(Value::Null),
            seeds,
            extra: json!({}),
        }
    }

    /// Adds a top-level key to every sidecar, e.g. `sigma_e`.
    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra[key] = value;
        self
    }

    fn sidecar(&self, file: &Path) -> Value {
        let created = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut v = json!({
            "file": file.file_name().map(|n| n.to_string_lossy().into_owned()),
            "tool": "orthoaugm",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "flags": self.flags,
            "seeds": self.seeds,
            "created_unix": created,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut v, &self.extra) {
            dst.extend(src.clone());
        }
        v
    }

    /// Writes `contents` to `path` and the sidecar to `<path>.meta.json`.
    pub fn write(&self, path: &Path, contents: &[u8]) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
        let meta = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.sidecar(path)).expect("sidecar serializes");
        fs::write(&meta, text + "\n").map_err(|e| CliError::io(&meta, e))
    }

    pub fn write_with(
        &self,
        path: &Path,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::io(path, e))?;
        self.write(path, &buf)
    }

    pub fn write_json(&self, path: &Path, value: &impl Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
        self.write(path, (text + "\n").as_bytes())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
