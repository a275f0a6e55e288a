use std::fs;
use std::path::{Path, PathBuf};

use retinex_mef::Result;
use serde::Serialize;
use serde_json::Value;

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub checkpoint_sha256: Option<String>,
    pub config: Value,
    pub outputs: Vec<String>,
}

impl<'a> RunManifest<'a> {
    pub fn new(command: &'a str, config: Value) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            args: std::env::args().skip(1).collect(),
            seed: None,
            checkpoint_sha256: None,
            config,
            outputs: Vec::new(),
        }
    }

    /// `dir/run_manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
    pub fn write(&self, out: &Path, out_is_dir: bool) -> Result<PathBuf> {
        let path = if out_is_dir {
            out.join("run_manifest.json")
        } else {
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            out.with_file_name(name)
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
