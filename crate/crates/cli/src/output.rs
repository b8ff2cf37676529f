use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::settings::Settings;

pub const OUTPUT_DIR_ENV: &str = "LOCPRED_OUTPUT_DIR";

/// Record written next to every run's primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config_file: Option<String>,
    pub config: &'a std::collections::BTreeMap<String, Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub summary: Value,
}

pub struct Ctx {
    pub settings: Settings,
    pub out_dir: PathBuf,
    pub jobs: usize,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Ctx {
    pub fn new(settings: Settings, out_dir: PathBuf, jobs: usize) -> Self {
        Self { settings, out_dir, jobs, inputs: Vec::new(), outputs: Vec::new() }
    }

    /// Relative output paths live under the output directory.
    pub fn output_path(&self, p: &Path) -> Result<PathBuf> {
        let full = if p.is_absolute() { p.to_path_buf() } else { self.out_dir.join(p) };
        if let Some(parent) = full.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(full)
    }

    pub fn open_input(&mut self, p: &Path) -> Result<BufReader<File>> {
        let f = File::open(p).map_err(|e| CliError::io(p, e))?;
        self.inputs.push(p.display().to_string());
        Ok(BufReader::new(f))
    }

    pub fn create(&mut self, p: &Path) -> Result<BufWriter<File>> {
        let f = File::create(p).map_err(|e| CliError::io(p, e))?;
        self.outputs.push(p.display().to_string());
        Ok(BufWriter::new(f))
    }

    pub fn write_text(&mut self, p: &Path, text: &str) -> Result<()> {
        let mut w = self.create(p)?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(p, e))
    }

    pub fn write_json<T: Serialize>(&mut self, p: &Path, v: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(v).map_err(|e| CliError::invalid(e.to_string()))?;
        self.write_text(p, &(text + "\n"))
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(&mut self, subcommand: &str, primary: &Path, seed: Option<u64>, summary: Value) -> Result<()> {
        for k in self.settings.unused() {
            log::warn!("config key '{k}' is not used by {subcommand}");
        }
        let config = std::mem::take(&mut self.settings.resolved);
        let manifest = RunManifest {
            tool: "locpred",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_file: self.settings.path.as_ref().map(|p| p.display().to_string()),
            config: &config,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            seed,
            jobs: self.jobs,
            summary,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::invalid(e.to_string()))? + "\n";
        let path = sidecar(primary, "manifest.json");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// `model.ckpt` + `history.csv` → `model.ckpt.history.csv`.
pub fn sidecar(primary: &Path, suffix: &str) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    primary.with_file_name(name)
}

pub fn io_err(p: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(p, e)
}
