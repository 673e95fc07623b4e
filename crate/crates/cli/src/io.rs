//! File IO: checkpoints, reports, logs, and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rmapf_core::eval::{EvalCell, EvalReport, PgdRestartCell};
use rmapf_core::net::{self, NetParams};

use crate::{AppError, AppResult};

pub fn save_checkpoint(params: &NetParams, path: &Path) -> AppResult<()> {
    let bytes = net::encode_checkpoint(params);
    fs::write(path, bytes)
        .map_err(|e| AppError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> AppResult<NetParams> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    net::decode_checkpoint(&bytes)
        .map_err(|e| AppError::runtime(format!("bad checkpoint {}: {e}", path.display())))
}

/// FNV-1a hash of a file's bytes, as stored in manifests.
pub fn file_hash(path: &Path) -> AppResult<String> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::runtime(format!("cannot hash {}: {e}", path.display())))?;
    Ok(format!("{:016x}", net::fnv1a(&bytes)))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> AppResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| AppError::runtime(format!("serialization failed: {e}")))?;
    fs::write(path, text)
        .map_err(|e| AppError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| AppError::runtime(format!("malformed JSON in {}: {e}", path.display())))
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    file: fs::File,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> AppResult<JsonlWriter> {
        let file = fs::File::create(path)
            .map_err(|e| AppError::runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(JsonlWriter { file })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) {
        use std::io::Write;
        let line = serde_json::to_string(value).expect("log line serializes");
        let _ = writeln!(self.file, "{line}");
    }
}

/// One row per attack cell: label, kind, parameter, mean, episodes.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("cell,attack,parameter,mean,episodes\n");
    push_cell_row(&mut out, "clean", &report.clean);
    for (i, cell) in report.cells.iter().enumerate() {
        push_cell_row(&mut out, &format!("{i}"), cell);
    }
    out
}

fn push_cell_row(out: &mut String, idx: &str, cell: &EvalCell) {
    use std::fmt::Write;
    let param = match cell.spec.kind {
        rmapf_core::attacks::AttackKind::None => 0.0,
        rmapf_core::attacks::AttackKind::Fgsm | rmapf_core::attacks::AttackKind::Pgd => {
            cell.spec.eps
        }
        rmapf_core::attacks::AttackKind::Gaussian => cell.spec.sigma,
        _ => cell.spec.rate,
    };
    let eps_list = cell
        .episode_success
        .iter()
        .map(|s| format!("{s:.4}"))
        .collect::<Vec<_>>()
        .join(";");
    let _ = writeln!(out, "{idx},{},{param},{:.6},{eps_list}", cell.label, cell.mean);
}

pub fn pgd5_csv(cells: &[PgdRestartCell]) -> String {
    use std::fmt::Write;
    let mut out = String::from("eps,worst,restart_means\n");
    for c in cells {
        let means =
            c.restart_means.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(";");
        let _ = writeln!(out, "{},{:.6},{means}", c.eps, c.worst);
    }
    out
}

/// Reproducibility manifest written by every run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub mode: String,
    pub tool_version: String,
    pub seed: u64,
    pub jobs: usize,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: serde_json::Map<String, serde_json::Value>,
    pub outputs: serde_json::Map<String, serde_json::Value>,
    pub wall_time_secs: f64,
}

impl Manifest {
    pub fn new(mode: &str, config: &crate::config::RunConfig, seed: u64, jobs: usize) -> Manifest {
        Manifest {
            mode: mode.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            jobs,
            config_hash: config.hash(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: serde_json::Map::new(),
            outputs: serde_json::Map::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> AppResult<()> {
        self.inputs.insert(name.to_string(), serde_json::json!(file_hash(path)?));
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, path: &Path) -> AppResult<()> {
        self.outputs.insert(name.to_string(), serde_json::json!(file_hash(path)?));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> AppResult<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(self, &path)?;
        Ok(path)
    }
}

pub fn ensure_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| AppError::runtime(format!("cannot create {}: {e}", path.display())))
}
