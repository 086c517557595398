//! On-disk layout of a results directory:
//!
//! ```text
//! manifest.json          resolved config, hash, file list
//! records_T<T>.jsonl     one JSON object per replicate at horizon T
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use adaptive_lqr::{ExperimentConfig, RunRecord};
use serde::{Deserialize, Serialize};

use crate::error::{exit, CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub records: Vec<String>,
    pub created_at: String,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub config: ExperimentConfig,
}

pub fn record_file_name(horizon: usize) -> String {
    format!("records_T{horizon}.jsonl")
}

/// Writes one JSONL file per horizon; records must already be sorted.
pub fn write_records(dir: &Path, records: &[RunRecord]) -> CliResult<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io("creating output directory", e))?;
    let mut names = Vec::new();
    let mut horizons: Vec<usize> = records.iter().map(|r| r.horizon).collect();
    horizons.dedup();
    for horizon in horizons {
        let name = record_file_name(horizon);
        let mut buf = Vec::new();
        for rec in records.iter().filter(|r| r.horizon == horizon) {
            serde_json::to_writer(&mut buf, rec).expect("records serialize");
            buf.push(b'\n');
        }
        fs::write(dir.join(&name), buf).map_err(|e| CliError::io(&name, e))?;
        names.push(name);
    }
    Ok(names)
}

pub fn write_manifest(dir: &Path, manifest: &ResultsManifest) -> CliResult<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| CliError::io("writing manifest", e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> CliResult<ResultsManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::new(
            exit::INSUFFICIENT_DATA,
            format!("no manifest in {}: {e}", dir.display()),
        )
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(exit::INVALID_CONFIG, format!("bad manifest: {e}")))
}

/// Loads every record file listed in the manifest, or every
/// `records_T*.jsonl` file when there is no manifest.
pub fn load_records(dir: &Path) -> CliResult<Vec<RunRecord>> {
    let files: Vec<PathBuf> = match read_manifest(dir) {
        Ok(m) => m.records.iter().map(|f| dir.join(f)).collect(),
        Err(_) => {
            let entries = fs::read_dir(dir).map_err(|e| {
                CliError::new(
                    exit::INSUFFICIENT_DATA,
                    format!("cannot read {}: {e}", dir.display()),
                )
            })?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("records_T") && n.ends_with(".jsonl"))
                })
                .collect();
            found.sort();
            found
        }
    };
    let mut records = Vec::new();
    for path in files {
        let file = fs::File::open(&path).map_err(|e| {
            CliError::new(
                exit::INSUFFICIENT_DATA,
                format!("missing record file {}: {e}", path.display()),
            )
        })?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CliError::io("reading records", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RunRecord = serde_json::from_str(&line).map_err(|e| {
                CliError::new(
                    exit::INVALID_CONFIG,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(CliError::new(
            exit::INSUFFICIENT_DATA,
            format!("no records found in {}", dir.display()),
        ));
    }
    records.sort_by_key(|r| (r.horizon, r.seed, r.replicate));
    Ok(records)
}

pub fn write_output(path: Option<&Path>, contents: &[u8], stdout: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| CliError::io(&p.display().to_string(), e)),
        None => stdout
            .write_all(contents)
            .map_err(|e| CliError::io("writing stdout", e)),
    }
}
