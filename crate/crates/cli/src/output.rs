//! Report files and the run manifest.
//!
//! Everything except `manifest.json` is a pure function of the resolved config,
//! so reruns overwrite outputs with identical bytes. The manifest alone carries
//! the wall-clock timestamp.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latent_core::graph::ScaleDiagnostic;
use latent_core::metrics::{self, ConsistencyReport, EvalReport, REPORT_HEADER};
use latent_core::trainer::TrainHistory;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a ExperimentConfig,
    config_sha256: String,
    seed: Option<u64>,
    data_seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    created: String,
}

/// Collects written files so the manifest can list their checksums.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.record(path.clone());
        Ok(path)
    }

    /// Registers a file written by other code (e.g. a dataset table).
    pub fn record(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn finish(self, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
        let canonical = serde_json::to_string(cfg).map_err(|e| CliError::Internal(e.to_string()))?;
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>, CliError> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: file_sha256(p)?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            config_sha256: sha256_hex(canonical.as_bytes()),
            seed: cfg.train.seed,
            data_seed: cfg.data.seed,
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.written)?,
            created: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Header of every metric report: the metrics columns prefixed by the cell.
pub fn report_header() -> String {
    format!("scenario,lambda,{REPORT_HEADER}")
}

pub fn report_lines(out: &mut String, scenario: &str, lambda: f64, report: &EvalReport) {
    for row in metrics::report_rows(report) {
        let _ = writeln!(out, "{scenario},{lambda},{}", row.join(","));
    }
}

/// The lambda column holds both runs' choices when they differ, as `a|b`.
pub fn consistency_csv(scenario: &str, reports: &[ConsistencyReport]) -> String {
    let mut out = report_header() + "\n";
    for r in reports {
        let [a, b] = r.lambdas;
        let l = if a == b { a.to_string() } else { format!("{a}|{b}") };
        for row in metrics::consistency_rows(r) {
            let _ = writeln!(out, "{scenario},{l},{}", row.join(","));
        }
    }
    out
}

pub const SCALE_HEADER: &str = "scenario,strategy,lambda,head,mean_ratio,cv,used,excluded";

pub fn scale_lines(
    out: &mut String,
    scenario: &str,
    strategy: &str,
    lambda: f64,
    scales: &std::collections::BTreeMap<String, ScaleDiagnostic>,
) {
    for (head, d) in scales {
        let _ = writeln!(
            out,
            "{scenario},{strategy},{lambda},{head},{},{},{},{}",
            d.mean_ratio, d.cv, d.used, d.excluded
        );
    }
}

pub const HISTORY_HEADER: &str =
    "epoch,train_bce,train_aggregate,train_total,val_bce,val_aggregate,val_total,lambda,best";

pub fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from(HISTORY_HEADER) + "\n";
    for (i, e) in history.epochs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train.bce,
            e.train.aggregate,
            e.train.total,
            e.val.bce,
            e.val.aggregate,
            e.val.total,
            e.val.lambda,
            u8::from(history.best_epoch == Some(i))
        );
    }
    out
}
