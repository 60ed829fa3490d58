//! End-to-end workflow: data, checkpoints, the two training stages, sampling and evaluation.

pub mod checkpoint;
pub mod codes;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod generate;
pub mod train;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::codec::Level;
use crate::error::{Error, Result};

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("vqvae.ckpt")
    }
    pub fn prior_checkpoint(&self, level: Level) -> PathBuf {
        self.root.join(format!("prior_{level}.ckpt"))
    }
    pub fn classifier_checkpoint(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn codes(&self) -> PathBuf {
        self.root.join("codes.bin")
    }
    pub fn val_codes(&self) -> PathBuf {
        self.root.join("codes_val.bin")
    }
    pub fn stage1_metrics(&self) -> PathBuf {
        self.root.join("metrics_vqvae.csv")
    }
    pub fn prior_metrics(&self, level: Level) -> PathBuf {
        self.root.join(format!("metrics_prior_{level}.csv"))
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn detail(&self) -> PathBuf {
        self.root.join("detail")
    }
}

/// Append-only CSV time series, flushed after every row.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsLog {
    /// Opens `path`; the header is written unless appending to a non-empty file.
    pub fn open(path: &Path, header: &[String], append: bool) -> Result<Self> {
        let existing = append && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = Self { path: path.to_path_buf(), writer: csv::Writer::from_writer(file) };
        if !existing {
            log.row(header)?;
        }
        Ok(log)
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        let fail = |e: String| Error::Format(format!("{}: {e}", self.path.display()));
        self.writer.write_record(fields.iter().map(AsRef::as_ref)).map_err(|e| fail(e.to_string()))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
