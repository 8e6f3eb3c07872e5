//! File formats the CLI reads and writes.

use crate::error::{CliError, CliResult};
use bayescan::can::Capture;
use bayescan::checkpoint::Checkpoint;
use bayescan::features::EncodedDataset;
use bayescan::ClassLabel;
use clap::ValueEnum;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    /// By extension: `.csv` dataset CSV, `.log`/`.candump` candump, else capture.
    Auto,
    /// Capture container (JSON header + one JSON record per frame).
    Capture,
    /// Research dataset CSV (`ts,id,dlc,bytes..,R|T`).
    Csv,
    /// `candump -l` log.
    Candump,
}

impl FrameFormat {
    pub fn resolve(self, path: &Path) -> FrameFormat {
        if self != FrameFormat::Auto {
            return self;
        }
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => FrameFormat::Csv,
            Some("log") | Some("candump") => FrameFormat::Candump,
            _ => FrameFormat::Capture,
        }
    }

    /// Whether frames in this format carry ground-truth classes.
    pub fn labeled(self) -> bool {
        self != FrameFormat::Candump
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::data(path, e))
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::data(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::data(path, e))
}

/// Read frames; `class` names the attack of a dataset-CSV capture.
pub fn read_capture(path: &Path, format: FrameFormat, class: Option<ClassLabel>) -> CliResult<Capture> {
    let r = open(path)?;
    let cap = match format.resolve(path) {
        FrameFormat::Csv => Capture::read_dataset_csv(r, class.unwrap_or(ClassLabel::Normal), path.into()),
        FrameFormat::Candump => Capture::read_candump(r, path.into()),
        _ => Capture::read_from(r),
    };
    cap.map_err(|e| CliError::data(path, e))
}

pub fn read_dataset(path: &Path) -> CliResult<EncodedDataset> {
    EncodedDataset::read_from(open(path)?).map_err(|e| CliError::data(path, e))
}

pub fn write_dataset(path: &Path, ds: &EncodedDataset) -> CliResult {
    ds.write_to(create(path)?).map_err(|e| CliError::data(path, e))
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::read_file(path).map_err(|e| CliError::data(path, e))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(dir, e))?;
    }
    ck.write_file(path).map_err(|e| CliError::data(path, e))
}

pub fn parse_class(s: &str) -> Result<ClassLabel, String> {
    s.parse().map_err(|e: bayescan::can::UnknownLabel| e.to_string())
}
