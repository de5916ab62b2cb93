//! CSV training logs, one row per optimisation step.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sr_distill_core::losses::LossBreakdown;

use crate::error::{Result, ToolError};

/// Row of the autoencoder and teacher logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub step: usize,
    pub loss: f64,
}

/// Appends serialisable rows to a CSV file with a header.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| ToolError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(BufWriter::new(file)),
        })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| ToolError::format(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| ToolError::io(&self.path, e))
    }
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ToolError::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| ToolError::format(path, e)))
        .collect()
}

pub fn read_breakdowns(path: &Path) -> Result<Vec<LossBreakdown>> {
    read_rows(path)
}
