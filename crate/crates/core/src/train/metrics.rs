//! Per-step and evaluation metrics, written as append-only CSV with a
//! mirrored JSON-lines stream.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// `train` for optimisation steps, `val` for evaluations.
    pub split: String,
    pub loss_vqa: Option<f64>,
    pub loss_distill: Option<f64>,
    pub loss_total: Option<f64>,
    pub accuracy: f64,
    /// Not applicable for the teacher, which selects no frames.
    pub keyframe_recall: Option<f64>,
    pub selection_overlap: Option<f64>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
    pub grad_norm: Option<f64>,
    pub clipped: Option<bool>,
    pub wallclock_ms: Option<f64>,
}

impl MetricsRow {
    pub fn eval(step: usize, accuracy: f64, keyframe_recall: Option<f64>) -> Self {
        Self {
            step,
            split: "val".into(),
            loss_vqa: None,
            loss_distill: None,
            loss_total: None,
            accuracy,
            keyframe_recall,
            selection_overlap: None,
            tau: None,
            lr: None,
            grad_norm: None,
            clipped: None,
            wallclock_ms: None,
        }
    }
}

/// Appends rows to `<stem>.csv` and `<stem>.jsonl`. An existing CSV keeps
/// its header, so a resumed run continues the same files.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
}

impl MetricsWriter {
    pub fn open(dir: &Path, stem: &str, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let jsonl_path = dir.join(format!("{stem}.jsonl"));
        let has_rows = append && csv_path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let open = |p: &Path| -> std::io::Result<File> {
            if append {
                OpenOptions::new().create(true).append(true).open(p)
            } else {
                File::create(p)
            }
        };
        let csv = csv::WriterBuilder::new().has_headers(!has_rows).from_writer(open(&csv_path)?);
        let jsonl = BufWriter::new(open(&jsonl_path)?);
        Ok(Self {
            csv,
            jsonl,
            csv_path,
            jsonl_path,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.serialize(row)?;
        serde_json::to_writer(&mut self.jsonl, row)?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

/// Whether a row was written before a checkpoint at `step` was taken: every
/// training row of an earlier step, and validation rows up to `step`.
pub fn precedes_checkpoint(row: &MetricsRow, step: usize) -> bool {
    row.step < step || (row.split == "val" && row.step == step)
}

/// Drops the rows written after a checkpoint at `step`, so a resumed run
/// appends to the log it would have had without the interruption.
pub fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_csv(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows.iter().filter(|r| precedes_checkpoint(r, step)) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn truncate_jsonl(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = String::new();
    for line in text.lines() {
        let row: MetricsRow = serde_json::from_str(line)?;
        if precedes_checkpoint(&row, step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?)
}
