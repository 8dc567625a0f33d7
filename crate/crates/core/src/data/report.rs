use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cdr_error, pearson, roc_auc, Grade, SegMetrics};

pub const REPORT_HEADER: [&str; 11] = [
    "image_id",
    "structure",
    "dsc",
    "iou",
    "precision",
    "sensitivity",
    "accuracy",
    "cdr_gt",
    "cdr_pred",
    "grade_gt",
    "grade_pred",
];

/// One image and one structure (`disc` or `cup`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub structure: String,
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
    pub cdr_gt: Option<f64>,
    pub cdr_pred: Option<f64>,
    pub grade_gt: Option<Grade>,
    pub grade_pred: Option<Grade>,
}

impl EvalRow {
    pub fn metrics(&self) -> SegMetrics {
        SegMetrics {
            dsc: self.dsc,
            iou: self.iou,
            precision: self.precision,
            sensitivity: self.sensitivity,
            accuracy: self.accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureMeans {
    pub count: usize,
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub disc: StructureMeans,
    pub cup: StructureMeans,
    /// Images with both a ground-truth and a predicted CDR.
    pub cdr_pairs: usize,
    pub delta_cdr: Option<f64>,
    pub auc: Option<f64>,
    pub auc_note: Option<String>,
    pub pcc: Option<f64>,
    pub pcc_note: Option<String>,
    pub mean_inference_ms: Option<f64>,
}

fn means<'a>(rows: impl Iterator<Item = &'a EvalRow>) -> StructureMeans {
    let mut m = StructureMeans::default();
    for r in rows {
        m.count += 1;
        m.dsc += r.dsc;
        m.iou += r.iou;
        m.precision += r.precision;
        m.sensitivity += r.sensitivity;
        m.accuracy += r.accuracy;
    }
    if m.count > 0 {
        let n = m.count as f64;
        m.dsc /= n;
        m.iou /= n;
        m.precision /= n;
        m.sensitivity /= n;
        m.accuracy /= n;
    }
    m
}

/// Aggregates per-row output; CDR statistics read the disc rows.
pub fn summarize(rows: &[EvalRow]) -> Result<EvalSummary> {
    let disc: Vec<&EvalRow> = rows.iter().filter(|r| r.structure == "disc").collect();
    let mut s = EvalSummary {
        images: disc.len(),
        disc: means(disc.iter().copied()),
        cup: means(rows.iter().filter(|r| r.structure == "cup")),
        ..Default::default()
    };
    let pairs: Vec<(f64, f64)> = disc.iter().filter_map(|r| Some((r.cdr_gt?, r.cdr_pred?))).collect();
    s.cdr_pairs = pairs.len();
    if !pairs.is_empty() {
        s.delta_cdr = Some(cdr_error(&pairs)?);
    }

    let scored: Vec<(f64, bool)> = disc
        .iter()
        .filter_map(|r| Some((r.cdr_pred?, r.grade_gt?.is_glaucomatous())))
        .collect();
    let (scores, labels): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
    match roc_auc(&scores, &labels) {
        Ok(r) => s.auc = Some(r.auc),
        Err(Error::Contract(msg)) => s.auc_note = Some(format!("AUC omitted: {msg}")),
        Err(e) => return Err(e),
    }
    let (gt, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    match pearson(&gt, &pred) {
        Ok(p) => s.pcc = Some(p),
        Err(Error::Contract(msg)) => s.pcc_note = Some(format!("PCC omitted: {msg}")),
        Err(e) => return Err(e),
    }
    Ok(s)
}

pub(super) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::io(path, source),
            other => Error::Load(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Load(format!("{}: {e}", path.display()))
    }
}

impl EvalRow {
    pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        if rows.is_empty() {
            w.write_record(REPORT_HEADER).map_err(|e| csv_error(path, e))?;
        }
        for r in rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
    }
}

impl EvalSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
