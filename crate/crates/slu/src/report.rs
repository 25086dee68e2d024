//! Plain-text outputs: eval report JSON, confusion and metrics CSVs,
//! prediction JSON lines and attention-weight CSVs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use slu_core::decoding::{DecodedLabel, Field, LabelSpace};
use slu_core::eval::{ConfusionMatrix, EvalReport, INVALID_COLUMN};
use slu_core::model::Mode;
use slu_core::training::EpochMetrics;
use slu_core::Tensor;

use crate::error::{Error, IoContext, Result};

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::format(path, e.to_string())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| json_err(path, e))?;
    std::fs::write(path, json + "\n").at(path)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_domain_acc,eval_intent_acc,eval_slot_acc,eval_exact_match,lr";

/// Appends-friendly metrics writer: header first, then one row per epoch.
pub struct MetricsWriter {
    path: std::path::PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        inner
            .write_record(METRICS_HEADER.split(','))
            .map_err(|e| csv_err(path, e))?;
        inner.flush().at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn push(&mut self, m: &EpochMetrics) -> Result<()> {
        self.inner.serialize(m).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().at(&self.path)
    }
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for m in metrics {
        w.push(m)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::format(path, format!("unexpected metrics header {:?}", header.join(","))));
    }
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_err(path, e))
}

/// Rows are reference classes, columns predicted classes plus
/// `<invalid>`; the corner cell reads `reference\predicted`.
pub fn write_confusion(path: &Path, m: &ConfusionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["reference\\predicted".to_string()];
    header.extend(m.names.iter().cloned());
    header.push(INVALID_COLUMN.into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, row) in m.names.iter().zip(&m.counts) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_confusion(path: &Path, field: Field) -> Result<ConfusionMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.len().saturating_sub(2);
    let names: Vec<String> = header.iter().skip(1).take(k).map(String::from).collect();
    let mut counts = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<usize>().map_err(|e| Error::format(path, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        counts.push(row);
    }
    if counts.len() != k || counts.iter().any(|r| r.len() != k + 1) {
        return Err(Error::format(path, "confusion matrix is not square plus an invalid column"));
    }
    Ok(ConfusionMatrix { field, names, counts })
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub mode: Mode,
    pub domain: Option<String>,
    pub intent: Option<String>,
    pub slots: Vec<Option<String>>,
    /// Emitted tokens (hierarchical) or the class name (classification).
    pub tokens: Vec<String>,
    /// Model probability of each emitted token.
    pub posterior: Vec<f64>,
    pub structural_violation: bool,
}

impl PredictionRecord {
    pub fn new(id: &str, mode: Mode, d: &DecodedLabel, space: &LabelSpace) -> Result<Self> {
        let name = |f: Field| d.field(f).map(|i| space.names(f)[i].clone());
        let tokens = match mode {
            Mode::Hierarchical => d
                .tokens
                .iter()
                .map(|&t| space.token_name(t))
                .collect::<slu_core::Result<Vec<_>>>()?,
            Mode::Classification => d.tokens.iter().map(|t| format!("class_{t}")).collect(),
        };
        Ok(Self {
            id: id.to_string(),
            mode,
            domain: name(Field::Domain),
            intent: name(Field::Intent),
            slots: (0..space.num_slots()).map(|i| name(Field::Slot(i))).collect(),
            tokens,
            posterior: d.posteriors.clone(),
            structural_violation: d.violation.is_some(),
        })
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| json_err(path, e))?;
        writeln!(w, "{line}").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let r = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Attention weights of one head: header `query,k0,k1,…`, one row per
/// query position.
pub fn write_attention(path: &Path, alpha: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["query".to_string()];
    header.extend((0..alpha.cols()).map(|j| format!("k{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..alpha.rows() {
        let mut rec = vec![i.to_string()];
        rec.extend(alpha.row(i).iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn read_attention(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let cols = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for v in rec.iter().skip(1) {
            data.push(v.parse::<f64>().map_err(|e| Error::format(path, e.to_string()))?);
        }
        rows += 1;
    }
    Tensor::new(&[rows, cols], data).map_err(|e| Error::format(path, e.to_string()))
}
