//! Experiment records: loading, validation and conversion to law inputs.
//!
//! CSV is the canonical interchange format. The header must use the exact
//! column names `dataset,pretrain_tokens,finetune_tokens,val_loss` with
//! optional `epochs` and `trial` columns. JSON input is an array of objects
//! with the same field names.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EvalPoint;

/// Tokens processed per optimizer step (the batch size of the reference runs).
pub const DEFAULT_TOKENS_PER_STEP: f64 = 2_097_152.0;

const REQUIRED_COLUMNS: [&str; 4] = ["dataset", "pretrain_tokens", "finetune_tokens", "val_loss"];
const OPTIONAL_COLUMNS: [&str; 2] = ["epochs", "trial"];

/// One fine-tuning run: where it started, how much data it saw, how it ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub pretrain_tokens: f64,
    pub finetune_tokens: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<String>,
}

impl RunRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.val_loss.is_finite() && self.val_loss > 0.0) {
            return Err(format!("val_loss must be finite and > 0, got {}", self.val_loss));
        }
        if !(self.pretrain_tokens.is_finite() && self.pretrain_tokens >= 0.0) {
            return Err(format!("pretrain_tokens must be >= 0, got {}", self.pretrain_tokens));
        }
        if !(self.finetune_tokens.is_finite() && self.finetune_tokens >= 1.0) {
            return Err(format!("finetune_tokens must be >= 1, got {}", self.finetune_tokens));
        }
        if self.epochs == Some(0) {
            return Err("epochs must be >= 1".into());
        }
        Ok(())
    }

    fn key(&self) -> (String, u64, u64, Option<String>) {
        (
            self.dataset.clone(),
            self.pretrain_tokens.to_bits(),
            self.finetune_tokens.to_bits(),
            self.trial.clone(),
        )
    }
}

/// The pre-training x fine-tuning design of an experiment campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub pretrain_levels: Vec<f64>,
    pub finetune_levels: Vec<f64>,
}

impl ExperimentGrid {
    /// The 15 x 10 grid of the reference experiments (150 runs per dataset).
    pub fn reference() -> Self {
        ExperimentGrid {
            pretrain_levels: vec![
                5.37e8, 1.07e9, 2.10e9, 4.19e9, 6.29e9, 1.05e10, 1.68e10, 2.31e10, 3.57e10, 5.45e10, 7.97e10, 1.22e11,
                1.80e11, 2.73e11, 2.99e11,
            ],
            finetune_levels: vec![10.0, 30.0, 40.0, 70.0, 100.0, 170.0, 270.0, 430.0, 690.0, 1100.0],
        }
    }

    pub fn len(&self) -> usize {
        self.pretrain_levels.len() * self.finetune_levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in pre-training-major order.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.pretrain_levels
            .iter()
            .flat_map(move |&p| self.finetune_levels.iter().map(move |&f| (p, f)))
    }
}

/// An input point of the law paired with the observed loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: EvalPoint,
    pub loss: f64,
}

/// Converts pre-training tokens to the law's `p` (steps + 1).
pub fn pretrain_magnitude(pretrain_tokens: f64, tokens_per_step: f64) -> f64 {
    pretrain_tokens / tokens_per_step + 1.0
}

pub fn to_eval_points(records: &[RunRecord], tokens_per_step: f64) -> Vec<Observation> {
    records
        .iter()
        .map(|r| Observation {
            point: EvalPoint {
                p: pretrain_magnitude(r.pretrain_tokens, tokens_per_step),
                f: r.finetune_tokens,
            },
            loss: r.val_loss,
        })
        .collect()
}

fn check_records(records: &[RunRecord], first_line: u64) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let line = first_line + i as u64;
        r.validate().map_err(|message| Error::InvalidRecord { line, message })?;
        if !seen.insert(r.key()) {
            return Err(Error::DuplicateRecord {
                line,
                key: format!(
                    "dataset={} pretrain_tokens={} finetune_tokens={}{}",
                    r.dataset,
                    r.pretrain_tokens,
                    r.finetune_tokens,
                    r.trial.as_deref().map(|t| format!(" trial={t}")).unwrap_or_default()
                ),
            });
        }
    }
    if records.is_empty() {
        log::warn!("no records in input");
    }
    Ok(())
}

/// Parses CSV records. Line numbers in errors count the header as line 1.
pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for col in REQUIRED_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing required column {col:?}"),
            });
        }
    }
    if let Some(extra) = headers
        .iter()
        .find(|h| !REQUIRED_COLUMNS.contains(h) && !OPTIONAL_COLUMNS.contains(h))
    {
        return Err(Error::Parse {
            line: 1,
            message: format!("unknown column {extra:?}"),
        });
    }

    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        records.push(row.into_record().map_err(|message| Error::Parse { line, message })?);
    }
    check_records(&records, 2)?;
    Ok(records)
}

// Empty optional cells deserialize to None rather than a parse error.
#[derive(Deserialize)]
struct CsvRow {
    dataset: String,
    pretrain_tokens: f64,
    finetune_tokens: f64,
    val_loss: f64,
    #[serde(default)]
    epochs: Option<String>,
    #[serde(default)]
    trial: Option<String>,
}

impl CsvRow {
    fn into_record(self) -> std::result::Result<RunRecord, String> {
        let epochs = match self.epochs.as_deref() {
            None | Some("") => None,
            Some(text) => Some(text.parse::<u32>().map_err(|e| format!("epochs {text:?}: {e}"))?),
        };
        Ok(RunRecord {
            dataset: self.dataset,
            pretrain_tokens: self.pretrain_tokens,
            finetune_tokens: self.finetune_tokens,
            val_loss: self.val_loss,
            epochs,
            trial: self.trial.filter(|t| !t.is_empty()),
        })
    }
}

pub fn parse_json(text: &str) -> Result<Vec<RunRecord>> {
    let records: Vec<RunRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    // JSON has no header line; record i is reported as "line" i + 1.
    check_records(&records, 1)?;
    Ok(records)
}

/// Loads records from a `.json` file or, for any other extension, CSV.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let records = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_json(&std::fs::read_to_string(path).map_err(io_err)?)?
    } else {
        parse_csv(std::fs::File::open(path).map_err(io_err)?)?
    };
    log::info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

/// Writes records in the canonical CSV schema. Optional columns appear only
/// when at least one record uses them.
pub fn write_csv<W: Write>(records: &[RunRecord], writer: W) -> Result<()> {
    let with_epochs = records.iter().any(|r| r.epochs.is_some());
    let with_trial = records.iter().any(|r| r.trial.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());

    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if with_epochs {
        header.push("epochs");
    }
    if with_trial {
        header.push("trial");
    }
    wtr.write_record(&header).map_err(ser)?;
    for r in records {
        let mut row = vec![
            r.dataset.clone(),
            r.pretrain_tokens.to_string(),
            r.finetune_tokens.to_string(),
            r.val_loss.to_string(),
        ];
        if with_epochs {
            row.push(r.epochs.map(|e| e.to_string()).unwrap_or_default());
        }
        if with_trial {
            row.push(r.trial.clone().unwrap_or_default());
        }
        wtr.write_record(&row).map_err(ser)?;
    }
    wtr.flush().map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}

pub fn write_csv_file(records: &[RunRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_csv(records, std::io::BufWriter::new(file))
}
