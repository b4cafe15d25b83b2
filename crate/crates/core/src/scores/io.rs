//! CSV ingestion and export of score files.
//!
//! Calibration: `device_id,score`, one row per calibration point.
//! Test: `test_id,device_id,true_label,label_id,score`, one row per candidate label.

use std::path::Path;
use std::str::FromStr;

use super::{CalibrationData, TestInstance};
use crate::error::{DcpError, Result};

const CAL_HEADER: [&str; 2] = ["device_id", "score"];
const TEST_HEADER: [&str; 5] = ["test_id", "device_id", "true_label", "label_id", "score"];

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, column: &str, reason: impl Into<String>) -> DcpError {
        DcpError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            column: column.to_string(),
            reason: reason.into(),
        }
    }

    fn field<T: FromStr>(&self, record: &csv::StringRecord, idx: usize, column: &str) -> Result<T> {
        let raw = record
            .get(idx)
            .ok_or_else(|| self.err(column, "missing field"))?
            .trim();
        raw.parse()
            .map_err(|_| self.err(column, format!("cannot parse `{raw}`")))
    }

    fn score(&self, record: &csv::StringRecord, idx: usize, clip: bool) -> Result<f64> {
        let s: f64 = self.field(record, idx, "score")?;
        if s.is_nan() {
            return Err(self.err("score", "NaN score"));
        }
        if (0.0..=1.0).contains(&s) {
            Ok(s)
        } else if clip {
            Ok(s.clamp(0.0, 1.0))
        } else {
            Err(self.err("score", format!("{s} outside [0, 1] (pass --clip to clamp)")))
        }
    }
}

fn open(path: &Path, header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(DcpError::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: "header".into(),
            reason: format!("expected `{}`, found `{}`", header.join(","), found.join(",")),
        });
    }
    Ok(reader)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

pub fn read_calibration_csv(path: &Path, clip: bool) -> Result<CalibrationData> {
    let mut reader = open(path, &CAL_HEADER)?;
    let mut per_device: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let ctx = RowCtx {
            path,
            line: line_of(&record),
        };
        let device: usize = ctx.field(&record, 0, "device_id")?;
        let score = ctx.score(&record, 1, clip)?;
        if device >= per_device.len() {
            per_device.resize_with(device + 1, Vec::new);
        }
        per_device[device].push(score);
    }
    if let Some(gap) = per_device.iter().position(Vec::is_empty) {
        return Err(DcpError::InvalidData(format!(
            "{}: device ids must be contiguous from 0; device {gap} has no rows",
            path.display()
        )));
    }
    CalibrationData::new(per_device)
}

pub fn read_test_csv(path: &Path, clip: bool) -> Result<Vec<TestInstance>> {
    let mut reader = open(path, &TEST_HEADER)?;

    struct Pending {
        test_id: String,
        device: usize,
        true_label: usize,
        scores: Vec<Option<f64>>,
        first_line: u64,
    }

    fn finish(p: Pending, path: &Path) -> Result<TestInstance> {
        let ctx = RowCtx {
            path,
            line: p.first_line,
        };
        let scores = p
            .scores
            .iter()
            .enumerate()
            .map(|(y, s)| s.ok_or_else(|| ctx.err("label_id", format!("test `{}` lacks label {y}", p.test_id))))
            .collect::<Result<Vec<f64>>>()?;
        if p.true_label >= scores.len() {
            return Err(ctx.err("true_label", format!("{} out of range for {} labels", p.true_label, scores.len())));
        }
        Ok(TestInstance {
            device_id: p.device,
            candidate_scores: scores,
            true_label: p.true_label,
        })
    }

    let mut out = Vec::new();
    let mut current: Option<Pending> = None;
    for record in reader.records() {
        let record = record?;
        let ctx = RowCtx {
            path,
            line: line_of(&record),
        };
        let test_id = record.get(0).unwrap_or_default().trim().to_string();
        if test_id.is_empty() {
            return Err(ctx.err("test_id", "empty test id"));
        }
        let device: usize = ctx.field(&record, 1, "device_id")?;
        let true_label: usize = ctx.field(&record, 2, "true_label")?;
        let label: usize = ctx.field(&record, 3, "label_id")?;
        let score = ctx.score(&record, 4, clip)?;

        if current.as_ref().is_some_and(|p| p.test_id != test_id) {
            out.push(finish(current.take().unwrap(), path)?);
        }
        let pending = current.get_or_insert_with(|| Pending {
            test_id: test_id.clone(),
            device,
            true_label,
            scores: Vec::new(),
            first_line: ctx.line,
        });
        if pending.device != device {
            return Err(ctx.err("device_id", format!("changes within test `{test_id}`")));
        }
        if pending.true_label != true_label {
            return Err(ctx.err("true_label", format!("changes within test `{test_id}`")));
        }
        if label >= pending.scores.len() {
            pending.scores.resize(label + 1, None);
        }
        if pending.scores[label].replace(score).is_some() {
            return Err(ctx.err("label_id", format!("duplicate label {label} in test `{test_id}`")));
        }
    }
    if let Some(p) = current {
        out.push(finish(p, path)?);
    }
    if let Some(first) = out.first() {
        let labels = first.num_labels();
        if let Some((i, t)) = out.iter().enumerate().find(|(_, t)| t.num_labels() != labels) {
            return Err(DcpError::InvalidData(format!(
                "{}: test #{i} has {} labels, expected {labels}",
                path.display(),
                t.num_labels()
            )));
        }
    }
    Ok(out)
}

/// Reads both files and checks every test device exists in the calibration set.
pub fn ingest_scores(cal_path: &Path, test_path: &Path, clip: bool) -> Result<(CalibrationData, Vec<TestInstance>)> {
    let cal = read_calibration_csv(cal_path, clip)?;
    let tests = read_test_csv(test_path, clip)?;
    if let Some(t) = tests.iter().find(|t| t.device_id >= cal.num_devices()) {
        return Err(DcpError::InvalidData(format!(
            "test device {} not present among {} calibration devices",
            t.device_id,
            cal.num_devices()
        )));
    }
    Ok((cal, tests))
}

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| DcpError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_calibration_csv(path: &Path, cal: &CalibrationData) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(CAL_HEADER)?;
    for (k, scores) in cal.devices().iter().enumerate() {
        for s in scores {
            w.write_record([k.to_string(), s.to_string()])?;
        }
    }
    flush(w, path)
}

pub fn write_test_csv(path: &Path, tests: &[TestInstance]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(TEST_HEADER)?;
    for (i, t) in tests.iter().enumerate() {
        for (y, s) in t.candidate_scores.iter().enumerate() {
            w.write_record([
                i.to_string(),
                t.device_id.to_string(),
                t.true_label.to_string(),
                y.to_string(),
                s.to_string(),
            ])?;
        }
    }
    flush(w, path)
}
