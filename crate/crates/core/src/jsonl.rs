//! JSON-Lines persistence for pipeline artifacts.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::study::{ConditionalSlice, JointTable, StudyDesign, StudyError};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: {source}")]
    Invalid { path: String, line: usize, source: StudyError },
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        let line = serde_json::to_string(item).expect("artifact types serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads one value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let io_err = |source| JsonlError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|source| JsonlError::Parse { path: path.display().to_string(), line: i + 1, source })?;
        out.push(item);
    }
    Ok(out)
}

/// Persisted form of a [`ConditionalSlice`], covariates as labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub report_id: String,
    pub x: Vec<String>,
    /// `p[t][y]`.
    pub p: [[f64; 2]; 2],
}

impl SliceRecord {
    pub fn new(slice: &ConditionalSlice, design: &StudyDesign) -> Self {
        SliceRecord { report_id: slice.report_id.clone(), x: design.covariates.labels(&slice.x), p: *slice.cells() }
    }

    pub fn slice(&self, design: &StudyDesign) -> Result<ConditionalSlice, StudyError> {
        let x = design.covariates.parse_labels(&self.x)?;
        ConditionalSlice::new(self.report_id.clone(), x, self.p)
    }
}

/// Persisted form of a [`JointTable`]; cells are stratum-major, then t, then y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub report_id: String,
    pub p: Vec<f64>,
}

impl JointRecord {
    pub fn new(report_id: &str, joint: &JointTable) -> Self {
        JointRecord { report_id: report_id.to_string(), p: joint.cells().to_vec() }
    }

    pub fn joint(&self, design: &StudyDesign) -> Result<JointTable, StudyError> {
        JointTable::new(self.p.clone(), design.covariates.n_strata())
    }
}

/// Converts persisted records, reporting the first invalid line.
pub fn decode_all<R, T>(
    path: &Path,
    records: &[R],
    decode: impl Fn(&R) -> Result<T, StudyError>,
) -> Result<Vec<T>, JsonlError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| decode(r).map_err(|source| JsonlError::Invalid { path: path.display().to_string(), line: i + 1, source }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FilterDecision;
    use crate::pipeline::Stage;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("textate-jsonl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.jsonl");
        let items = vec![
            FilterDecision { report_id: "a".into(), stage: Stage::Initial, kept: true, reason: "kept".into() },
            FilterDecision { report_id: "b".into(), stage: Stage::Relevance, kept: false, reason: "x".into() },
        ];
        write_jsonl(&path, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"report_id":"a","stage":"initial","kept":true,"reason":"kept"}"#));
        let back: Vec<FilterDecision> = read_jsonl(&path).unwrap();
        assert_eq!(back, items);
        std::fs::write(&path, "{\"report_id\":1}\n").unwrap();
        let err = read_jsonl::<FilterDecision>(&path).unwrap_err();
        assert!(err.to_string().contains(":1:"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
