use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
}

/// One eligibility statement, stored under every aggregation of its token
/// embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatementEmbedding {
    pub first_token: Vec<f64>,
    pub mean: Vec<f64>,
    pub sum: Vec<f64>,
    /// Number of tokens aggregated, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: String,
    pub phase: Phase,
    pub start_date: NaiveDate,
    pub label: u8,
    pub molecule_embeddings: Vec<Vec<f64>>,
    pub disease_embeddings: Vec<Vec<f64>>,
    pub inclusion_statements: Vec<StatementEmbedding>,
    /// Empty when the trial lists no exclusion criteria.
    pub exclusion_statements: Vec<StatementEmbedding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub d_mol: usize,
    pub d_dis: usize,
    pub d_txt: usize,
    /// Encoder name and version per mode.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub record_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

/// One line of a dataset file.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Manifest(DatasetManifest),
    Record(TrialRecord),
}

const STATEMENT_SUM_TOLERANCE: f64 = 1e-6;

impl TrialRecord {
    /// Checks the record against the manifest dimensions and label domain.
    pub fn validate(&self, manifest: &DatasetManifest) -> std::result::Result<(), String> {
        let id = &self.trial_id;
        if self.label > 1 {
            return Err(format!("record {id}: label {} outside {{0, 1}}", self.label));
        }
        let check = |what: &str, vecs: &mut dyn Iterator<Item = &Vec<f64>>, dim: usize| {
            for (i, v) in vecs.enumerate() {
                if v.len() != dim {
                    return Err(format!(
                        "record {id}: {what} vector {i} has dimension {}, expected {dim}",
                        v.len()
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(format!("record {id}: {what} vector {i} is not finite"));
                }
            }
            Ok(())
        };
        check("molecule", &mut self.molecule_embeddings.iter(), manifest.d_mol)?;
        check("disease", &mut self.disease_embeddings.iter(), manifest.d_dis)?;
        for (what, list) in [
            ("inclusion", &self.inclusion_statements),
            ("exclusion", &self.exclusion_statements),
        ] {
            for (i, s) in list.iter().enumerate() {
                check(what, &mut [&s.first_token, &s.mean, &s.sum].into_iter(), manifest.d_txt)?;
                if let Some(count) = s.count {
                    let c = f64::from(count);
                    let off = s
                        .mean
                        .iter()
                        .zip(&s.sum)
                        .map(|(m, t)| (m * c - t).abs())
                        .fold(0.0, f64::max);
                    if off > STATEMENT_SUM_TOLERANCE * (1.0 + c) {
                        return Err(format!(
                            "record {id}: {what} statement {i} has mean * count != sum (off by {off:e})"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a dataset file: a manifest line followed by one record per line.
///
/// Fails on the first malformed line, reporting its 1-based line number.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<TrialRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let data_err = |line: usize, message: String| Error::Data {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut manifest: Option<DatasetManifest> = None;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| data_err(lineno, e.to_string()))?;
        match (parsed, &manifest) {
            (Line::Manifest(m), None) => manifest = Some(m),
            (Line::Manifest(_), Some(_)) => {
                return Err(data_err(lineno, "second manifest line".into()));
            }
            (Line::Record(_), None) => {
                return Err(data_err(lineno, "record before manifest".into()));
            }
            (Line::Record(r), Some(m)) => {
                r.validate(m).map_err(|msg| data_err(lineno, msg))?;
                records.push(r);
            }
        }
    }
    let manifest = manifest.ok_or_else(|| data_err(0, "missing manifest line".into()))?;
    if manifest.record_count != records.len() {
        return Err(data_err(
            0,
            format!(
                "manifest declares {} records, file has {}",
                manifest.record_count,
                records.len()
            ),
        ));
    }
    Ok((manifest, records))
}

/// Writes a dataset file. `manifest.record_count` is set from `records`.
pub fn write_dataset(path: &Path, manifest: &DatasetManifest, records: &[TrialRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut m = manifest.clone();
    m.record_count = records.len();
    serde_json::to_writer(&mut w, &Line::Manifest(m))?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, &LineRef::Record(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LineRef<'a> {
    Record(&'a TrialRecord),
}
