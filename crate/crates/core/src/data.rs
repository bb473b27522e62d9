//! Record and dataset types shared by every other module, plus JSON Lines
//! ingestion.
//!
//! A record file holds one JSON object per line:
//!
//! ```text
//! {"logits": [1.2, -0.3, 0.1], "label": 2, "embedding": [0.5, 0.7]}
//! ```
//!
//! `label` is omitted for OOD-pool files and `embedding` is optional. The
//! split role is supplied by the caller, never stored in the file. The class
//! count is inferred from the first record.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdCalib,
    IdTest,
    ShiftedTest,
    OodPool,
}

impl Role {
    pub fn is_labelled(self) -> bool {
        !matches!(self, Role::OodPool)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdCalib => "ID_CALIB",
            Role::IdTest => "ID_TEST",
            Role::ShiftedTest => "SHIFTED_TEST",
            Role::OodPool => "OOD_POOL",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "id_calib" | "calib" => Ok(Role::IdCalib),
            "id_test" | "test" => Ok(Role::IdTest),
            "shifted_test" | "shifted" => Ok(Role::ShiftedTest),
            "ood_pool" | "ood" => Ok(Role::OodPool),
            other => Err(Error::invalid(format!("unknown split role '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Record {
    pub fn labelled(logits: Vec<f64>, label: usize) -> Self {
        Record {
            logits,
            label: Some(label),
            embedding: None,
        }
    }

    pub fn unlabelled(logits: Vec<f64>) -> Self {
        Record {
            logits,
            label: None,
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// A named, role-tagged collection of records sharing one class count.
///
/// Sets built through [`EvalSet::new`] or [`load_records`] are validated;
/// a struct literal is not, and can be checked with [`validate_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub role: Role,
    pub class_count: usize,
    pub records: Vec<Record>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, role: Role, records: Vec<Record>) -> Result<Self> {
        let class_count = records.first().map(|r| r.logits.len()).ok_or(Error::EmptySet)?;
        let set = EvalSet {
            name: name.into(),
            role,
            class_count,
            records,
        };
        validate_set(&set)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn logits(&self) -> Array2<f64> {
        let c = self.class_count;
        let mut out = Array2::zeros((self.records.len(), c));
        for (mut row, rec) in out.rows_mut().into_iter().zip(&self.records) {
            row.assign(&ndarray::ArrayView1::from(&rec.logits[..]));
        }
        out
    }

    /// Labels of every record; `None` when any record is unlabelled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Embedding matrix, present only when every record carries an
    /// embedding of the same width.
    pub fn embeddings(&self) -> Option<Array2<f64>> {
        let first = self.records.first()?.embedding.as_ref()?;
        let d = first.len();
        let mut out = Array2::zeros((self.records.len(), d));
        for (mut row, rec) in out.rows_mut().into_iter().zip(&self.records) {
            let e = rec.embedding.as_ref()?;
            if e.len() != d {
                return None;
            }
            row.assign(&ndarray::ArrayView1::from(&e[..]));
        }
        Some(out)
    }

    /// Same records with replaced logits (rows in record order).
    pub fn with_logits(&self, logits: &Array2<f64>) -> Result<EvalSet> {
        if logits.nrows() != self.records.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} logit rows for {} records",
                logits.nrows(),
                self.records.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(logits.rows())
            .map(|(r, z)| Record {
                logits: z.to_vec(),
                label: r.label,
                embedding: r.embedding.clone(),
            })
            .collect();
        EvalSet::new(self.name.clone(), self.role, records)
    }
}

/// Probability-vector targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    targets: Array2<f64>,
}

impl SoftLabelSet {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(targets: Array2<f64>) -> Result<Self> {
        for (i, row) in targets.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: "target entries must be finite and nonnegative".into(),
                });
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > Self::TOLERANCE {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: format!("target row sums to {s}, not 1"),
                });
            }
        }
        Ok(SoftLabelSet { targets })
    }

    pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Self> {
        Ok(SoftLabelSet {
            targets: one_hot(labels, class_count)?,
        })
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.targets
    }
}

pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), class_count));
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(Error::InvalidRecord {
                index: i,
                reason: format!("label {y} out of range for {class_count} classes"),
            });
        }
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

/// Checks every [`EvalSet`] invariant, reporting the first offending record.
pub fn validate_set(set: &EvalSet) -> Result<()> {
    if set.records.is_empty() {
        return Err(Error::EmptySet);
    }
    if set.class_count < 2 {
        return Err(Error::invalid(format!(
            "class count must be at least 2, got {}",
            set.class_count
        )));
    }
    let embed_dim = set.records[0].embedding.as_ref().map(Vec::len);
    for (index, rec) in set.records.iter().enumerate() {
        let bad = |reason: String| Error::InvalidRecord { index, reason };
        if rec.logits.len() != set.class_count {
            return Err(bad(format!(
                "logits length {} differs from class count {}",
                rec.logits.len(),
                set.class_count
            )));
        }
        if rec.logits.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite logit".into()));
        }
        if let Some(e) = &rec.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite embedding entry".into()));
            }
            if Some(e.len()) != embed_dim {
                return Err(bad("inconsistent embedding length".into()));
            }
        }
        match (rec.label, set.role.is_labelled()) {
            (Some(_), false) => return Err(bad(format!("label not allowed for {}", set.role))),
            (None, true) => return Err(bad(format!("missing label for {}", set.role))),
            (Some(y), true) if y >= set.class_count => {
                return Err(bad(format!("label {y} out of range")))
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>, role: Role) -> Result<EvalSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_records(BufReader::new(file), role, name)
}

/// Parses JSON Lines records from any reader. Blank lines are skipped;
/// reported line numbers are 1-based physical lines.
pub fn read_records(reader: impl BufRead, role: Role, name: impl Into<String>) -> Result<EvalSet> {
    let mut records = Vec::new();
    let mut class_count = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let c = *class_count.get_or_insert(rec.logits.len());
        if rec.logits.len() != c {
            return Err(Error::InconsistentClassCount {
                line: line_no,
                expected: c,
                found: rec.logits.len(),
            });
        }
        if rec.logits.iter().chain(rec.embedding.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        match (rec.label, role.is_labelled()) {
            (Some(_), false) => return Err(Error::LabelNotAllowed { line: line_no }),
            (None, true) => {
                return Err(Error::MissingLabel {
                    line: line_no,
                    role: role.to_string(),
                })
            }
            _ => {}
        }
        records.push(rec);
    }
    EvalSet::new(name, role, records)
}

pub fn write_records(set: &EvalSet, writer: impl Write) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for rec in &set.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<records>", e))?;
    }
    w.flush().map_err(|e| Error::io("<records>", e))
}

pub fn save_records(set: &EvalSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(set, file)
}

/// `n` records drawn uniformly without replacement, deterministic in `seed`.
pub fn subsample(set: &EvalSet, n: usize, seed: u64) -> Result<EvalSet> {
    let idx = sample_indices(set.len(), n, seed)?;
    Ok(EvalSet {
        name: set.name.clone(),
        role: set.role,
        class_count: set.class_count,
        records: idx.into_iter().map(|i| set.records[i].clone()).collect(),
    })
}

pub(crate) fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::invalid(format!(
            "subsample size {n} outside 1..={len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, len, n).into_vec())
}
