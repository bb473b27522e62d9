//! Flat result records and their CSV / JSON / scatter outputs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Role;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const SCATTER_CSV: &str = "scatter.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

impl From<&MetricReport> for Scores {
    fn from(r: &MetricReport) -> Self {
        Scores {
            ece: r.ece,
            brier: r.brier,
            nll: r.nll,
            balanced_accuracy: r.balanced_accuracy,
            accuracy: r.accuracy,
            mean_confidence: r.mean_confidence,
        }
    }
}

impl Scores {
    pub fn get(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "ece" => self.ece,
            "brier" => self.brier,
            "nll" => self.nll,
            "balanced_accuracy" => self.balanced_accuracy,
            "accuracy" => self.accuracy,
            "mean_confidence" => self.mean_confidence,
            _ => return None,
        })
    }
}

/// One grid cell evaluated on one split. Failed cells carry `error` and no
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub split: String,
    pub role: String,
    pub loss: String,
    pub calibrator: String,
    pub ensemble: String,
    pub seed: u64,
    pub scores: Option<Scores>,
    pub error: Option<String>,
}

impl ResultRow {
    /// Grid configuration this row belongs to, without the split.
    pub fn config_key(&self) -> (String, String, String, String, u64) {
        (
            self.dataset.clone(),
            self.loss.clone(),
            self.calibrator.clone(),
            self.ensemble.clone(),
            self.seed,
        )
    }

    pub fn is_shifted(&self) -> bool {
        self.role == Role::ShiftedTest.as_str()
    }

    pub fn is_id(&self) -> bool {
        self.role == Role::IdTest.as_str()
    }
}

const HEADER: [&str; 14] = [
    "dataset",
    "split",
    "role",
    "loss",
    "calibrator",
    "ensemble",
    "seed",
    "ece",
    "brier",
    "nll",
    "balanced_accuracy",
    "accuracy",
    "mean_confidence",
    "error",
];

pub fn write_results_csv(rows: &[ResultRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in rows {
        let mut rec = vec![
            r.dataset.clone(),
            r.split.clone(),
            r.role.clone(),
            r.loss.clone(),
            r.calibrator.clone(),
            r.ensemble.clone(),
            r.seed.to_string(),
        ];
        match &r.scores {
            Some(s) => rec.extend(
                [s.ece, s.brier, s.nll, s.balanced_accuracy, s.accuracy, s.mean_confidence].map(|v| v.to_string()),
            ),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_results_csv(reader: impl Read) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(HEADER) {
        return Err(Error::invalid("unexpected results.csv header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).unwrap_or("").to_string();
        let parse = |k: usize| -> Result<f64> {
            field(k).parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad {} value {:?}", HEADER[k], field(k)),
            })
        };
        let scores = if field(7).is_empty() {
            None
        } else {
            Some(Scores {
                ece: parse(7)?,
                brier: parse(8)?,
                nll: parse(9)?,
                balanced_accuracy: parse(10)?,
                accuracy: parse(11)?,
                mean_confidence: parse(12)?,
            })
        };
        let error = Some(field(13)).filter(|e| !e.is_empty());
        rows.push(ResultRow {
            dataset: field(0),
            split: field(1),
            role: field(2),
            loss: field(3),
            calibrator: field(4),
            ensemble: field(5),
            seed: field(6).parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad seed {:?}", field(6)),
            })?,
            scores,
            error,
        });
    }
    Ok(rows)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    read_results_csv(fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// ID metric against the mean shifted metric for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub dataset: String,
    pub loss: String,
    pub calibrator: String,
    pub ensemble: String,
    pub seed: u64,
    pub id_ece: Option<f64>,
    pub shifted_ece: Option<f64>,
    pub id_brier: Option<f64>,
    pub shifted_brier: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One entry per configuration, in order of first appearance.
pub fn scatter(rows: &[ResultRow]) -> Vec<ScatterRow> {
    let mut keys = Vec::new();
    for r in rows {
        let k = r.config_key();
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.config_key() == k).collect();
            let pick = |shifted: bool, f: fn(&Scores) -> f64| {
                let v: Vec<f64> = group
                    .iter()
                    .filter(|r| if shifted { r.is_shifted() } else { r.is_id() })
                    .filter_map(|r| r.scores.as_ref().map(f))
                    .collect();
                mean(&v)
            };
            ScatterRow {
                id_ece: pick(false, |s| s.ece),
                shifted_ece: pick(true, |s| s.ece),
                id_brier: pick(false, |s| s.brier),
                shifted_brier: pick(true, |s| s.brier),
                dataset: k.0,
                loss: k.1,
                calibrator: k.2,
                ensemble: k.3,
                seed: k.4,
            }
        })
        .collect()
}

pub fn write_scatter_csv(rows: &[ScatterRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "dataset",
        "loss",
        "calibrator",
        "ensemble",
        "seed",
        "id_ece",
        "shifted_ece",
        "id_brier",
        "shifted_brier",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.loss.clone(),
            r.calibrator.clone(),
            r.ensemble.clone(),
            r.seed.to_string(),
            opt(r.id_ece),
            opt(r.shifted_ece),
            opt(r.id_brier),
            opt(r.shifted_brier),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes `results.csv`, `results.json` and `scatter.csv` into `dir`.
pub fn emit_report(rows: &[ResultRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::EmptySet);
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map(|f| (p.clone(), f)).map_err(|e| Error::io(&p, e))
    };
    let (csv_path, f) = create(RESULTS_CSV)?;
    write_results_csv(rows, f)?;
    let (json_path, mut f) = create(RESULTS_JSON)?;
    serde_json::to_writer_pretty(&mut f, rows)?;
    f.write_all(b"\n").map_err(|e| Error::io(&json_path, e))?;
    let (scatter_path, f) = create(SCATTER_CSV)?;
    write_scatter_csv(&scatter(rows), f)?;
    Ok(vec![csv_path, json_path, scatter_path])
}
