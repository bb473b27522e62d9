//! Calibration and performance metrics: ECE with its reliability table,
//! Brier score, negative log-likelihood and balanced accuracy.
//!
//! All reductions run sequentially in sample order so results are
//! reproducible bit for bit.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const LOG_FLOOR: f64 = 1e-12;
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Row-stochastic matrix of predicted class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            if !is_simplex_row(row) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: "probability row is not in the simplex".into(),
                });
            }
        }
        Ok(ProbMatrix(probs))
    }

    /// Wraps rows the caller has produced as simplex rows by construction.
    pub(crate) fn from_rows_unchecked(probs: Array2<f64>) -> Self {
        debug_assert!(probs.rows().into_iter().all(is_simplex_row));
        ProbMatrix(probs)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.0.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.0
            .rows()
            .into_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

pub fn is_simplex_row(row: ArrayView1<'_, f64>) -> bool {
    row.iter().all(|&p| p.is_finite() && p >= 0.0)
        && (row.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax into `out`. No validation.
pub(crate) fn softmax_into(z: &[f64], scale: f64, out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - m) * scale).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, 1.0, &mut out);
    Ok(out)
}

/// Row-wise `softmax(z / temperature)`.
pub fn softmax_rows(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<ProbMatrix> {
    check_finite(logits)?;
    let mut out = Array2::zeros(logits.raw_dim());
    for (z, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
        let z = z.to_vec();
        softmax_into(&z, 1.0 / temperature, o.as_slice_mut().expect("contiguous row"));
    }
    Ok(ProbMatrix::from_rows_unchecked(out))
}

pub(crate) fn check_finite(m: ArrayView2<'_, f64>) -> Result<()> {
    match m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((i, _), _)) => Err(Error::NonFinite(format!("logits row {i}"))),
        None => Ok(()),
    }
}

fn check_labels(probs: &ProbMatrix, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    if let Some(i) = labels.iter().position(|&y| y >= probs.ncols()) {
        return Err(Error::InvalidRecord {
            index: i,
            reason: format!("label {} out of range", labels[i]),
        });
    }
    Ok(())
}

fn bin_index(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).floor() as usize).min(bins - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence; `None` for an empty bin.
    pub conf: Option<f64>,
    /// Accuracy; `None` for an empty bin.
    pub acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub total: usize,
    pub bins: Vec<BinStat>,
}

impl ReliabilityTable {
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        let mut ece = 0.0;
        for b in &self.bins {
            if let (Some(conf), Some(acc)) = (b.conf, b.acc) {
                ece += (b.count as f64 / n) * (acc - conf).abs();
            }
        }
        ece
    }

    /// CSV with header `bin_lo,bin_hi,count,conf,acc`; empty bins leave
    /// `conf` and `acc` blank.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_lo", "bin_hi", "count", "conf", "acc"])?;
        for b in &self.bins {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                opt(b.conf),
                opt(b.acc),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<reliability csv>", e))
    }
}

pub fn reliability_bins(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<ReliabilityTable> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    check_labels(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (row, &y) in probs.view().rows().into_iter().zip(labels) {
        let row = row.to_vec();
        let pred = argmax(&row);
        let c = row[pred];
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        correct[b] += usize::from(pred == y);
    }
    let bins_out = (0..bins)
        .map(|m| {
            let n = count[m];
            let (conf, acc) = if n == 0 {
                (None, None)
            } else {
                (Some(conf_sum[m] / n as f64), Some(correct[m] as f64 / n as f64))
            };
            BinStat {
                lo: m as f64 / bins as f64,
                hi: (m + 1) as f64 / bins as f64,
                count: n,
                conf,
                acc,
            }
        })
        .collect();
    Ok(ReliabilityTable {
        total: labels.len(),
        bins: bins_out,
    })
}

/// Expected calibration error over `bins` equal-width top-label
/// confidence bins `[m/M, (m+1)/M)`, the last bin closed at 1.
pub fn ece(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be at least 1"));
    }
    check_labels(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.0.row(i).to_vec();
        let pred = argmax(&row);
        let b = bin_index(row[pred], bins);
        count[b] += 1;
        conf_sum[b] += row[pred];
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for m in 0..bins {
        if count[m] > 0 {
            let k = count[m] as f64;
            total += (k / n) * (correct[m] as f64 / k - conf_sum[m] / k).abs();
        }
    }
    Ok(total)
}

pub fn brier(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let mut total = 0.0;
    for (row, &y) in probs.view().rows().into_iter().zip(labels) {
        for (k, &p) in row.iter().enumerate() {
            let t = if k == y { 1.0 } else { 0.0 };
            total += (p - t) * (p - t);
        }
    }
    Ok(total / labels.len() as f64)
}

pub fn nll(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = probs
        .view()
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy against probability-vector targets (rows may also be the
/// zero vector, which contributes nothing).
pub fn nll_soft(probs: &ProbMatrix, targets: ArrayView2<'_, f64>) -> Result<f64> {
    if probs.view().dim() != targets.dim() {
        return Err(Error::DimensionMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.view().dim(),
            targets.dim()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::EmptySet);
    }
    let mut total = 0.0;
    for (p, t) in probs.view().rows().into_iter().zip(targets.rows()) {
        for (&pk, &tk) in p.iter().zip(t.iter()) {
            if tk != 0.0 {
                total -= tk * pk.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / probs.nrows() as f64)
}

/// Unweighted mean of per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let c = probs.ncols();
    let mut support = vec![0usize; c];
    let mut hits = vec![0usize; c];
    for (pred, &y) in probs.predictions().into_iter().zip(labels) {
        support[y] += 1;
        hits[y] += usize::from(pred == y);
    }
    let present: Vec<usize> = (0..c).filter(|&k| support[k] > 0).collect();
    let sum: f64 = present
        .iter()
        .map(|&k| hits[k] as f64 / support[k] as f64)
        .sum();
    Ok(sum / present.len() as f64)
}

pub fn accuracy(probs: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = probs
        .predictions()
        .into_iter()
        .zip(labels)
        .filter(|(p, y)| p == *y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub reliability: ReliabilityTable,
}

pub fn evaluate(probs: &ProbMatrix, labels: &[usize], bins: usize) -> Result<MetricReport> {
    let reliability = reliability_bins(probs, labels, bins)?;
    let conf = probs.confidences();
    Ok(MetricReport {
        ece: ece(probs, labels, bins)?,
        brier: brier(probs, labels)?,
        nll: nll(probs, labels)?,
        balanced_accuracy: balanced_accuracy(probs, labels)?,
        accuracy: accuracy(probs, labels)?,
        mean_confidence: conf.iter().sum::<f64>() / conf.len() as f64,
        reliability,
    })
}

/// Mean over rows of the top-label confidence.
pub fn mean_confidence(probs: &ProbMatrix) -> f64 {
    let c = probs.confidences();
    c.iter().sum::<f64>() / c.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    /// Binary rows whose top-label confidence is `c` on class 0.
    fn binary(confs: &[f64]) -> ProbMatrix {
        let mut m = Array2::zeros((confs.len(), 2));
        for (i, &c) in confs.iter().enumerate() {
            m[[i, 0]] = c;
            m[[i, 1]] = 1.0 - c;
        }
        ProbMatrix::new(m).unwrap()
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        let p = softmax(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.2689, epsilon = 1e-4);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ece_perfect_and_hand_examples() {
        let perfect = ProbMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(ece(&perfect, &[0, 1], 15).unwrap(), 0.0);

        // confidences 0.9 right, 0.8 wrong, 0.6 right, 0.55 wrong
        let p = binary(&[0.9, 0.8, 0.6, 0.55]);
        let labels = [0, 1, 0, 1];
        assert_abs_diff_eq!(ece(&p, &labels, 2).unwrap(), 0.2125, epsilon = 1e-12);

        let single = binary(&[0.7]);
        assert_abs_diff_eq!(ece(&single, &[0], 15).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn reliability_table_cases() {
        let p = binary(&[0.9, 0.8, 0.6, 0.55]);
        let t = reliability_bins(&p, &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(t.bins[0].count, 0);
        assert_eq!(t.bins[0].conf, None);
        assert_eq!(t.bins[1].count, 4);
        assert_abs_diff_eq!(t.bins[1].conf.unwrap(), 0.7125, epsilon = 1e-12);
        assert_eq!(t.bins[1].acc, Some(0.5));

        let one = reliability_bins(&p, &[0, 1, 0, 1], 1).unwrap();
        assert_eq!(one.bins.len(), 1);
        assert_eq!(one.bins[0].count, 4);
        assert_eq!(one.bins[0].acc, Some(0.5));

        let empty = ProbMatrix::new(Array2::zeros((0, 2))).unwrap();
        assert!(reliability_bins(&empty, &[], 15).is_err());
    }

    #[test]
    fn confidence_one_goes_to_last_bin() {
        let p = binary(&[1.0]);
        let t = reliability_bins(&p, &[0], 10).unwrap();
        assert_eq!(t.bins[9].count, 1);
    }

    #[test]
    fn reliability_csv_format() {
        let p = binary(&[0.9, 0.6]);
        let t = reliability_bins(&p, &[0, 1], 2).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("bin_lo,bin_hi,count,conf,acc"));
        assert_eq!(lines.next(), Some("0,0.5,0,,"));
        assert_eq!(lines.next(), Some("0.5,1,2,0.75,0.5"));
    }

    #[test]
    fn brier_cases() {
        let onehot = ProbMatrix::new(array![[0.0, 1.0]]).unwrap();
        assert_eq!(brier(&onehot, &[1]).unwrap(), 0.0);
        assert_eq!(brier(&onehot, &[0]).unwrap(), 2.0);
        let uni = ProbMatrix::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(brier(&uni, &[0, 1]).unwrap(), 0.5);
        assert!(brier(&uni, &[0]).is_err());
    }

    #[test]
    fn brier_of_uniform_matches_direct_summation() {
        for c in 2..=10usize {
            let p = ProbMatrix::new(Array2::from_elem((c, c), 1.0 / c as f64)).unwrap();
            let labels: Vec<usize> = (0..c).collect();
            let mut direct = 0.0;
            for k in 0..c {
                let t = if k == 0 { 1.0 } else { 0.0 };
                direct += (1.0 / c as f64 - t).powi(2);
            }
            assert_abs_diff_eq!(brier(&p, &labels).unwrap(), direct, epsilon = 1e-12);
            assert_abs_diff_eq!(direct, 1.0 - 1.0 / c as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn nll_cases() {
        let sure = ProbMatrix::new(array![[1.0, 0.0]]).unwrap();
        assert_eq!(nll(&sure, &[0]).unwrap(), 0.0);
        let uni = ProbMatrix::new(Array2::from_elem((1, 4), 0.25)).unwrap();
        assert_abs_diff_eq!(nll(&uni, &[2]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        let half = ProbMatrix::new(array![[0.5, 0.5]]).unwrap();
        let t = array![[0.5, 0.5]];
        assert_abs_diff_eq!(nll_soft(&half, t.view()).unwrap(), 2f64.ln(), epsilon = 1e-12);
        // saturated wrong prediction stays finite
        assert_abs_diff_eq!(nll(&sure, &[1]).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn balanced_accuracy_cases() {
        let p = ProbMatrix::new(array![[0.9, 0.1], [0.2, 0.8]]).unwrap();
        assert_eq!(balanced_accuracy(&p, &[0, 1]).unwrap(), 1.0);
        let p = ProbMatrix::new(array![[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]]).unwrap();
        assert_eq!(balanced_accuracy(&p, &[0, 1, 1]).unwrap(), 0.5);
        assert_eq!(balanced_accuracy(&p, &[0, 0, 0]).unwrap(), 1.0);
        let empty = ProbMatrix::new(Array2::zeros((0, 2))).unwrap();
        assert!(balanced_accuracy(&empty, &[]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    fn probs_and_labels() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
        (2usize..6, 1usize..30).prop_flat_map(|(c, n)| {
            (
                proptest::collection::vec(-6.0f64..6.0, n * c),
                proptest::collection::vec(0..c, n),
            )
                .prop_map(move |(z, y)| {
                    let z = Array2::from_shape_vec((n, c), z).unwrap();
                    (softmax_rows(z.view(), 1.0).unwrap().into_inner(), y)
                })
        })
    }

    proptest! {
        #[test]
        fn ece_matches_table_and_ranges((p, y) in probs_and_labels(), bins in 1usize..20) {
            let p = ProbMatrix::new(p).unwrap();
            let direct = ece(&p, &y, bins).unwrap();
            let table = reliability_bins(&p, &y, bins).unwrap();
            prop_assert_eq!(direct, table.ece());
            prop_assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), y.len());
            prop_assert!((0.0..=1.0).contains(&direct));
            let b = brier(&p, &y).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
            prop_assert!(nll(&p, &y).unwrap() >= 0.0);
        }

        #[test]
        fn softmax_preserves_argmax(z in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = softmax(&z).unwrap();
            prop_assert_eq!(argmax(&p), argmax(&z));
        }

        #[test]
        fn metrics_permutation_invariant((p, y) in probs_and_labels(), shift in 0usize..30) {
            let n = y.len();
            let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let p2 = p.select(Axis(0), &order);
            let y2: Vec<usize> = order.iter().map(|&i| y[i]).collect();
            let (a, b) = (ProbMatrix::new(p).unwrap(), ProbMatrix::new(p2).unwrap());
            prop_assert!((ece(&a, &y, 10).unwrap() - ece(&b, &y2, 10).unwrap()).abs() < 1e-12);
            prop_assert!((brier(&a, &y).unwrap() - brier(&b, &y2).unwrap()).abs() < 1e-12);
            prop_assert!((nll(&a, &y).unwrap() - nll(&b, &y2).unwrap()).abs() < 1e-12);
            prop_assert_eq!(balanced_accuracy(&a, &y).unwrap(), balanced_accuracy(&b, &y2).unwrap());
        }
    }
}
