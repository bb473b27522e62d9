//! Friedman omnibus test and Nemenyi post-hoc comparison over a
//! blocks × treatments matrix of metric values (lower is better).

use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::report::ResultRow;
use crate::error::{Error, Result};

/// Critical values `q_{0.05}` of the Nemenyi test for `K = 2..=20`
/// (studentized range divided by √2).
const NEMENYI_Q05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354,
    3.391, 3.426, 3.458, 3.489, 3.517, 3.544,
];

/// Within-row ranks, 1 = smallest value, ties share their average rank.
pub fn rank_rows(values: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut ranks = Array2::zeros(values.raw_dim());
    for (row, mut out) in values.rows().into_iter().zip(ranks.rows_mut()) {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
    }
    ranks
}

fn mean_ranks(values: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let (b, k) = values.dim();
    if b < 2 || k < 2 {
        return Err(Error::invalid(format!(
            "rank tests need at least 2 blocks and 2 treatments, got {b}×{k}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric matrix".into()));
    }
    let r = rank_rows(values);
    Ok((0..k).map(|j| r.column(j).sum() / b as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub p_value: f64,
    pub mean_ranks: Vec<f64>,
}

/// `χ²_F = 12B / (K(K+1)) · Σ_j (R̄_j − (K+1)/2)²` with a χ²(K−1) p-value.
pub fn friedman_test(values: ArrayView2<'_, f64>) -> Result<FriedmanResult> {
    let mean_ranks = mean_ranks(values)?;
    let (b, k) = (values.nrows() as f64, values.ncols() as f64);
    let centre = (k + 1.0) / 2.0;
    let ss: f64 = mean_ranks.iter().map(|r| (r - centre).powi(2)).sum();
    let chi2 = 12.0 * b / (k * (k + 1.0)) * ss;
    let dist = ChiSquared::new(k - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(FriedmanResult {
        chi2,
        p_value: dist.sf(chi2),
        mean_ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NemenyiResult {
    pub critical_difference: f64,
    pub mean_ranks: Vec<f64>,
    /// `significant[i][j]` iff `|R̄_i − R̄_j| > CD`.
    pub significant: Vec<Vec<bool>>,
}

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    if (alpha - 0.05).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "only α = 0.05 critical values are available, got {alpha}"
        )));
    }
    if !(2..=20).contains(&k) {
        return Err(Error::invalid(format!(
            "Nemenyi critical values cover 2 to 20 treatments, got {k}"
        )));
    }
    Ok(NEMENYI_Q05[k - 2])
}

/// Pairwise comparison with `CD = q_α · sqrt(K(K+1) / (6B))`.
pub fn nemenyi_test(values: ArrayView2<'_, f64>, alpha: f64) -> Result<NemenyiResult> {
    let (b, k) = values.dim();
    let q = nemenyi_q(k, alpha)?;
    let mean_ranks = mean_ranks(values)?;
    let cd = q * ((k * (k + 1)) as f64 / (6.0 * b as f64)).sqrt();
    let significant = (0..k)
        .map(|i| (0..k).map(|j| (mean_ranks[i] - mean_ranks[j]).abs() > cd).collect())
        .collect();
    Ok(NemenyiResult {
        critical_difference: cd,
        mean_ranks,
        significant,
    })
}

/// Which split a metric matrix summarises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Id,
    /// Mean over all shifted splits.
    Shifted,
}

/// Blocks × treatments metric matrix built from report rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricMatrix {
    /// `loss/calibrator/ensemble`.
    pub treatments: Vec<String>,
    /// `dataset/seed`.
    pub blocks: Vec<String>,
    pub values: Array2<f64>,
}

/// Collects `metric` per (dataset, seed) block and (loss, calibrator,
/// ensemble) treatment. Blocks missing any treatment are dropped; failed
/// rows are ignored.
pub fn metric_matrix(rows: &[ResultRow], metric: &str, split: SplitFilter) -> Result<MetricMatrix> {
    let mut treatments: Vec<String> = Vec::new();
    let mut blocks: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for r in rows {
        let keep = match split {
            SplitFilter::Id => r.is_id(),
            SplitFilter::Shifted => r.is_shifted(),
        };
        let Some(scores) = r.scores.as_ref().filter(|_| keep) else { continue };
        let v = scores
            .get(metric)
            .ok_or_else(|| Error::invalid(format!("unknown metric: {metric}")))?;
        let t = format!("{}/{}/{}", r.loss, r.calibrator, r.ensemble);
        let b = format!("{}/{}", r.dataset, r.seed);
        let ti = treatments.iter().position(|x| *x == t).unwrap_or_else(|| {
            treatments.push(t);
            treatments.len() - 1
        });
        let bi = blocks.iter().position(|x| *x == b).unwrap_or_else(|| {
            blocks.push(b);
            blocks.len() - 1
        });
        cells.push((bi, ti, v));
    }
    let (nb, nt) = (blocks.len(), treatments.len());
    let mut sum = Array2::<f64>::zeros((nb, nt));
    let mut count = Array2::<usize>::zeros((nb, nt));
    for (b, t, v) in cells {
        sum[[b, t]] += v;
        count[[b, t]] += 1;
    }
    let complete: Vec<usize> = (0..nb).filter(|&b| count.row(b).iter().all(|&c| c > 0)).collect();
    let values = Array2::from_shape_fn((complete.len(), nt), |(i, t)| {
        let b = complete[i];
        sum[[b, t]] / count[[b, t]] as f64
    });
    Ok(MetricMatrix {
        treatments,
        blocks: complete.iter().map(|&b| blocks[b].clone()).collect(),
        values,
    })
}
