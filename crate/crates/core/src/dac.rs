//! Density-aware calibration: a plug-in that rescales any base
//! calibrator's temperature per sample from k-nearest-neighbour distances
//! in embedding space.
//!
//! This is a reconstruction, not the original method's exact form. For
//! embedding layers `l = 1..L` with mean k-NN distance `d_l(x)` to the ID
//! calibration embeddings (normalised by its calibration-set mean), the
//! per-sample temperature becomes
//!
//! ```text
//! t(x) = t_base(z) · softplus(Σ_l w_l·d_l(x) + b) / softplus(b0)
//! ```
//!
//! with `b0 = ln(e - 1)` (so `softplus(b0) = 1`). At `w = 0, b = b0` the
//! model is exactly its base. `w` and `b` are fitted by coordinate
//! golden-section passes on calibration NLL, starting from that identity
//! point, so fitting never makes the calibration NLL worse than the base.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::calibrators::{
    apply_rows, coordinate_descent, CalibSet, Calibrator, RowCalibrator, GOLDEN_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::metrics::{ProbMatrix, LOG_FLOOR};

pub const DEFAULT_K: usize = 10;
const WEIGHT_BOUND: f64 = 5.0;

/// `ln(e - 1)`, the bias at which `softplus` equals 1.
pub fn neutral_bias() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of_smallest(mut d: Vec<f64>, k: usize) -> f64 {
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        d.truncate(k);
    }
    d.sort_by(f64::total_cmp);
    d.iter().map(|v| v.sqrt()).sum::<f64>() / k as f64
}

/// Mean Euclidean distance from `query` to its `k` nearest reference rows
/// (exact, brute force).
pub fn knn_mean_distance(query: ArrayView1<'_, f64>, reference: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    if query.len() != reference.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query of width {} against references of width {}",
            query.len(),
            reference.ncols()
        )));
    }
    if k == 0 || k > reference.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} with {} reference rows",
            reference.nrows()
        )));
    }
    let d = reference.rows().into_iter().map(|r| sq_dist(query, r)).collect();
    Ok(mean_of_smallest(d, k))
}

/// Leave-one-out k-NN distances of every reference row to the others.
fn loo_distances(reference: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    let m = reference.nrows();
    if k == 0 || k > m.saturating_sub(1) {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} available leave-one-out references",
            m.saturating_sub(1)
        )));
    }
    Ok((0..m)
        .map(|i| {
            let q = reference.row(i);
            let d = reference
                .rows()
                .into_iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| sq_dist(q, r))
                .collect();
            mean_of_smallest(d, k)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacModel {
    pub base: Calibrator,
    pub k: usize,
    /// ID calibration embeddings, one matrix per layer.
    pub references: Vec<Array2<f64>>,
    /// Per-layer normaliser: mean leave-one-out distance on the calibration set.
    pub feature_scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DacModel {
    /// An unfitted wrapper (`w = 0`), extensionally equal to `base`.
    pub fn identity(base: Calibrator, references: Vec<Array2<f64>>, k: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("DAC needs at least one embedding layer"));
        }
        let mut feature_scale = Vec::with_capacity(references.len());
        for r in &references {
            let d = loo_distances(r.view(), k)?;
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            feature_scale.push(if mean > 0.0 { mean } else { 1.0 });
        }
        Ok(DacModel {
            base,
            k,
            weights: vec![0.0; references.len()],
            references,
            feature_scale,
            bias: neutral_bias(),
        })
    }

    fn scale_for(&self, features: &[f64], weights: &[f64], bias: f64) -> f64 {
        let mut a = bias;
        for ((d, w), s) in features.iter().zip(weights).zip(&self.feature_scale) {
            a += w * d / s;
        }
        softplus(a) / softplus(neutral_bias())
    }

    /// Temperature multiplier for a row with raw distance features.
    pub fn temperature_scale(&self, features: &[f64]) -> f64 {
        self.scale_for(features, &self.weights, self.bias)
    }

    pub fn features(&self, embeddings: &[Array2<f64>], row: usize) -> Result<Vec<f64>> {
        self.references
            .iter()
            .zip(embeddings)
            .map(|(r, e)| knn_mean_distance(e.row(row), r.view(), self.k))
            .collect()
    }

    pub fn apply(&self, logits: ArrayView2<'_, f64>, embeddings: &[Array2<f64>]) -> Result<ProbMatrix> {
        if embeddings.len() != self.references.len() {
            return Err(Error::invalid(format!(
                "DAC needs {} embedding layer(s), got {}",
                self.references.len(),
                embeddings.len()
            )));
        }
        if let Some(e) = embeddings.iter().find(|e| e.nrows() != logits.nrows()) {
            return Err(Error::DimensionMismatch(format!(
                "{} embedding rows for {} logit rows",
                e.nrows(),
                logits.nrows()
            )));
        }
        let scales = (0..logits.nrows())
            .map(|i| Ok(self.temperature_scale(&self.features(embeddings, i)?)))
            .collect::<Result<Vec<f64>>>()?;
        let mut row = 0;
        apply_rows(logits, |z, out| {
            self.base.calibrate_row(z, scales[row], out);
            row += 1;
        })
    }
}

impl RowCalibrator for DacModel {
    /// Without embeddings only the base map is available; `scale` passes
    /// straight through.
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        self.base.calibrate_row(z, scale, out)
    }

    fn accuracy_preserving(&self) -> bool {
        self.base.accuracy_preserving()
    }
}

/// Fits the distance weights and bias for `base` on the ID rows of `calib`,
/// whose embedding layers also serve as the neighbour references.
pub fn fit_dac(base: Calibrator, calib: &CalibSet, k: usize) -> Result<DacModel> {
    let id = calib.id_only()?;
    if id.embeddings().is_empty() {
        return Err(Error::invalid("DAC needs embeddings on every calibration row"));
    }
    let references: Vec<Array2<f64>> = id.embeddings().to_vec();
    let mut model = DacModel::identity(base, references, k)?;

    let layers = model.references.len();
    let features: Vec<Vec<f64>> = {
        let per_layer = model
            .references
            .iter()
            .map(|r| loo_distances(r.view(), k))
            .collect::<Result<Vec<_>>>()?;
        (0..id.len()).map(|i| per_layer.iter().map(|d| d[i]).collect()).collect()
    };

    let c = id.class_count();
    let objective = |params: &[f64]| -> f64 {
        let (w, b) = params.split_at(layers);
        let mut out = vec![0.0; c];
        let mut total = 0.0;
        for (i, feat) in features.iter().enumerate() {
            let s = model.scale_for(feat, w, b[0]);
            let z = id.logits().row(i);
            model.base.calibrate_row(z.as_slice().expect("contiguous"), s, &mut out);
            for (p, t) in out.iter().zip(id.targets().row(i).iter()) {
                if *t != 0.0 {
                    total -= t * p.max(LOG_FLOOR).ln();
                }
            }
        }
        total / features.len() as f64
    };

    let b0 = neutral_bias();
    let mut start = vec![0.0; layers];
    start.push(b0);
    let mut bounds = vec![(-WEIGHT_BOUND, WEIGHT_BOUND); layers];
    bounds.push((b0 - WEIGHT_BOUND, b0 + WEIGHT_BOUND));
    let (params, _) = coordinate_descent(objective, start, &bounds, GOLDEN_TOLERANCE, 30)?;
    model.weights = params[..layers].to_vec();
    model.bias = params[layers];
    Ok(model)
}

/// Wraps a fitted calibrator into a `Calibrator` named `<base>+DAC`.
pub fn fit_dac_calibrator(base: Calibrator, calib: &CalibSet, k: usize) -> Result<Calibrator> {
    let name = format!("{}+DAC", base.name);
    let model = fit_dac(base, calib, k)?;
    Ok(Calibrator::new(name, crate::calibrators::Model::Dac(Box::new(model))))
}
