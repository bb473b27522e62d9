//! Isotonic calibrators: top-label (IRM), one-vs-all (IROVa) and IROVa
//! stacked on ETS (IROVaTS).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::isotonic::IsotonicMap;
use super::temperature::{fit_ets, EnsembleTemperatureScaler};
use super::{scaled_logits, CalibSet, RowCalibrator};
use crate::error::{Error, Result};
use crate::metrics::{argmax, softmax_into, softmax_rows};

/// Relative margin by which the remapped top label must beat the runner-up.
const TOP_MARGIN: f64 = 1e-9;

/// Top-label isotonic map from confidence to expected accuracy.
///
/// At apply time the top-label confidence `c` becomes `c' = map(c)` and the
/// remaining mass `1 - c'` is shared among the other classes in proportion
/// to their original probabilities. `c'` is floored so the original argmax
/// stays the strict row maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLabelIsotonic {
    map: IsotonicMap,
}

impl TopLabelIsotonic {
    pub fn new(map: IsotonicMap) -> Self {
        TopLabelIsotonic { map }
    }

    pub fn map(&self) -> &IsotonicMap {
        &self.map
    }

    fn remap(&self, z: &[f64], probs: &mut [f64]) {
        let c = probs.len();
        let top = argmax(z);
        let conf = probs[top];
        let rest: f64 = probs.iter().enumerate().filter(|&(k, _)| k != top).map(|(_, p)| p).sum();
        let runner_up = probs
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != top)
            .map(|(_, &p)| p)
            .fold(0.0, f64::max);
        // share of the leftover mass taken by the largest other class
        let r = if rest > 0.0 { runner_up / rest } else { 1.0 / (c - 1) as f64 };
        let floor = r / (1.0 + r) * (1.0 + TOP_MARGIN);
        let new_conf = self.map.eval(conf).clamp(0.0, 1.0).max(floor).min(1.0);
        let leftover = 1.0 - new_conf;
        for (k, p) in probs.iter_mut().enumerate() {
            *p = if k == top {
                new_conf
            } else if rest > 0.0 {
                *p * leftover / rest
            } else {
                leftover / (c - 1) as f64
            };
        }
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
    }
}

impl RowCalibrator for TopLabelIsotonic {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let zs = scaled_logits(z, scale);
        softmax_into(&zs, 1.0, out);
        self.remap(&zs, out);
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

/// Inputs of the top-label isotonic fit: softmax confidence of each row and
/// its correctness target, i.e. the target mass on the predicted class
/// (1 or 0 for one-hot rows, `1/C` for uniform OOD rows).
pub fn irm_regression_inputs(calib: &CalibSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let probs = softmax_rows(calib.logits().view(), 1.0)?;
    let mut conf = Vec::with_capacity(calib.len());
    let mut target = Vec::with_capacity(calib.len());
    for (i, (z, p)) in calib.logits().rows().into_iter().zip(probs.view().rows()).enumerate() {
        let top = argmax(&z.to_vec());
        conf.push(p[top]);
        target.push(calib.targets()[[i, top]]);
    }
    Ok((conf, target))
}

pub fn fit_irm(calib: &CalibSet) -> Result<TopLabelIsotonic> {
    if calib.len() < 2 {
        return Err(Error::invalid("IRM needs at least 2 calibration samples"));
    }
    let (conf, target) = irm_regression_inputs(calib)?;
    Ok(TopLabelIsotonic::new(IsotonicMap::fit(&conf, &target)?))
}

/// One isotonic map per class on that class's probability, followed by
/// row renormalisation. Can change the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsAllIsotonic {
    maps: Vec<IsotonicMap>,
}

impl OneVsAllIsotonic {
    pub fn new(maps: Vec<IsotonicMap>) -> Self {
        OneVsAllIsotonic { maps }
    }

    pub fn maps(&self) -> &[IsotonicMap] {
        &self.maps
    }

    /// Fits class `k`'s map on column `k` of `probs` against column `k` of
    /// `targets`.
    pub fn fit_probs(probs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<Self> {
        if probs.dim() != targets.dim() {
            return Err(Error::DimensionMismatch(format!(
                "probabilities {:?} vs targets {:?}",
                probs.dim(),
                targets.dim()
            )));
        }
        if probs.nrows() < 2 {
            return Err(Error::invalid("IROVa needs at least 2 calibration samples"));
        }
        let maps = (0..probs.ncols())
            .map(|k| IsotonicMap::fit(&probs.column(k).to_vec(), &targets.column(k).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(OneVsAllIsotonic { maps })
    }

    /// Remaps each class score in place and renormalises; a row whose
    /// remapped scores sum below 1e-12 becomes uniform.
    pub fn remap_probs(&self, probs: &mut [f64]) {
        for (p, m) in probs.iter_mut().zip(&self.maps) {
            *p = m.eval(*p).max(0.0);
        }
        let s: f64 = probs.iter().sum();
        if s < 1e-12 {
            let u = 1.0 / probs.len() as f64;
            probs.iter_mut().for_each(|p| *p = u);
        } else {
            probs.iter_mut().for_each(|p| *p /= s);
        }
    }
}

impl RowCalibrator for OneVsAllIsotonic {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let zs = scaled_logits(z, scale);
        softmax_into(&zs, 1.0, out);
        self.remap_probs(out);
    }

    fn accuracy_preserving(&self) -> bool {
        false
    }
}

pub fn fit_irova(calib: &CalibSet) -> Result<OneVsAllIsotonic> {
    let probs = softmax_rows(calib.logits().view(), 1.0)?;
    OneVsAllIsotonic::fit_probs(probs.view(), calib.targets().view())
}

/// ETS followed by one-vs-all isotonic maps fitted on the ETS output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrovaTs {
    pub ets: EnsembleTemperatureScaler,
    pub irova: OneVsAllIsotonic,
}

impl RowCalibrator for IrovaTs {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let zs = scaled_logits(z, scale);
        self.ets.calibrate_row(&zs, 1.0, out);
        self.irova.remap_probs(out);
    }

    fn accuracy_preserving(&self) -> bool {
        false
    }
}

pub fn fit_irovats(calib: &CalibSet) -> Result<IrovaTs> {
    let ets = fit_ets(calib)?;
    let probs = ets.apply(calib.logits().view())?;
    let irova = OneVsAllIsotonic::fit_probs(probs.view(), calib.targets().view())?;
    Ok(IrovaTs { ets, irova })
}
