//! Post-hoc calibrators with a uniform fit/apply contract.
//!
//! | Method  | Fit target                         | Accuracy-preserving |
//! |---------|------------------------------------|---------------------|
//! | TS      | soft-target NLL over `T`           | yes                 |
//! | ETS     | TS, then NLL over mixture weights  | yes                 |
//! | IRM     | isotonic top-label confidence      | yes                 |
//! | IROVa   | isotonic per class, renormalised   | no                  |
//! | IROVaTS | IROVa on top of ETS                | no                  |
//! | EBS     | MSE over energy-dependent `T(z)`   | yes                 |
//!
//! Every calibrator works row by row through [`RowCalibrator`]. The
//! `scale` argument multiplies the calibrator's own temperature (or divides
//! the logits for non-temperature methods); it is how the density-aware
//! wrapper in [`crate::dac`] composes with any base.

mod energy;
mod isotonic;
mod isotonic_calibrators;
mod optimize;
mod temperature;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use energy::{ebs_mse, energy, fit_ebs, fit_gaussian, EnergyCalibrator, Gaussian};
pub use isotonic::{pava, IsotonicMap};
pub use isotonic_calibrators::{
    fit_irm, fit_irova, fit_irovats, irm_regression_inputs, IrovaTs, OneVsAllIsotonic,
    TopLabelIsotonic,
};
pub use optimize::{minimize_scalar, GOLDEN_TOLERANCE};
pub(crate) use optimize::coordinate_descent;
pub use temperature::{
    fit_ets, fit_ts, temperature_nll, EnsembleTemperatureScaler, TemperatureScaler,
};

use crate::dac::DacModel;
use crate::error::{Error, Result};
use crate::metrics::{argmax, check_finite, softmax_into, ProbMatrix, SIMPLEX_TOLERANCE};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;

pub(crate) fn clamp_temperature(t: f64) -> f64 {
    if t.is_nan() {
        T_MIN
    } else {
        t.clamp(T_MIN, T_MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Id,
    Ood,
}

/// Calibration data: logits, per-row targets and origin flags.
///
/// ID rows carry probability-vector targets (one-hot for hard labels). OOD
/// rows carry either the uniform vector or the zero vector, depending on
/// the exposure convention. `embeddings` holds zero or more layers, each
/// with one row per calibration row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    logits: Array2<f64>,
    targets: Array2<f64>,
    origin: Vec<Origin>,
    embeddings: Vec<Array2<f64>>,
}

impl CalibSet {
    pub fn new(
        logits: Array2<f64>,
        targets: Array2<f64>,
        origin: Vec<Origin>,
        embeddings: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let n = logits.nrows();
        if targets.dim() != logits.dim() || origin.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "logits {:?}, targets {:?}, {} origin flags",
                logits.dim(),
                targets.dim(),
                origin.len()
            )));
        }
        if logits.ncols() < 2 {
            return Err(Error::invalid("calibration needs at least two classes"));
        }
        if let Some(layer) = embeddings.iter().find(|e| e.nrows() != n) {
            return Err(Error::DimensionMismatch(format!(
                "embedding layer with {} rows for {n} calibration rows",
                layer.nrows()
            )));
        }
        if !origin.contains(&Origin::Id) {
            return Err(Error::invalid("calibration set has no ID rows"));
        }
        check_finite(logits.view())?;
        for (i, t) in targets.rows().into_iter().enumerate() {
            let s: f64 = t.sum();
            let zero_ok = origin[i] == Origin::Ood && s == 0.0;
            if t.iter().any(|&v| !(v >= 0.0)) || (!zero_ok && (s - 1.0).abs() > SIMPLEX_TOLERANCE) {
                return Err(Error::InvalidRecord {
                    index: i,
                    reason: "target row must be a probability vector".into(),
                });
            }
        }
        Ok(CalibSet {
            logits,
            targets,
            origin,
            embeddings,
        })
    }

    /// ID-only set with one-hot targets.
    pub fn from_labels(logits: Array2<f64>, labels: &[usize]) -> Result<Self> {
        let c = logits.ncols();
        let targets = crate::data::one_hot(labels, c)?;
        let n = logits.nrows();
        CalibSet::new(logits, targets, vec![Origin::Id; n], Vec::new())
    }

    /// ID-only set from labelled records; embeddings become one layer when
    /// every record has one.
    pub fn from_eval_set(set: &crate::data::EvalSet) -> Result<Self> {
        let labels = set
            .labels()
            .ok_or_else(|| Error::invalid(format!("{} records must be labelled", set.role)))?;
        let mut cs = CalibSet::from_labels(set.logits(), &labels)?;
        if let Some(e) = set.embeddings() {
            cs.embeddings.push(e);
        }
        Ok(cs)
    }

    pub fn with_embeddings(mut self, layers: Vec<Array2<f64>>) -> Result<Self> {
        if let Some(layer) = layers.iter().find(|e| e.nrows() != self.len()) {
            return Err(Error::DimensionMismatch(format!(
                "embedding layer with {} rows for {} calibration rows",
                layer.nrows(),
                self.len()
            )));
        }
        self.embeddings = layers;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn origin(&self) -> &[Origin] {
        &self.origin
    }

    pub fn embeddings(&self) -> &[Array2<f64>] {
        &self.embeddings
    }

    pub fn has_ood(&self) -> bool {
        self.origin.contains(&Origin::Ood)
    }

    /// Rows selected by `keep`, in order. Embedding layers follow.
    pub fn select(&self, keep: impl Fn(usize, Origin) -> bool) -> Result<CalibSet> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i, self.origin[i])).collect();
        let ax = ndarray::Axis(0);
        CalibSet::new(
            self.logits.select(ax, &idx),
            self.targets.select(ax, &idx),
            idx.iter().map(|&i| self.origin[i]).collect(),
            self.embeddings.iter().map(|e| e.select(ax, &idx)).collect(),
        )
    }

    pub fn id_only(&self) -> Result<CalibSet> {
        self.select(|_, o| o == Origin::Id)
    }

    /// Hard label of an ID row (argmax of its target).
    pub(crate) fn label(&self, i: usize) -> usize {
        argmax(&self.targets.row(i).to_vec())
    }
}

/// Row-level probability map shared by all calibrators.
pub trait RowCalibrator {
    /// Writes the calibrated probabilities of one logit row into `out`,
    /// with the calibrator's temperature multiplied by `scale`.
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]);

    fn accuracy_preserving(&self) -> bool;

    fn apply(&self, logits: ArrayView2<'_, f64>) -> Result<ProbMatrix> {
        apply_rows(logits, |z, out| self.calibrate_row(z, 1.0, out))
    }
}

pub(crate) fn apply_rows(
    logits: ArrayView2<'_, f64>,
    mut row_fn: impl FnMut(&[f64], &mut [f64]),
) -> Result<ProbMatrix> {
    check_finite(logits)?;
    let mut out = Array2::zeros(logits.raw_dim());
    let mut z = vec![0.0; logits.ncols()];
    for (src, mut dst) in logits.rows().into_iter().zip(out.rows_mut()) {
        z.iter_mut().zip(src.iter()).for_each(|(a, &b)| *a = b);
        row_fn(&z, dst.as_slice_mut().expect("contiguous row"));
    }
    Ok(ProbMatrix::from_rows_unchecked(out))
}

/// `z / scale` into a fresh vector, the hook non-temperature calibrators
/// use for an externally supplied temperature.
pub(crate) fn scaled_logits(z: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return z.to_vec();
    }
    let s = clamp_temperature(scale);
    z.iter().map(|v| v / s).collect()
}

/// Plain softmax; the "no calibration" baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Identity;

impl RowCalibrator for Identity {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        softmax_into(z, 1.0 / clamp_temperature(scale), out);
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

/// Fitted state of any calibrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "params", rename_all = "snake_case")]
pub enum Model {
    Identity,
    Ts(TemperatureScaler),
    Ets(EnsembleTemperatureScaler),
    Irm(TopLabelIsotonic),
    Irova(OneVsAllIsotonic),
    IrovaTs(IrovaTs),
    Ebs(EnergyCalibrator),
    Dac(Box<DacModel>),
}

impl Model {
    fn inner(&self) -> &dyn RowCalibrator {
        match self {
            Model::Identity => &Identity,
            Model::Ts(m) => m,
            Model::Ets(m) => m,
            Model::Irm(m) => m,
            Model::Irova(m) => m,
            Model::IrovaTs(m) => m,
            Model::Ebs(m) => m,
            Model::Dac(m) => m.as_ref(),
        }
    }
}

/// A fitted calibrator with its display name (e.g. `TS+OOD`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub name: String,
    #[serde(flatten)]
    pub model: Model,
}

impl Calibrator {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        Calibrator {
            name: name.into(),
            model,
        }
    }

    pub fn identity() -> Self {
        Calibrator::new("none", Model::Identity)
    }

    pub fn accuracy_preserving(&self) -> bool {
        self.model.inner().accuracy_preserving()
    }

    /// Calibrated probabilities. `embeddings` (one matrix per layer) is
    /// only consulted by the density-aware wrapper.
    pub fn apply(&self, logits: ArrayView2<'_, f64>, embeddings: &[Array2<f64>]) -> Result<ProbMatrix> {
        match &self.model {
            Model::Dac(d) => d.apply(logits, embeddings),
            m => m.inner().apply(logits),
        }
    }

    pub(crate) fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        self.model.inner().calibrate_row(z, scale, out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl fmt::Display for Calibrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Calibration method selector used by the CLI, the OOD wrapper, the
/// ensemble strategies and the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    None,
    Ts,
    Ets,
    Irm,
    Irova,
    #[serde(rename = "irovats")]
    IrovaTs,
    Ebs,
}

impl Method {
    pub fn display_name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ts => "TS",
            Method::Ets => "ETS",
            Method::Irm => "IRM",
            Method::Irova => "IROVa",
            Method::IrovaTs => "IROVaTS",
            Method::Ebs => "EBS",
        }
    }

    /// Name of a calibrator fitted with or without semantic OOD rows.
    /// EBS without OOD is `EBS-`; other methods gain a `+OOD` suffix.
    pub fn label(self, ood: bool) -> String {
        match (self, ood) {
            (Method::Ebs, false) => "EBS-".to_string(),
            (Method::Ebs, true) => "EBS".to_string(),
            (m, false) => m.display_name().to_string(),
            (m, true) => format!("{}+OOD", m.display_name()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "raw" | "identity" => Ok(Method::None),
            "ts" => Ok(Method::Ts),
            "ets" => Ok(Method::Ets),
            "irm" => Ok(Method::Irm),
            "irova" => Ok(Method::Irova),
            "irovats" => Ok(Method::IrovaTs),
            "ebs" | "ebs-" | "ebs_minus" => Ok(Method::Ebs),
            _ => Err(Error::UnknownMethod(s.to_string())),
        }
    }
}

/// Fits `method` on `calib`. OOD rows, when present, take part in the fit
/// (EBS uses them for its incorrect/OOD density); the returned name
/// records the exposure.
pub fn fit_method(method: Method, calib: &CalibSet) -> Result<Calibrator> {
    let ood = calib.has_ood();
    let model = match method {
        Method::None => Model::Identity,
        Method::Ts => Model::Ts(fit_ts(calib)?),
        Method::Ets => Model::Ets(fit_ets(calib)?),
        Method::Irm => Model::Irm(fit_irm(calib)?),
        Method::Irova => Model::Irova(fit_irova(calib)?),
        Method::IrovaTs => Model::IrovaTs(fit_irovats(calib)?),
        Method::Ebs => Model::Ebs(fit_ebs(calib, ood)?),
    };
    let ood = ood && method != Method::None;
    Ok(Calibrator::new(method.label(ood), model))
}
