//! Training-time calibration losses with analytic gradients, and a small
//! full-batch linear-softmax trainer to exercise them end to end.
//!
//! All losses are means over samples and are computed from log-softmax,
//! so no probability floor enters the values or gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SoftLabelSet;
use crate::error::{Error, Result};
use crate::metrics::log_sum_exp;

pub const DEFAULT_LS_LAMBDA: f64 = 0.05;
pub const DEFAULT_ER_ALPHA: f64 = 0.1;

/// Focal `γ` below this true-class probability is 5, at or above it 3.
pub const FOCAL_SWITCH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSpec {
    Ce,
    Ls { lambda: f64 },
    Er { alpha: f64 },
    Erls { lambda: f64, alpha: f64 },
    Focal,
}

impl LossSpec {
    pub fn ls() -> Self {
        LossSpec::Ls { lambda: DEFAULT_LS_LAMBDA }
    }

    pub fn er() -> Self {
        LossSpec::Er { alpha: DEFAULT_ER_ALPHA }
    }

    pub fn erls() -> Self {
        LossSpec::Erls {
            lambda: DEFAULT_LS_LAMBDA,
            alpha: DEFAULT_ER_ALPHA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "CE",
            LossSpec::Ls { .. } => "LS",
            LossSpec::Er { .. } => "ER",
            LossSpec::Erls { .. } => "ERLS",
            LossSpec::Focal => "FOCAL",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lambda, alpha) = match *self {
            LossSpec::Ce | LossSpec::Focal => (0.0, 0.0),
            LossSpec::Ls { lambda } => (lambda, 0.0),
            LossSpec::Er { alpha } => (0.0, alpha),
            LossSpec::Erls { lambda, alpha } => (lambda, alpha),
        };
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::invalid(format!("label smoothing λ = {lambda} outside [0, 1)")));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("entropy weight α = {alpha} must be ≥ 0")));
        }
        Ok(())
    }

    fn lambda(&self) -> Option<f64> {
        match *self {
            LossSpec::Ls { lambda } | LossSpec::Erls { lambda, .. } => Some(lambda),
            _ => None,
        }
    }

    fn alpha(&self) -> Option<f64> {
        match *self {
            LossSpec::Er { alpha } | LossSpec::Erls { alpha, .. } => Some(alpha),
            _ => None,
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a loss name with default hyperparameters.
impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossSpec::Ce),
            "ls" => Ok(LossSpec::ls()),
            "er" => Ok(LossSpec::er()),
            "erls" | "er+ls" => Ok(LossSpec::erls()),
            "focal" => Ok(LossSpec::Focal),
            _ => Err(Error::invalid(format!("unknown loss: {s}"))),
        }
    }
}

/// `(1 - λ)·y + λ/C` row by row.
pub fn smooth_labels(onehot: ArrayView2<'_, f64>, lambda: f64) -> Result<SoftLabelSet> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!("label smoothing λ = {lambda} outside [0, 1)")));
    }
    let u = lambda / onehot.ncols() as f64;
    SoftLabelSet::new(onehot.mapv(|y| (1.0 - lambda) * y + u))
}

fn smoothed_target(label: usize, c: usize, lambda: f64) -> Vec<f64> {
    let u = lambda / c as f64;
    (0..c)
        .map(|k| if k == label { (1.0 - lambda) + u } else { u })
        .collect()
}

/// Mean loss over rows and its gradient with respect to the logits.
pub fn loss_value_grad(spec: &LossSpec, logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    spec.validate()?;
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} logit rows, {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if let Some(i) = labels.iter().position(|&y| y >= c) {
        return Err(Error::InvalidRecord {
            index: i,
            reason: format!("label {} out of range for {c} classes", labels[i]),
        });
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, c));
    let mut z = vec![0.0; c];
    for (i, (row, mut g)) in logits.rows().into_iter().zip(grad.rows_mut()).enumerate() {
        z.iter_mut().zip(row.iter()).for_each(|(a, &b)| *a = b);
        let lse = log_sum_exp(&z);
        let lp: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let y = labels[i];

        match *spec {
            LossSpec::Focal => {
                let q = p[y];
                // 1 - q without cancellation
                let rest: f64 = p.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, v)| v).sum();
                let gamma: i32 = if q < FOCAL_SWITCH { 5 } else { 3 };
                let w = rest.powi(gamma);
                value -= w * lp[y];
                let coef = gamma as f64 * rest.powi(gamma - 1) * q * lp[y] - w;
                for k in 0..c {
                    let d = if k == y { 1.0 } else { 0.0 };
                    g[k] = coef * (d - p[k]);
                }
            }
            _ => {
                match spec.lambda() {
                    Some(lambda) => {
                        let t = smoothed_target(y, c, lambda);
                        for k in 0..c {
                            value -= t[k] * lp[k];
                            g[k] = p[k] - t[k];
                        }
                    }
                    None => {
                        value -= lp[y];
                        for k in 0..c {
                            g[k] = p[k];
                        }
                        g[y] -= 1.0;
                    }
                }
                if let Some(alpha) = spec.alpha() {
                    let h: f64 = -p.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
                    value -= alpha * h;
                    for k in 0..c {
                        g[k] += alpha * p[k] * (lp[k] + h);
                    }
                }
            }
        }
    }
    grad /= n as f64;
    Ok((value / n as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `C × D`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearModel {
    pub fn zeros(class_count: usize, feature_dim: usize) -> Self {
        LinearModel {
            weights: Array2::zeros((class_count, feature_dim)),
            bias: Array1::zeros(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    /// `X·Wᵀ + b`.
    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.weights.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} features for a model of width {}",
                features.ncols(),
                self.weights.ncols()
            )));
        }
        Ok(features.dot(&self.weights.t()) + &self.bias)
    }
}

/// Full-batch gradient descent from the zero model. Returns the model after
/// `steps` updates and its training loss.
pub fn train_linear(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    spec: &LossSpec,
    steps: usize,
    lr: f64,
) -> Result<(LinearModel, f64)> {
    let c = labels.iter().max().map_or(0, |m| m + 1).max(2);
    train_linear_with_classes(features, labels, c, spec, steps, lr)
}

/// Same as [`train_linear`] with an explicit class count, for label sets
/// that do not contain the highest class.
pub fn train_linear_with_classes(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    class_count: usize,
    spec: &LossSpec,
    steps: usize,
    lr: f64,
) -> Result<(LinearModel, f64)> {
    if labels.iter().any(|&y| y >= class_count) {
        return Err(Error::invalid("label beyond class count"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    spec.validate()?;
    let mut model = LinearModel::zeros(class_count, features.ncols());
    for step in 0..steps {
        let z = model.logits(features)?;
        let (value, g) = loss_value_grad(spec, z.view(), labels)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        model.weights.scaled_add(-lr, &g.t().dot(&features));
        model.bias.scaled_add(-lr, &g.sum_axis(Axis(0)));
    }
    let (value, _) = loss_value_grad(spec, model.logits(features)?.view(), labels)?;
    if !value.is_finite() || model.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: steps });
    }
    Ok((model, value))
}
