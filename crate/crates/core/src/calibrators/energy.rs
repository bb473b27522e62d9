//! Energy-based calibration: a per-sample temperature driven by Gaussian
//! densities of the logit energy `F(z) = -logsumexp(z)`.
//!
//! ```text
//! T(z) = clamp(T_ts - P1(F(z))·θ1 + P2(F(z))·θ2, T_MIN, T_MAX)
//! ```
//!
//! `P1` is fitted on the energies of correctly classified ID samples, `P2`
//! on misclassified ID samples plus (when exposed) semantic OOD samples,
//! whose regression target is the zero vector.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::optimize::{coordinate_descent, GOLDEN_TOLERANCE};
use super::temperature::fit_ts;
use super::{clamp_temperature, CalibSet, Origin, RowCalibrator};
use crate::error::{Error, Result};
use crate::metrics::{argmax, log_sum_exp, softmax_into};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const THETA_BOUND: f64 = 5.0;

pub fn energy(z: &[f64]) -> Result<f64> {
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("energy input".into()));
    }
    Ok(-log_sum_exp(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn pdf(&self, x: f64) -> f64 {
        let u = (x - self.mean) / self.std;
        (-0.5 * u * u).exp() / (self.std * (2.0 * PI).sqrt())
    }
}

/// Sample mean and population standard deviation (floored at 1e-6).
pub fn fit_gaussian(values: &[f64]) -> Result<Gaussian> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Gaussian {
        mean,
        std: var.sqrt().max(SIGMA_FLOOR),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCalibrator {
    pub t_ts: f64,
    pub theta: [f64; 2],
    pub correct: Gaussian,
    pub incorrect: Gaussian,
}

impl EnergyCalibrator {
    fn temperature_from_energy(&self, f: f64, theta: [f64; 2]) -> f64 {
        clamp_temperature(self.t_ts - self.correct.pdf(f) * theta[0] + self.incorrect.pdf(f) * theta[1])
    }

    /// Per-sample temperature of a logit row.
    pub fn temperature(&self, z: &[f64]) -> f64 {
        self.temperature_from_energy(-log_sum_exp(z), self.theta)
    }
}

impl RowCalibrator for EnergyCalibrator {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let mut t = self.temperature(z);
        if scale != 1.0 {
            t = clamp_temperature(t * scale);
        }
        softmax_into(z, 1.0 / t, out);
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

/// Mean squared error (over all entries) between `softmax(z / T(z))` and
/// the targets, for the rows of `calib` selected by `rows`.
fn energy_mse(model: &EnergyCalibrator, theta: [f64; 2], calib: &CalibSet, rows: &[usize], energies: &[f64]) -> f64 {
    let c = calib.class_count();
    let mut p = vec![0.0; c];
    let mut total = 0.0;
    for &i in rows {
        let z = calib.logits().row(i);
        let z = z.as_slice().expect("contiguous logits");
        let t = model.temperature_from_energy(energies[i], theta);
        softmax_into(z, 1.0 / t, &mut p);
        let target = calib.targets().row(i);
        for (pk, tk) in p.iter().zip(target.iter()) {
            total += (pk - tk).powi(2);
        }
    }
    total / (rows.len() * c) as f64
}

/// Fits EBS (`use_ood = true`) or EBS- (`use_ood = false`, OOD rows ignored).
pub fn fit_ebs(calib: &CalibSet, use_ood: bool) -> Result<EnergyCalibrator> {
    let id = calib.id_only()?;
    let t_ts = fit_ts(&id)?.temperature();

    let energies: Vec<f64> = calib
        .logits()
        .rows()
        .into_iter()
        .map(|z| -log_sum_exp(z.as_slice().expect("contiguous logits")))
        .collect();

    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    let mut rows = Vec::new();
    for (i, &origin) in calib.origin().iter().enumerate() {
        match origin {
            Origin::Id => {
                rows.push(i);
                let pred = argmax(&calib.logits().row(i).to_vec());
                if pred == calib.label(i) {
                    correct.push(energies[i]);
                } else {
                    incorrect.push(energies[i]);
                }
            }
            Origin::Ood if use_ood => {
                rows.push(i);
                incorrect.push(energies[i]);
            }
            Origin::Ood => {}
        }
    }
    if correct.is_empty() {
        return Err(Error::EmptyGroup("P1 (no correctly classified ID samples)"));
    }
    if incorrect.is_empty() {
        return Err(Error::EmptyGroup("P2 (no misclassified ID or OOD samples)"));
    }

    let mut model = EnergyCalibrator {
        t_ts,
        theta: [0.0, 0.0],
        correct: fit_gaussian(&correct)?,
        incorrect: fit_gaussian(&incorrect)?,
    };
    let (theta, _) = coordinate_descent(
        |th| energy_mse(&model, [th[0], th[1]], calib, &rows, &energies),
        vec![0.0, 0.0],
        &[(-THETA_BOUND, THETA_BOUND); 2],
        GOLDEN_TOLERANCE,
        50,
    )?;
    model.theta = [theta[0], theta[1]];
    Ok(model)
}

/// Calibration-set MSE of `model` on the rows an EBS fit would use.
pub fn ebs_mse(model: &EnergyCalibrator, calib: &CalibSet, use_ood: bool) -> f64 {
    let energies: Vec<f64> = calib
        .logits()
        .rows()
        .into_iter()
        .map(|z| -log_sum_exp(&z.to_vec()))
        .collect();
    let rows: Vec<usize> = (0..calib.len())
        .filter(|&i| use_ood || calib.origin()[i] == Origin::Id)
        .collect();
    energy_mse(model, model.theta, calib, &rows, &energies)
}
