use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::optimize::{minimize_scalar, GOLDEN_TOLERANCE};
use super::{clamp_temperature, CalibSet, RowCalibrator, T_MAX, T_MIN};
use crate::error::{Error, Result};
use crate::metrics::{argmax, softmax_into, LOG_FLOOR};

/// `softmax(z / T)` with one global temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureScaler {
    temperature: f64,
}

impl TemperatureScaler {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(T_MIN..=T_MAX).contains(&temperature) {
            return Err(Error::invalid(format!(
                "temperature {temperature} outside [{T_MIN}, {T_MAX}]"
            )));
        }
        Ok(TemperatureScaler { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl RowCalibrator for TemperatureScaler {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let t = if scale == 1.0 {
            self.temperature
        } else {
            clamp_temperature(self.temperature * scale)
        };
        softmax_into(z, 1.0 / t, out);
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

/// Mean soft-target cross-entropy of `softmax(z / T)`, computed in log
/// space. Rows with a zero target contribute nothing.
pub fn temperature_nll(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, temperature: f64) -> f64 {
    let mut total = 0.0;
    let mut scaled = vec![0.0; logits.ncols()];
    for (z, t) in logits.rows().into_iter().zip(targets.rows()) {
        for (s, &v) in scaled.iter_mut().zip(z.iter()) {
            *s = v / temperature;
        }
        // ln Σ exp(s_k - max) as ln_1p of the non-max terms, so confident
        // rows keep their tiny losses instead of rounding to zero.
        let top = argmax(&scaled);
        let m = scaled[top];
        let rest: f64 = scaled
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != top)
            .map(|(_, &s)| (s - m).exp())
            .sum();
        let lse = rest.ln_1p();
        for (&tk, &sk) in t.iter().zip(&scaled) {
            if tk != 0.0 {
                total += tk * (lse + (m - sk));
            }
        }
    }
    total / logits.nrows() as f64
}

/// Temperature minimising soft-target NLL over `[T_MIN, T_MAX]`, using every
/// row of `calib` (OOD rows included).
pub fn fit_ts(calib: &CalibSet) -> Result<TemperatureScaler> {
    let (z, t) = (calib.logits().view(), calib.targets().view());
    let temperature = minimize_scalar(|tau| temperature_nll(z, t, tau), T_MIN, T_MAX, GOLDEN_TOLERANCE)?;
    TemperatureScaler::new(temperature)
}

/// Convex mixture `w0·softmax(z/T) + w1·softmax(z) + w2/C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTemperatureScaler {
    temperature: f64,
    weights: [f64; 3],
}

/// Lower bound on `w0 + w1`; a pure uniform mixture would erase the ranking.
const MIN_SIGNAL_WEIGHT: f64 = 1e-6;

impl EnsembleTemperatureScaler {
    pub fn new(temperature: f64, weights: [f64; 3]) -> Result<Self> {
        TemperatureScaler::new(temperature)?;
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("ETS weights {weights:?} not in the simplex")));
        }
        if weights[0] + weights[1] < MIN_SIGNAL_WEIGHT * (1.0 - 1e-9) {
            return Err(Error::invalid("ETS weights put all mass on the uniform component"));
        }
        Ok(EnsembleTemperatureScaler {
            temperature,
            weights,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn weights(&self) -> [f64; 3] {
        self.weights
    }
}

impl RowCalibrator for EnsembleTemperatureScaler {
    fn calibrate_row(&self, z: &[f64], scale: f64, out: &mut [f64]) {
        let t = if scale == 1.0 {
            self.temperature
        } else {
            clamp_temperature(self.temperature * scale)
        };
        let [w0, w1, w2] = self.weights;
        let uniform = 1.0 / z.len() as f64;
        let mut raw = vec![0.0; z.len()];
        softmax_into(z, 1.0 / t, out);
        softmax_into(z, 1.0, &mut raw);
        for (o, r) in out.iter_mut().zip(&raw) {
            *o = w0 * *o + w1 * r + w2 * uniform;
        }
    }

    fn accuracy_preserving(&self) -> bool {
        true
    }
}

fn mixture_nll(tempered: &Array2<f64>, raw: &Array2<f64>, targets: ArrayView2<'_, f64>, w: [f64; 3]) -> f64 {
    let c = targets.ncols();
    let uniform = w[2] / c as f64;
    let mut total = 0.0;
    for ((pt, p1), t) in tempered.rows().into_iter().zip(raw.rows()).zip(targets.rows()) {
        for k in 0..c {
            if t[k] != 0.0 {
                let p = w[0] * pt[k] + w[1] * p1[k] + uniform;
                total -= t[k] * p.max(LOG_FLOOR).ln();
            }
        }
    }
    total / targets.nrows() as f64
}

fn transfer(w: [f64; 3], i: usize, j: usize, t: f64) -> [f64; 3] {
    let mut out = w;
    out[i] = (out[i] + t).max(0.0);
    out[j] = (out[j] - t).max(0.0);
    let s: f64 = out.iter().sum();
    out.map(|v| v / s)
}

/// TS temperature, then mixture weights by pairwise mass transfers over the
/// 2-simplex, starting from pure TS `(1, 0, 0)`.
pub fn fit_ets(calib: &CalibSet) -> Result<EnsembleTemperatureScaler> {
    let ts = fit_ts(calib)?;
    let temperature = ts.temperature();
    let z = calib.logits().view();
    let targets = calib.targets().view();
    let tempered = crate::metrics::softmax_rows(z, temperature)?.into_inner();
    let raw = crate::metrics::softmax_rows(z, 1.0)?.into_inner();
    let objective = |w: [f64; 3]| mixture_nll(&tempered, &raw, targets, w);

    let mut w = [1.0, 0.0, 0.0];
    let mut best = objective(w);
    for _ in 0..100 {
        let before = best;
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            // w[i] += t, w[j] -= t
            let mut lo = -w[i];
            let mut hi = w[j];
            let signal = w[0] + w[1] - MIN_SIGNAL_WEIGHT;
            if i == 2 {
                hi = hi.min(signal.max(0.0));
            }
            if j == 2 {
                lo = lo.max(-signal.max(0.0));
            }
            if hi - lo <= 1e-12 {
                continue;
            }
            let t = minimize_scalar(|t| objective(transfer(w, i, j, t)), lo, hi, GOLDEN_TOLERANCE)?;
            let cand = transfer(w, i, j, t);
            if cand[0] + cand[1] < MIN_SIGNAL_WEIGHT {
                continue;
            }
            let v = objective(cand);
            if v < best {
                best = v;
                w = cand;
            }
        }
        if before - best <= 1e-12 {
            break;
        }
    }
    EnsembleTemperatureScaler::new(temperature, w)
}
