//! Semantic OOD exposure: calibration sets augmented with unlabelled
//! outlier logits that carry uniform or all-zero targets.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibrators::{fit_method, CalibSet, Calibrator, Method, Origin};
use crate::data::{sample_indices, EvalSet};
use crate::error::{Error, Result};

pub const DEFAULT_OOD_RATIO: f64 = 0.10;

/// Target assigned to OOD rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// `[1/C, …, 1/C]`, used by the temperature and isotonic families.
    Uniform,
    /// `0^C`, the energy-based convention.
    Zero,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(LabelMode::Uniform),
            "zero" => Ok(LabelMode::Zero),
            _ => Err(Error::invalid(format!("unknown OOD label mode: {s}"))),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Uniform => "uniform",
            LabelMode::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodPolicy {
    /// OOD rows as a fraction of the ID calibration rows.
    pub ratio: f64,
    /// `None` picks the method's own convention (see [`default_label_mode`]).
    pub label_mode: Option<LabelMode>,
    pub seed: u64,
}

impl Default for OodPolicy {
    fn default() -> Self {
        OodPolicy {
            ratio: DEFAULT_OOD_RATIO,
            label_mode: None,
            seed: 0,
        }
    }
}

impl OodPolicy {
    pub fn with_seed(seed: u64) -> Self {
        OodPolicy {
            seed,
            ..OodPolicy::default()
        }
    }

    /// `round(ratio·n_id)`, checked against the pool size.
    pub fn ood_count(&self, n_id: usize, pool: usize) -> Result<usize> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("OOD ratio {} outside (0, 1]", self.ratio)));
        }
        let n = (self.ratio * n_id as f64).round() as usize;
        if n == 0 {
            return Err(Error::ZeroOodCount {
                ratio: self.ratio,
                n_id,
            });
        }
        let needed = (self.ratio * n_id as f64).ceil() as usize;
        if pool < needed {
            return Err(Error::InsufficientPool {
                needed,
                available: pool,
            });
        }
        Ok(n)
    }
}

/// OOD label convention for a method, or `UnknownMethod` for methods that
/// have no OOD variant.
pub fn default_label_mode(method: Method) -> Result<LabelMode> {
    match method {
        Method::Ts | Method::Ets | Method::Irm | Method::IrovaTs => Ok(LabelMode::Uniform),
        Method::Ebs => Ok(LabelMode::Zero),
        Method::None | Method::Irova => Err(Error::UnknownMethod(format!(
            "{} has no OOD-exposed variant",
            method.display_name()
        ))),
    }
}

/// Appends `round(ratio·N)` rows sampled from `pool_logits` to an ID-only
/// calibration set. ID rows are kept unchanged and in order; embeddings are
/// dropped because OOD rows have none.
pub fn augment(id: &CalibSet, pool_logits: ArrayView2<'_, f64>, policy: &OodPolicy, mode: LabelMode) -> Result<CalibSet> {
    let c = id.class_count();
    if pool_logits.ncols() != c {
        return Err(Error::DimensionMismatch(format!(
            "ID set has {c} classes, OOD pool has {}",
            pool_logits.ncols()
        )));
    }
    let n = policy.ood_count(id.len(), pool_logits.nrows())?;
    let idx = sample_indices(pool_logits.nrows(), n, policy.seed)?;
    let logits = pool_logits.select(Axis(0), &idx);
    let fill = match mode {
        LabelMode::Uniform => 1.0 / c as f64,
        LabelMode::Zero => 0.0,
    };
    let logits = ndarray::concatenate(Axis(0), &[id.logits().view(), logits.view()])
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let fill = Array2::from_elem((n, c), fill);
    let targets = ndarray::concatenate(Axis(0), &[id.targets().view(), fill.view()])
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let mut origin = id.origin().to_vec();
    origin.extend(std::iter::repeat_n(Origin::Ood, n));
    CalibSet::new(logits, targets, origin, Vec::new())
}

/// ID records (one-hot targets) plus subsampled OOD pool rows.
pub fn make_ood_calibset(id_set: &EvalSet, ood_pool: &EvalSet, policy: &OodPolicy) -> Result<CalibSet> {
    let id = CalibSet::from_eval_set(id_set)?;
    augment(&id, ood_pool.logits().view(), policy, policy.label_mode.unwrap_or(LabelMode::Uniform))
}

/// Fits `method` on an ID calibration set augmented with OOD pool rows.
pub fn fit_with_ood_logits(method: Method, id: &CalibSet, pool_logits: ArrayView2<'_, f64>, policy: &OodPolicy) -> Result<Calibrator> {
    let mode = match policy.label_mode {
        Some(m) => {
            default_label_mode(method)?;
            m
        }
        None => default_label_mode(method)?,
    };
    fit_method(method, &augment(id, pool_logits, policy, mode)?)
}

pub fn fit_with_ood(method: Method, id_set: &EvalSet, ood_pool: &EvalSet, policy: &OodPolicy) -> Result<Calibrator> {
    let id = CalibSet::from_eval_set(id_set)?;
    fit_with_ood_logits(method, &id, ood_pool.logits().view(), policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrators::{fit_ts, irm_regression_inputs, Model};
    use crate::data::{Record, Role};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn id_set(n: usize, scale: f64, seed: u64) -> EvalSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let records = (0..n)
            .map(|i| {
                let y = i % 3;
                let z = (0..3)
                    .map(|k| scale * (if k == y { 2.0 } else { 0.0 } + normal.sample(&mut rng)))
                    .collect();
                Record::labelled(z, y)
            })
            .collect();
        EvalSet::new("id", Role::IdCalib, records).unwrap()
    }

    fn pool(n: usize, sigma: f64, seed: u64) -> EvalSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let records = (0..n)
            .map(|_| Record::unlabelled((0..3).map(|_| normal.sample(&mut rng)).collect()))
            .collect();
        EvalSet::new("pool", Role::OodPool, records).unwrap()
    }

    #[test]
    fn sizing_and_targets() {
        let id = id_set(100, 1.0, 1);
        let p = pool(50, 3.0, 2);
        let set = make_ood_calibset(&id, &p, &OodPolicy::default()).unwrap();
        assert_eq!(set.len(), 110);
        let ood: Vec<usize> = (0..110).filter(|&i| set.origin()[i] == Origin::Ood).collect();
        assert_eq!(ood, (100..110).collect::<Vec<_>>());
        for &i in &ood {
            assert!((set.targets().row(i).sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(set.logits().slice(ndarray::s![..100, ..]), id.logits());

        let zero = OodPolicy {
            label_mode: Some(LabelMode::Zero),
            ..OodPolicy::default()
        };
        let set = make_ood_calibset(&id, &p, &zero).unwrap();
        for &i in &ood {
            assert_eq!(set.targets().row(i).sum(), 0.0);
        }
    }

    #[test]
    fn sizing_errors() {
        let id = id_set(100, 1.0, 1);
        let tiny = OodPolicy {
            ratio: 0.001,
            ..OodPolicy::default()
        };
        let err = make_ood_calibset(&id, &pool(50, 3.0, 2), &tiny).unwrap_err();
        assert!(err.to_string().contains("OOD count is zero"), "{err}");
        assert!(matches!(
            make_ood_calibset(&id, &pool(5, 3.0, 2), &OodPolicy::default()),
            Err(Error::InsufficientPool { needed: 10, available: 5 })
        ));
        let wide = EvalSet::new("w", Role::OodPool, vec![Record::unlabelled(vec![0.0; 4]); 20]).unwrap();
        assert!(make_ood_calibset(&id, &wide, &OodPolicy::default()).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let id = id_set(200, 1.0, 3);
        let p = pool(100, 3.0, 4);
        let a = make_ood_calibset(&id, &p, &OodPolicy::with_seed(9)).unwrap();
        let b = make_ood_calibset(&id, &p, &OodPolicy::with_seed(9)).unwrap();
        let c = make_ood_calibset(&id, &p, &OodPolicy::with_seed(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unsupported_methods() {
        let id = id_set(100, 1.0, 1);
        let p = pool(50, 3.0, 2);
        for m in [Method::Irova, Method::None] {
            let err = fit_with_ood(m, &id, &p, &OodPolicy::default()).unwrap_err();
            assert!(err.to_string().contains("unknown method"), "{err}");
        }
        let c = fit_with_ood(Method::Ts, &id, &p, &OodPolicy::default()).unwrap();
        assert_eq!(c.name, "TS+OOD");
        let c = fit_with_ood(Method::Ebs, &id, &p, &OodPolicy::default()).unwrap();
        assert_eq!(c.name, "EBS");
    }

    #[test]
    fn single_ood_row_barely_moves_temperature() {
        let id = id_set(10_000, 2.0, 5);
        let p = pool(10, 3.0, 6);
        let plain = fit_ts(&CalibSet::from_eval_set(&id).unwrap()).unwrap().temperature();
        let policy = OodPolicy {
            ratio: 1e-4,
            ..OodPolicy::default()
        };
        let c = fit_with_ood(Method::Ts, &id, &p, &policy).unwrap();
        let Model::Ts(ts) = c.model else { panic!() };
        assert!((ts.temperature() - plain).abs() < 1e-3);
    }

    #[test]
    fn uniform_rows_raise_temperature_on_average() {
        let (mut with, mut without) = (0.0, 0.0);
        for seed in 0..20 {
            let id = id_set(500, 2.0, 100 + seed);
            let p = pool(100, 6.0, 200 + seed);
            without += fit_ts(&CalibSet::from_eval_set(&id).unwrap()).unwrap().temperature();
            let Model::Ts(ts) = fit_with_ood(Method::Ts, &id, &p, &OodPolicy::with_seed(seed)).unwrap().model else {
                panic!()
            };
            with += ts.temperature();
        }
        assert!(with >= without, "{with} < {without}");
    }

    #[test]
    fn irm_ood_rows_target_one_over_c() {
        let id = id_set(100, 1.0, 1);
        let set = make_ood_calibset(&id, &pool(50, 3.0, 2), &OodPolicy::default()).unwrap();
        let (_, target) = irm_regression_inputs(&set).unwrap();
        for i in 100..110 {
            assert!((target[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
