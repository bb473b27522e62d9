//! Probability-space ensembles and the two calibration orderings:
//! calibrate each member then average, or average then calibrate.

use std::collections::HashSet;

use itertools::Itertools;
use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrators::{fit_method, CalibSet, Calibrator, Method};
use crate::data::sample_indices;
use crate::error::{Error, Result};
use crate::metrics::{softmax_rows, ProbMatrix, LOG_FLOOR};
use crate::ood::{fit_with_ood_logits, OodPolicy};

pub const DEFAULT_ENSEMBLE_SIZE: usize = 3;

/// Element-wise mean of equally shaped probability matrices.
pub fn mean_probs(members: &[ProbMatrix]) -> Result<ProbMatrix> {
    let first = members.first().ok_or(Error::EmptySet)?;
    let mut sum = first.as_array().clone();
    for m in &members[1..] {
        if m.as_array().dim() != sum.dim() {
            return Err(Error::DimensionMismatch(format!(
                "member of shape {:?} against {:?}",
                m.as_array().dim(),
                sum.dim()
            )));
        }
        sum += m.as_array();
    }
    sum /= members.len() as f64;
    Ok(ProbMatrix::from_rows_unchecked(sum))
}

/// `ln(max(p, 1e-12))` shifted so each row's maximum is 0.
pub fn pseudo_logits(probs: &ProbMatrix) -> Array2<f64> {
    let mut z = probs.as_array().mapv(|p| p.max(LOG_FLOOR).ln());
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row -= m;
    }
    z
}

/// One ensemble member's logits on the shared splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub calib_logits: Array2<f64>,
    pub eval_logits: Array2<f64>,
    pub ood_logits: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberSet {
    calib_labels: Vec<usize>,
    members: Vec<Member>,
}

impl MemberSet {
    pub fn new(calib_labels: Vec<usize>, members: Vec<Member>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("an ensemble needs at least two members"));
        }
        let first = &members[0];
        let (n_cal, c) = first.calib_logits.dim();
        if calib_labels.len() != n_cal {
            return Err(Error::DimensionMismatch(format!(
                "{} calibration labels for {n_cal} rows",
                calib_labels.len()
            )));
        }
        for (i, m) in members.iter().enumerate() {
            let ood_ok = match (&m.ood_logits, &first.ood_logits) {
                (Some(a), Some(b)) => a.dim() == b.dim(),
                (None, None) => true,
                _ => false,
            };
            if m.calib_logits.dim() != (n_cal, c) || m.eval_logits.dim() != first.eval_logits.dim() || m.eval_logits.ncols() != c || !ood_ok {
                return Err(Error::Member {
                    member: i,
                    source: Box::new(Error::DimensionMismatch("member shapes differ".into())),
                });
            }
        }
        Ok(MemberSet {
            calib_labels,
            members,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn calib_labels(&self) -> &[usize] {
        &self.calib_labels
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// A calibration method plus optional OOD exposure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRecipe {
    pub method: Method,
    pub ood: Option<OodPolicy>,
}

impl FitRecipe {
    pub fn plain(method: Method) -> Self {
        FitRecipe { method, ood: None }
    }

    pub fn fit(&self, calib: &CalibSet, ood_logits: Option<ArrayView2<'_, f64>>) -> Result<Calibrator> {
        match (&self.ood, ood_logits) {
            (None, _) => fit_method(self.method, calib),
            (Some(policy), Some(pool)) => fit_with_ood_logits(self.method, calib, pool, policy),
            (Some(_), None) => Err(Error::invalid("OOD exposure requested but no OOD logits given")),
        }
    }
}

/// Each member's calibrator, fitted on its own calibration logits.
pub fn fit_members(set: &MemberSet, recipe: &FitRecipe) -> Result<Vec<Calibrator>> {
    set.members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            CalibSet::from_labels(m.calib_logits.clone(), &set.calib_labels)
                .and_then(|cs| recipe.fit(&cs, m.ood_logits.as_ref().map(|o| o.view())))
                .map_err(|e| Error::Member {
                    member: i,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn calibrate_then_ensemble(set: &MemberSet, recipe: &FitRecipe) -> Result<ProbMatrix> {
    let cals = fit_members(set, recipe)?;
    let probs = set
        .members
        .iter()
        .zip(&cals)
        .enumerate()
        .map(|(i, (m, c))| {
            c.apply(m.eval_logits.view(), &[]).map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_probs(&probs)
}

fn mean_softmax<'a>(logits: impl Iterator<Item = &'a Array2<f64>>) -> Result<ProbMatrix> {
    let probs = logits.map(|z| softmax_rows(z.view(), 1.0)).collect::<Result<Vec<_>>>()?;
    mean_probs(&probs)
}

pub fn ensemble_then_calibrate(set: &MemberSet, recipe: &FitRecipe) -> Result<ProbMatrix> {
    let calib = pseudo_logits(&mean_softmax(set.members.iter().map(|m| &m.calib_logits))?);
    let eval = pseudo_logits(&mean_softmax(set.members.iter().map(|m| &m.eval_logits))?);
    let ood = match set.members[0].ood_logits {
        Some(_) => Some(pseudo_logits(&mean_softmax(
            set.members.iter().filter_map(|m| m.ood_logits.as_ref()),
        )?)),
        None => None,
    };
    let cs = CalibSet::from_labels(calib, &set.calib_labels)?;
    let cal = recipe.fit(&cs, ood.as_ref().map(|o| o.view()))?;
    cal.apply(eval.view(), &[])
}

fn combination_count(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

const ENUMERATION_LIMIT: u128 = 200_000;

/// `n_draws` distinct unordered index sets of size `ensemble_size`, sorted
/// within each set, sampled uniformly and deterministically from `seed`.
pub fn sample_member_combinations(pool_size: usize, ensemble_size: usize, n_draws: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if ensemble_size == 0 || ensemble_size > pool_size {
        return Err(Error::invalid(format!(
            "ensemble size {ensemble_size} with a pool of {pool_size}"
        )));
    }
    let total = combination_count(pool_size, ensemble_size);
    if n_draws as u128 > total {
        return Err(Error::invalid(format!(
            "{n_draws} draws requested but only {total} distinct combinations exist"
        )));
    }
    if n_draws == 0 {
        return Ok(Vec::new());
    }
    if total <= ENUMERATION_LIMIT {
        let all: Vec<Vec<usize>> = (0..pool_size).combinations(ensemble_size).collect();
        let picks = sample_indices(all.len(), n_draws, seed)?;
        return Ok(picks.into_iter().map(|i| all[i].clone()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n_draws);
    while out.len() < n_draws {
        let mut pick = index::sample(&mut rng, pool_size, ensemble_size).into_vec();
        pick.sort_unstable();
        if seen.insert(pick.clone()) {
            out.push(pick);
        }
    }
    Ok(out)
}
