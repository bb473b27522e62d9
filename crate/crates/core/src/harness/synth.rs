//! Synthetic class-conditional shift benchmark.
//!
//! Each sample draws `y` from the prevalence, then features
//! `x = μ·e_y + ε` in `D ≥ C` dimensions with `ε ~ N(0, σ²)`. Logits are the
//! first `C` coordinates of `x`; the embedding is `x` plus `N(0, 0.1²)`
//! noise. Shifted splits inflate `σ`, which lowers accuracy while the logit
//! spread (and so the confidence) grows: the model is overconfident under
//! shift. OOD pool rows are `x ~ N(0, σ_ood²)` with no label.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSet, Record, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub feature_dim: usize,
    pub samples_per_split: usize,
    pub mu: f64,
    pub sigma_id: f64,
    /// One shifted test split per entry.
    pub sigma_shift: Vec<f64>,
    pub sigma_ood: f64,
    pub prevalence: Option<Vec<f64>>,
    pub embedding_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 5,
            feature_dim: 8,
            samples_per_split: 2000,
            mu: 2.6,
            sigma_id: 1.0,
            sigma_shift: vec![3.0],
            sigma_ood: 4.0,
            prevalence: None,
            embedding_noise: 0.1,
            seed: 0,
        }
    }
}

/// Stream ids that keep every split's draws independent of the others.
pub(crate) mod stream {
    pub const ID_CALIB: u64 = 0;
    pub const ID_TEST: u64 = 1;
    pub const OOD_POOL: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SHIFTED: u64 = 100;
    pub const MEMBER: u64 = 10_000;
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("synthetic data needs at least two classes"));
        }
        if self.feature_dim < self.class_count {
            return Err(Error::invalid(format!(
                "feature_dim {} below class_count {}",
                self.feature_dim, self.class_count
            )));
        }
        if self.samples_per_split == 0 {
            return Err(Error::invalid("samples_per_split must be positive"));
        }
        let sigmas = [self.sigma_id, self.sigma_ood, self.embedding_noise];
        if sigmas.iter().chain(&self.sigma_shift).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise scales must be positive and finite"));
        }
        if !self.mu.is_finite() {
            return Err(Error::invalid("mu must be finite"));
        }
        if let Some(p) = &self.prevalence {
            let s: f64 = p.iter().sum();
            if p.len() != self.class_count || p.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("prevalence must be a probability vector over the classes"));
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// One labelled split with noise scale `sigma`, drawn from `stream`.
    pub fn labelled_split(&self, name: &str, role: Role, sigma: f64, stream: u64) -> Result<EvalSet> {
        self.validate()?;
        let (c, d) = (self.class_count, self.feature_dim);
        let uniform = vec![1.0; c];
        let weights = self.prevalence.as_deref().unwrap_or(&uniform);
        let classes = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let emb_noise = Normal::new(0.0, self.embedding_noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = self.rng(stream);
        let records = (0..self.samples_per_split)
            .map(|_| {
                let y = classes.sample(&mut rng);
                let x: Vec<f64> = (0..d)
                    .map(|k| if k == y { self.mu } else { 0.0 } + noise.sample(&mut rng))
                    .collect();
                let e = x.iter().map(|v| v + emb_noise.sample(&mut rng)).collect();
                Record::labelled(x[..c].to_vec(), y).with_embedding(e)
            })
            .collect();
        EvalSet::new(name, role, records)
    }

    pub fn ood_pool(&self) -> Result<EvalSet> {
        self.validate()?;
        let (c, d) = (self.class_count, self.feature_dim);
        let noise = Normal::new(0.0, self.sigma_ood).map_err(|e| Error::invalid(e.to_string()))?;
        let emb_noise = Normal::new(0.0, self.embedding_noise).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = self.rng(stream::OOD_POOL);
        let records = (0..self.samples_per_split)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
                let e = x.iter().map(|v| v + emb_noise.sample(&mut rng)).collect();
                Record::unlabelled(x[..c].to_vec()).with_embedding(e)
            })
            .collect();
        EvalSet::new("ood_pool", Role::OodPool, records)
    }

    /// Training split for the loss experiments (same distribution as ID).
    pub fn train_split(&self, member: u64) -> Result<EvalSet> {
        self.labelled_split("train", Role::IdCalib, self.sigma_id, stream::TRAIN + stream::MEMBER * member)
    }
}

/// `[ID_CALIB, ID_TEST, SHIFTED_TEST…, OOD_POOL]`, deterministic in the seed.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<EvalSet>> {
    config.validate()?;
    let mut out = vec![
        config.labelled_split("id_calib", Role::IdCalib, config.sigma_id, stream::ID_CALIB)?,
        config.labelled_split("id_test", Role::IdTest, config.sigma_id, stream::ID_TEST)?,
    ];
    for (i, &s) in config.sigma_shift.iter().enumerate() {
        out.push(config.labelled_split(&format!("shifted_{i}"), Role::ShiftedTest, s, stream::SHIFTED + i as u64)?);
    }
    out.push(config.ood_pool()?);
    Ok(out)
}

/// Copy of `set` with independent `N(0, noise²)` added to every logit; the
/// stand-in for an ensemble member trained from a different initialisation.
pub fn perturb_logits(set: &EvalSet, noise: f64, seed: u64, stream: u64) -> Result<EvalSet> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let z = set.logits();
    let z = Array2::from_shape_fn(z.dim(), |ij| z[ij] + normal.sample(&mut rng));
    set.with_logits(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{accuracy, ece, softmax_rows, DEFAULT_BINS};

    fn raw_metrics(set: &EvalSet) -> (f64, f64) {
        let p = softmax_rows(set.logits().view(), 1.0).unwrap();
        let y = set.labels().unwrap();
        (accuracy(&p, &y).unwrap(), ece(&p, &y, DEFAULT_BINS).unwrap())
    }

    #[test]
    fn split_sizes_and_roles() {
        let cfg = SynthConfig {
            samples_per_split: 300,
            sigma_shift: vec![2.0, 3.0],
            ..SynthConfig::default()
        };
        let sets = synth_generate(&cfg).unwrap();
        let roles: Vec<Role> = sets.iter().map(|s| s.role).collect();
        assert_eq!(
            roles,
            [Role::IdCalib, Role::IdTest, Role::ShiftedTest, Role::ShiftedTest, Role::OodPool]
        );
        assert!(sets.iter().all(|s| s.len() == 300 && s.class_count == 5));
        assert!(sets[4].records.iter().all(|r| r.label.is_none()));
        assert!(sets[0].embeddings().unwrap().ncols() == 8);
        assert_eq!(sets, synth_generate(&cfg).unwrap());
    }

    #[test]
    fn equal_noise_gives_matching_calibration() {
        let cfg = SynthConfig {
            samples_per_split: 10_000,
            sigma_shift: vec![1.0],
            ..SynthConfig::default()
        };
        let sets = synth_generate(&cfg).unwrap();
        let (_, e_id) = raw_metrics(&sets[1]);
        let (_, e_sh) = raw_metrics(&sets[2]);
        assert!((e_id - e_sh).abs() <= 0.03, "{e_id} {e_sh}");
    }

    #[test]
    fn inflated_noise_is_overconfident() {
        let cfg = SynthConfig {
            samples_per_split: 10_000,
            sigma_shift: vec![3.0],
            ..SynthConfig::default()
        };
        let sets = synth_generate(&cfg).unwrap();
        let (a_id, e_id) = raw_metrics(&sets[1]);
        let (a_sh, e_sh) = raw_metrics(&sets[2]);
        assert!((a_id - 0.9).abs() < 0.05, "ID accuracy {a_id}");
        assert!(a_sh < a_id);
        assert!(e_sh > e_id);
    }

    #[test]
    fn degenerate_prevalence() {
        let mut p = vec![0.0; 5];
        p[0] = 1.0;
        let cfg = SynthConfig {
            samples_per_split: 100,
            prevalence: Some(p),
            ..SynthConfig::default()
        };
        let sets = synth_generate(&cfg).unwrap();
        assert!(sets[0].labels().unwrap().iter().all(|&y| y == 0));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { sigma_id: 0.0, ..SynthConfig::default() },
            SynthConfig { feature_dim: 3, ..SynthConfig::default() },
            SynthConfig { prevalence: Some(vec![0.5, 0.5]), ..SynthConfig::default() },
            SynthConfig { samples_per_split: 0, ..SynthConfig::default() },
        ] {
            assert!(synth_generate(&cfg).is_err());
        }
    }

    #[test]
    fn perturbation_is_seeded() {
        let cfg = SynthConfig { samples_per_split: 50, ..SynthConfig::default() };
        let s = synth_generate(&cfg).unwrap().remove(0);
        let a = perturb_logits(&s, 0.5, 1, 7).unwrap();
        assert_eq!(a, perturb_logits(&s, 0.5, 1, 7).unwrap());
        assert_ne!(a, perturb_logits(&s, 0.5, 1, 8).unwrap());
        assert_eq!(a.labels(), s.labels());
    }
}
