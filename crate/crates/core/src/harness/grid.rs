//! Experiment plans and their execution: dataset × seed × loss ×
//! calibrator × ensemble strategy, evaluated on every test split.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::report::{ResultRow, Scores};
use super::synth::{perturb_logits, stream, synth_generate, SynthConfig};
use crate::calibrators::{fit_method, CalibSet, Method};
use crate::dac::{fit_dac_calibrator, DEFAULT_K};
use crate::data::{load_records, EvalSet, Role};
use crate::ensemble::{
    calibrate_then_ensemble, ensemble_then_calibrate, sample_member_combinations, FitRecipe, Member,
    MemberSet, DEFAULT_ENSEMBLE_SIZE,
};
use crate::error::{Error, Result};
use crate::losses::{train_linear_with_classes, LossSpec};
use crate::metrics::{evaluate, ProbMatrix, DEFAULT_BINS};
use crate::ood::{fit_with_ood_logits, OodPolicy};

/// Record files of one model's splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSplits {
    pub id_calib: PathBuf,
    pub id_test: PathBuf,
    #[serde(default)]
    pub shifted: Vec<PathBuf>,
    #[serde(default)]
    pub ood_pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDataset {
    #[serde(flatten)]
    pub splits: FileSplits,
    /// Ensemble member pool; every member covers the same records.
    #[serde(default)]
    pub members: Vec<FileSplits>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Files(FileDataset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratorSpec {
    pub method: Method,
    #[serde(default)]
    pub ood: bool,
    #[serde(default)]
    pub dac: bool,
}

impl CalibratorSpec {
    pub fn plain(method: Method) -> Self {
        CalibratorSpec {
            method,
            ood: false,
            dac: false,
        }
    }

    pub fn label(&self) -> String {
        let base = self.method.label(self.ood);
        if self.dac {
            format!("{base}+DAC")
        } else {
            base
        }
    }
}

fn default_size() -> usize {
    DEFAULT_ENSEMBLE_SIZE
}

fn default_draws() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberDraw {
    #[serde(default = "default_size")]
    pub size: usize,
    pub pool: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnsembleSpec {
    /// One model, no ensembling.
    Single,
    /// Calibrate each member, then average.
    Pre(MemberDraw),
    /// Average the members, then calibrate.
    Post(MemberDraw),
}

impl EnsembleSpec {
    fn draw(&self) -> Option<&MemberDraw> {
        match self {
            EnsembleSpec::Single => None,
            EnsembleSpec::Pre(d) | EnsembleSpec::Post(d) => Some(d),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            EnsembleSpec::Single => "single",
            EnsembleSpec::Pre(_) => "pre",
            EnsembleSpec::Post(_) => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub lr: f64,
    /// Logit noise that distinguishes untrained synthetic ensemble members.
    pub member_noise: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 300,
            lr: 0.5,
            member_noise: 0.5,
        }
    }
}

fn default_ensembles() -> Vec<EnsembleSpec> {
    vec![EnsembleSpec::Single]
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub datasets: Vec<DatasetSpec>,
    /// Training losses for synthetic datasets; empty means the generator's
    /// raw logits. File datasets always use their precomputed logits.
    #[serde(default)]
    pub losses: Vec<LossSpec>,
    pub calibrators: Vec<CalibratorSpec>,
    #[serde(default = "default_ensembles")]
    pub ensembles: Vec<EnsembleSpec>,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// OOD sizing and labels; the seed is replaced by each run seed.
    #[serde(default)]
    pub ood: OodPolicy,
    #[serde(default = "default_k")]
    pub dac_k: usize,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.calibrators.is_empty() || self.ensembles.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("experiment grid is empty"));
        }
        if self.bins == 0 {
            return Err(Error::invalid("bins must be positive"));
        }
        Ok(())
    }

    /// Reads a plan; relative file paths resolve against the plan's folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut plan.datasets {
            if let DataSource::Files(f) = &mut d.source {
                for s in std::iter::once(&mut f.splits).chain(f.members.iter_mut()) {
                    s.resolve(base);
                }
            }
        }
        Ok(plan)
    }
}

impl FileSplits {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.id_calib);
        fix(&mut self.id_test);
        self.shifted.iter_mut().for_each(fix);
        if let Some(p) = &mut self.ood_pool {
            fix(p);
        }
    }

    fn load(&self) -> Result<Splits> {
        let mut evals = vec![load_records(&self.id_test, Role::IdTest)?];
        for p in &self.shifted {
            evals.push(load_records(p, Role::ShiftedTest)?);
        }
        Ok(Splits {
            calib: load_records(&self.id_calib, Role::IdCalib)?,
            evals,
            ood: self.ood_pool.as_ref().map(|p| load_records(p, Role::OodPool)).transpose()?,
        })
    }
}

/// One model's calibration, test and OOD splits.
#[derive(Debug, Clone)]
struct Splits {
    calib: EvalSet,
    evals: Vec<EvalSet>,
    ood: Option<EvalSet>,
}

impl Splits {
    fn map(&self, f: impl Fn(&EvalSet, u64) -> Result<EvalSet>) -> Result<Splits> {
        Ok(Splits {
            calib: f(&self.calib, 0)?,
            evals: self.evals.iter().enumerate().map(|(i, s)| f(s, i as u64 + 1)).collect::<Result<_>>()?,
            ood: self.ood.as_ref().map(|s| f(s, 999)).transpose()?,
        })
    }
}

struct Prepared {
    base: Splits,
    members: Vec<Splits>,
}

fn synth_splits(cfg: &SynthConfig) -> Result<Splits> {
    let mut sets = synth_generate(cfg)?;
    let ood = sets.pop();
    let calib = sets.remove(0);
    Ok(Splits {
        calib,
        evals: sets,
        ood,
    })
}

fn relogit(set: &EvalSet, model: &crate::losses::LinearModel) -> Result<EvalSet> {
    let emb = set
        .embeddings()
        .ok_or_else(|| Error::invalid("trained losses need embeddings as features"))?;
    set.with_logits(&model.logits(emb.view())?)
}

fn prepare(plan: &ExperimentPlan, source: &DataSource, loss: Option<&LossSpec>, seed: u64, pool: usize) -> Result<Prepared> {
    match source {
        DataSource::Files(f) => {
            let base = f.splits.load()?;
            let members = if pool > 0 {
                f.members.iter().map(FileSplits::load).collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(Prepared { base, members })
        }
        DataSource::Synth(cfg) => {
            let cfg = SynthConfig {
                seed: cfg.seed.wrapping_add(seed),
                ..cfg.clone()
            };
            let data = synth_splits(&cfg)?;
            match loss {
                None => {
                    let noise = plan.training.member_noise;
                    let members = (0..pool as u64)
                        .map(|m| data.map(|s, k| perturb_logits(s, noise, cfg.seed, stream::MEMBER * (m + 1) + k)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Prepared { base: data, members })
                }
                Some(spec) => {
                    let train = |m: u64| -> Result<Splits> {
                        let t = cfg.train_split(m)?;
                        let x = t.embeddings().expect("synthetic rows carry embeddings");
                        let y = t.labels().expect("synthetic rows are labelled");
                        let (model, _) =
                            train_linear_with_classes(x.view(), &y, cfg.class_count, spec, plan.training.steps, plan.training.lr)?;
                        data.map(|s, _| relogit(s, &model))
                    };
                    let base = train(0)?;
                    let members = (0..pool as u64).map(train).collect::<Result<Vec<_>>>()?;
                    Ok(Prepared { base, members })
                }
            }
        }
    }
}

fn labels_of(set: &EvalSet) -> Result<Vec<usize>> {
    set.labels()
        .ok_or_else(|| Error::invalid(format!("{} has unlabelled records", set.name)))
}

fn run_single(plan: &ExperimentPlan, prep: &Prepared, spec: &CalibratorSpec, seed: u64) -> Result<Vec<Scores>> {
    let base = &prep.base;
    let id = CalibSet::from_eval_set(&base.calib)?;
    let fitted = if spec.ood {
        let pool = base
            .ood
            .as_ref()
            .ok_or_else(|| Error::invalid("OOD exposure needs an OOD pool"))?;
        let policy = OodPolicy { seed, ..plan.ood };
        fit_with_ood_logits(spec.method, &id, pool.logits().view(), &policy)?
    } else {
        fit_method(spec.method, &id)?
    };
    let fitted = if spec.dac {
        fit_dac_calibrator(fitted, &id, plan.dac_k)?
    } else {
        fitted
    };
    base.evals
        .iter()
        .map(|s| {
            let layers = match (spec.dac, s.embeddings()) {
                (false, _) => Vec::new(),
                (true, Some(e)) => vec![e],
                (true, None) => return Err(Error::invalid(format!("{} has no embeddings for DAC", s.name))),
            };
            let p = fitted.apply(s.logits().view(), &layers)?;
            Ok(Scores::from(&evaluate(&p, &labels_of(s)?, plan.bins)?))
        })
        .collect()
}

fn run_ensemble(
    plan: &ExperimentPlan,
    prep: &Prepared,
    spec: &CalibratorSpec,
    combo: &[usize],
    post: bool,
    seed: u64,
) -> Result<Vec<Scores>> {
    if spec.dac {
        return Err(Error::invalid("DAC is not available inside ensembles"));
    }
    let recipe = FitRecipe {
        method: spec.method,
        ood: spec.ood.then_some(OodPolicy { seed, ..plan.ood }),
    };
    let sizes: Vec<usize> = prep.base.evals.iter().map(EvalSet::len).collect();
    let members = combo
        .iter()
        .map(|&m| {
            let s = &prep.members[m];
            let evals: Vec<Array2<f64>> = s.evals.iter().map(EvalSet::logits).collect();
            let views: Vec<_> = evals.iter().map(|e| e.view()).collect();
            Ok(Member {
                calib_logits: s.calib.logits(),
                eval_logits: ndarray::concatenate(Axis(0), &views).map_err(|e| Error::DimensionMismatch(e.to_string()))?,
                ood_logits: s.ood.as_ref().map(EvalSet::logits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = MemberSet::new(labels_of(&prep.members[combo[0]].calib)?, members)?;
    let probs = if post {
        ensemble_then_calibrate(&set, &recipe)?
    } else {
        calibrate_then_ensemble(&set, &recipe)?
    };
    let mut start = 0;
    prep.base
        .evals
        .iter()
        .zip(sizes)
        .map(|(s, n)| {
            let part = ProbMatrix::from_rows_unchecked(probs.as_array().slice(s![start..start + n, ..]).to_owned());
            start += n;
            Ok(Scores::from(&evaluate(&part, &labels_of(s)?, plan.bins)?))
        })
        .collect()
}

struct CellKey<'a> {
    dataset: &'a str,
    loss: &'a str,
    calibrator: String,
    seed: u64,
}

fn emit(rows: &mut Vec<ResultRow>, key: &CellKey<'_>, ensemble: String, splits: Option<&[EvalSet]>, result: Result<Vec<Scores>>) {
    let base = |split: &str, role: &str| ResultRow {
        dataset: key.dataset.to_string(),
        split: split.to_string(),
        role: role.to_string(),
        loss: key.loss.to_string(),
        calibrator: key.calibrator.clone(),
        ensemble: ensemble.clone(),
        seed: key.seed,
        scores: None,
        error: None,
    };
    match (result, splits) {
        (Ok(scores), Some(splits)) => {
            for (s, sc) in splits.iter().zip(scores) {
                rows.push(ResultRow {
                    scores: Some(sc),
                    ..base(&s.name, s.role.as_str())
                });
            }
        }
        (Err(e), Some(splits)) => {
            for s in splits {
                rows.push(ResultRow {
                    error: Some(e.to_string()),
                    ..base(&s.name, s.role.as_str())
                });
            }
        }
        (result, None) => rows.push(ResultRow {
            error: Some(result.err().map_or_else(|| "no splits".to_string(), |e| e.to_string())),
            ..base("*", "")
        }),
    }
}

/// Runs every grid cell in order. Failures are recorded in the affected
/// rows and the run continues.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    let pool = plan.ensembles.iter().filter_map(|e| e.draw()).map(|d| d.pool).max().unwrap_or(0);
    let mut rows = Vec::new();
    for ds in &plan.datasets {
        let losses: Vec<(String, Option<&LossSpec>)> = match (&ds.source, plan.losses.is_empty()) {
            (DataSource::Files(_), _) => vec![("precomputed".into(), None)],
            (DataSource::Synth(_), true) => vec![("raw".into(), None)],
            (DataSource::Synth(_), false) => plan.losses.iter().map(|l| (l.name().to_string(), Some(l))).collect(),
        };
        for &seed in &plan.seeds {
            for (loss_name, loss) in &losses {
                let prep = prepare(plan, &ds.source, *loss, seed, pool);
                for cal in &plan.calibrators {
                    let key = CellKey {
                        dataset: &ds.name,
                        loss: loss_name,
                        calibrator: cal.label(),
                        seed,
                    };
                    let prep = match &prep {
                        Ok(p) => p,
                        Err(e) => {
                            for ens in &plan.ensembles {
                                emit(&mut rows, &key, ens.kind().to_string(), None, Err(Error::invalid(e.to_string())));
                            }
                            continue;
                        }
                    };
                    let splits = Some(prep.base.evals.as_slice());
                    for ens in &plan.ensembles {
                        match ens {
                            EnsembleSpec::Single => {
                                emit(&mut rows, &key, "single".into(), splits, run_single(plan, prep, cal, seed));
                            }
                            EnsembleSpec::Pre(d) | EnsembleSpec::Post(d) => {
                                let post = matches!(ens, EnsembleSpec::Post(_));
                                let available = prep.members.len().min(d.pool);
                                match sample_member_combinations(available, d.size, d.draws, seed) {
                                    Ok(combos) => {
                                        for combo in combos {
                                            let label = format!(
                                                "{}({})",
                                                ens.kind(),
                                                combo.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
                                            );
                                            let r = run_ensemble(plan, prep, cal, &combo, post, seed);
                                            emit(&mut rows, &key, label, splits, r);
                                        }
                                    }
                                    Err(e) => emit(&mut rows, &key, ens.kind().to_string(), splits, Err(e)),
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            samples_per_split: 300,
            sigma_shift: vec![2.0, 3.0],
            ..SynthConfig::default()
        }
    }

    fn plan(calibrators: Vec<CalibratorSpec>) -> ExperimentPlan {
        ExperimentPlan {
            datasets: vec![DatasetSpec {
                name: "synth".into(),
                source: DataSource::Synth(small_synth()),
            }],
            losses: vec![LossSpec::Ce],
            calibrators,
            ensembles: default_ensembles(),
            bins: 15,
            seeds: vec![1],
            ood: OodPolicy::default(),
            dac_k: 10,
            training: TrainingConfig::default(),
        }
    }

    #[test]
    fn grid_cardinality() {
        let p = plan(vec![
            CalibratorSpec::plain(Method::None),
            CalibratorSpec::plain(Method::Ts),
            CalibratorSpec {
                ood: true,
                ..CalibratorSpec::plain(Method::Ts)
            },
        ]);
        let rows = run_experiment(&p).unwrap();
        assert_eq!(rows.len(), 3 * 3);
        assert!(rows.iter().all(|r| r.error.is_none()), "{rows:?}");
        let names: Vec<&str> = rows.iter().step_by(3).map(|r| r.calibrator.as_str()).collect();
        assert_eq!(names, ["none", "TS", "TS+OOD"]);
        assert_eq!(rows[0].role, "ID_TEST");
        assert_eq!(rows[1].split, "shifted_0");
        assert_eq!(rows, run_experiment(&p).unwrap());
    }

    #[test]
    fn missing_file_is_isolated() {
        let mut p = plan(vec![CalibratorSpec::plain(Method::Ts)]);
        p.datasets.insert(
            0,
            DatasetSpec {
                name: "missing".into(),
                source: DataSource::Files(FileDataset {
                    splits: FileSplits {
                        id_calib: "/nonexistent/calib.jsonl".into(),
                        id_test: "/nonexistent/test.jsonl".into(),
                        shifted: vec![],
                        ood_pool: None,
                    },
                    members: vec![],
                }),
            },
        );
        let rows = run_experiment(&p).unwrap();
        assert_eq!(rows[0].dataset, "missing");
        assert!(rows[0].error.is_some() && rows[0].scores.is_none());
        assert!(rows[1..].iter().all(|r| r.dataset == "synth" && r.error.is_none()));
        assert_eq!(rows.len(), 1 + 3);
    }

    #[test]
    fn dac_and_ensembles_run() {
        let mut p = plan(vec![
            CalibratorSpec {
                dac: true,
                ..CalibratorSpec::plain(Method::Ts)
            },
            CalibratorSpec::plain(Method::Ets),
        ]);
        p.losses.clear();
        let draw = MemberDraw { size: 3, pool: 4, draws: 2 };
        p.ensembles = vec![EnsembleSpec::Single, EnsembleSpec::Pre(draw), EnsembleSpec::Post(draw)];
        let rows = run_experiment(&p).unwrap();
        let ok = |cal: &str, ens: &str| {
            rows.iter()
                .filter(|r| r.calibrator == cal && r.ensemble.starts_with(ens))
                .all(|r| r.error.is_none())
        };
        assert!(ok("TS+DAC", "single"));
        assert!(ok("ETS", "pre") && ok("ETS", "post"));
        assert!(rows.iter().filter(|r| r.calibrator == "TS+DAC" && r.ensemble != "single").all(|r| r.error.is_some()));
        assert_eq!(rows.len(), 2 * (1 + 2 + 2) * 3);
    }

    #[test]
    fn plan_json_defaults() {
        let text = r#"{
            "datasets": [{"name": "s", "synth": {"samples_per_split": 100}}],
            "calibrators": [{"method": "ts"}, {"method": "ebs", "ood": true}],
            "ensembles": [{"kind": "single"}, {"kind": "pre", "pool": 4, "draws": 2}]
        }"#;
        let p: ExperimentPlan = serde_json::from_str(text).unwrap();
        assert_eq!(p.bins, 15);
        assert_eq!(p.seeds, vec![0]);
        assert_eq!(p.calibrators[1].label(), "EBS");
        assert_eq!(p.ensembles[1], EnsembleSpec::Pre(MemberDraw { size: 3, pool: 4, draws: 2 }));
        assert!(ExperimentPlan { calibrators: vec![], ..p }.validate().is_err());
    }
}
