use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use calshift::calibrators::{fit_method, CalibSet, Calibrator, Method};
use calshift::dac::{fit_dac_calibrator, DEFAULT_K};
use calshift::data::{load_records, save_records, EvalSet, Role};
use calshift::ensemble::{calibrate_then_ensemble, ensemble_then_calibrate, FitRecipe, Member, MemberSet};
use calshift::harness::{
    emit_report, friedman_test, load_results, metric_matrix, nemenyi_test, run_experiment, synth_generate,
    ExperimentPlan, SplitFilter, SynthConfig,
};
use calshift::losses::{train_linear_with_classes, LossSpec, DEFAULT_ER_ALPHA, DEFAULT_LS_LAMBDA};
use calshift::metrics::{evaluate, ProbMatrix, DEFAULT_BINS};
use calshift::ood::{fit_with_ood, LabelMode, OodPolicy, DEFAULT_OOD_RATIO};

#[derive(Parser)]
#[command(name = "calshift", version, about = "Post-hoc calibration toolkit and shift benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift benchmark as record files
    Gen(GenArgs),
    /// Fit a calibrator and save it as JSON
    Fit(FitArgs),
    /// Apply a saved calibrator and write probabilities as JSON lines
    Apply(ApplyArgs),
    /// Print metrics for a record file, optionally through a calibrator
    Eval(EvalArgs),
    /// Calibrate an ensemble before or after averaging and print metrics
    Ensemble(EnsembleArgs),
    /// Run an experiment plan and write report files
    Grid(GridArgs),
    /// Friedman and Nemenyi tests over a results.csv report
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic config; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma_id: Option<f64>,
    /// Comma-separated noise scales, one shifted split each
    #[arg(long, value_delimiter = ',')]
    sigma_shift: Option<Vec<f64>>,
    #[arg(long)]
    sigma_ood: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the raw logits with a linear model trained with this loss
    #[arg(long)]
    loss: Option<String>,
    #[arg(long, default_value_t = DEFAULT_LS_LAMBDA)]
    ls_lambda: f64,
    #[arg(long, default_value_t = DEFAULT_ER_ALPHA)]
    er_alpha: f64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OodArgs {
    /// Unlabelled OOD pool records; enables OOD exposure
    #[arg(long)]
    ood_pool: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_OOD_RATIO)]
    ood_ratio: f64,
    /// OOD target convention (default: the method's own)
    #[arg(long, value_enum)]
    ood_label: Option<OodLabel>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OodLabel {
    Uniform,
    Zero,
}

impl OodArgs {
    fn policy(&self) -> OodPolicy {
        OodPolicy {
            ratio: self.ood_ratio,
            label_mode: self.ood_label.map(|l| match l {
                OodLabel::Uniform => LabelMode::Uniform,
                OodLabel::Zero => LabelMode::Zero,
            }),
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Labelled calibration records
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    method: String,
    #[command(flatten)]
    ood: OodArgs,
    /// Wrap the fitted calibrator with density-aware temperature modulation
    #[arg(long)]
    dac: bool,
    #[arg(long, default_value_t = DEFAULT_K)]
    dac_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Labelled records
    #[arg(long)]
    input: PathBuf,
    /// Saved calibrator (raw softmax when omitted)
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long)]
    reliability_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Pre,
    Post,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Comma-separated calibration record files, one per member
    #[arg(long, value_delimiter = ',', required = true)]
    members: Vec<PathBuf>,
    /// Comma-separated evaluation record files, in the same member order
    #[arg(long, value_delimiter = ',', required = true)]
    eval_members: Vec<PathBuf>,
    #[arg(long, value_enum)]
    ensemble_order: Order,
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Id,
    Shifted,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "ece")]
    metric: String,
    #[arg(long, value_enum, default_value = "shifted")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Fit(a) => fit(a),
        Command::Apply(a) => apply(a),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Grid(a) => grid(a),
        Command::Stats(a) => stats(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                cfg.$field = v;
            }
        };
    }
    set!(class_count, a.classes);
    set!(feature_dim, a.dim);
    set!(samples_per_split, a.samples);
    set!(mu, a.mu);
    set!(sigma_id, a.sigma_id);
    set!(sigma_shift, a.sigma_shift);
    set!(sigma_ood, a.sigma_ood);
    set!(seed, a.seed);

    let mut sets = synth_generate(&cfg)?;
    if let Some(name) = &a.loss {
        let spec = match name.parse::<LossSpec>()? {
            LossSpec::Ls { .. } => LossSpec::Ls { lambda: a.ls_lambda },
            LossSpec::Er { .. } => LossSpec::Er { alpha: a.er_alpha },
            LossSpec::Erls { .. } => LossSpec::Erls {
                lambda: a.ls_lambda,
                alpha: a.er_alpha,
            },
            other => other,
        };
        let train = cfg.train_split(0)?;
        let x = train.embeddings().context("training split has no embeddings")?;
        let y = train.labels().context("training split is unlabelled")?;
        let (model, loss) = train_linear_with_classes(x.view(), &y, cfg.class_count, &spec, a.steps, a.lr)?;
        eprintln!("trained {} for {} steps, final loss {loss}", spec.name(), a.steps);
        sets = sets
            .iter()
            .map(|s| {
                let e = s.embeddings().context("split has no embeddings")?;
                Ok(s.with_logits(&model.logits(e.view())?)?)
            })
            .collect::<Result<_>>()?;
    }
    fs::create_dir_all(&a.out_dir)?;
    for s in &sets {
        let path = a.out_dir.join(format!("{}.jsonl", s.name));
        save_records(s, &path)?;
        eprintln!("wrote {} ({} records)", path.display(), s.len());
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let calib = load_records(&a.calib, Role::IdCalib)?;
    let fitted = match &a.ood.ood_pool {
        Some(p) => fit_with_ood(method, &calib, &load_records(p, Role::OodPool)?, &a.ood.policy())?,
        None => fit_method(method, &CalibSet::from_eval_set(&calib)?)?,
    };
    let fitted = if a.dac {
        fit_dac_calibrator(fitted, &CalibSet::from_eval_set(&calib)?, a.dac_k)?
    } else {
        fitted
    };
    fs::write(&a.out, fitted.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("fitted {} -> {}", fitted.name, a.out.display());
    Ok(())
}

fn load_calibrator(path: &Path) -> Result<Calibrator> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Calibrator::from_json(&text)?)
}

fn calibrated(model: &Calibrator, set: &EvalSet) -> Result<ProbMatrix> {
    let layers: Vec<_> = set.embeddings().into_iter().collect();
    Ok(model.apply(set.logits().view(), &layers)?)
}

fn apply(a: ApplyArgs) -> Result<()> {
    let model = load_calibrator(&a.model)?;
    let set = load_records(&a.input, Role::IdTest)?;
    let probs = calibrated(&model, &set)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    for row in probs.view().rows() {
        serde_json::to_writer(&mut out, &row.to_vec())?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let set = load_records(&a.input, Role::IdTest)?;
    let labels = set.labels().context("evaluation records must be labelled")?;
    let model = match &a.model {
        Some(p) => load_calibrator(p)?,
        None => Calibrator::identity(),
    };
    let report = evaluate(&calibrated(&model, &set)?, &labels, a.bins)?;
    if let Some(p) = &a.reliability_csv {
        report.reliability.write_csv(fs::File::create(p)?)?;
    }
    print_json(&report)
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    if a.members.len() != a.eval_members.len() {
        bail!("{} calibration files but {} evaluation files", a.members.len(), a.eval_members.len());
    }
    let method: Method = a.method.parse()?;
    let mut members = Vec::new();
    let mut calib_labels = None;
    let mut eval_labels = None;
    for (c, e) in a.members.iter().zip(&a.eval_members) {
        let c = load_records(c, Role::IdCalib)?;
        let e = load_records(e, Role::IdTest)?;
        calib_labels.get_or_insert(c.labels().context("calibration records must be labelled")?);
        eval_labels.get_or_insert(e.labels().context("evaluation records must be labelled")?);
        members.push(Member {
            calib_logits: c.logits(),
            eval_logits: e.logits(),
            ood_logits: None,
        });
    }
    let set = MemberSet::new(calib_labels.unwrap_or_default(), members)?;
    let recipe = FitRecipe::plain(method);
    let probs = match a.ensemble_order {
        Order::Pre => calibrate_then_ensemble(&set, &recipe)?,
        Order::Post => ensemble_then_calibrate(&set, &recipe)?,
    };
    print_json(&evaluate(&probs, &eval_labels.unwrap_or_default(), a.bins)?)
}

fn grid(a: GridArgs) -> Result<()> {
    let plan = ExperimentPlan::load(&a.plan)?;
    let rows = run_experiment(&plan)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for p in emit_report(&rows, &a.out_dir)? {
        eprintln!("wrote {}", p.display());
    }
    eprintln!("{} rows, {failed} failed", rows.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct StatsOutput {
    metric: String,
    treatments: Vec<String>,
    blocks: usize,
    chi2: f64,
    p_value: f64,
    mean_ranks: Vec<f64>,
    critical_difference: Option<f64>,
    significant_pairs: Vec<(String, String)>,
}

fn stats(a: StatsArgs) -> Result<()> {
    let rows = load_results(&a.report)?;
    let split = match a.split {
        SplitArg::Id => SplitFilter::Id,
        SplitArg::Shifted => SplitFilter::Shifted,
    };
    let m = metric_matrix(&rows, &a.metric, split)?;
    let f = friedman_test(m.values.view())?;
    let (cd, pairs) = match nemenyi_test(m.values.view(), a.alpha) {
        Ok(n) => {
            let mut pairs = Vec::new();
            for i in 0..m.treatments.len() {
                for j in i + 1..m.treatments.len() {
                    if n.significant[i][j] {
                        pairs.push((m.treatments[i].clone(), m.treatments[j].clone()));
                    }
                }
            }
            (Some(n.critical_difference), pairs)
        }
        Err(e) => {
            eprintln!("Nemenyi test skipped: {e}");
            (None, Vec::new())
        }
    };
    print_json(&StatsOutput {
        metric: a.metric,
        blocks: m.blocks.len(),
        treatments: m.treatments,
        chi2: f.chi2,
        p_value: f.p_value,
        mean_ranks: f.mean_ranks,
        critical_difference: cd,
        significant_pairs: pairs,
    })
}
