use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use xnv_core::bounds::{linear_gram, multiview_excess_risk_bound, rademacher_bound, split_gram_blocks, RademacherBound};
use xnv_core::cca::fit_cca;
use xnv_core::dataset::{load_dataset, write_csv, Dataset};
use xnv_core::experiment::{emit_report, parse_config_text, run_experiment, ExperimentConfig};
use xnv_core::pipeline::{fit_featurizer, fit_pipeline, PipelineOptions, XnvPipeline};
use xnv_core::regressors::mean_squared_error;
use xnv_core::rng::substream;
use xnv_core::selectron::{
    coopt_objective, coopt_reward_form, specialization, train_selectron_coopt, Scenario, Specialization, TrainConfig,
    TrainMode,
};
use xnv_core::{Error, Result};

#[derive(Parser)]
#[command(name = "xnv", version, about = "Semi-supervised regression with correlated Nystrom views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit landmarks and CCA on a dataset and write canonical features as CSV.
    Featurize(FeaturizeArgs),
    /// Fit an XNV model and save it as JSON.
    Train(TrainArgs),
    /// Score a saved model on the labeled rows of a dataset.
    Eval(EvalArgs),
    /// Compare algorithms over labeled-set sizes and seeds.
    Bench(BenchArgs),
    /// Co-regularization Rademacher bound and multiview excess-risk bound.
    Bound(BoundArgs),
    /// Train selectrons on a JSON scenario.
    Selectron(SelectronArgs),
}

/// Flags shared with the flat config file; anything given here overrides it.
#[derive(Args, Default)]
struct ExperimentFlags {
    /// Flat `key = value` file using the long flag names as keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long, value_name = "csv|sparse")]
    format: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, value_name = "LIST")]
    algos: Option<String>,
    #[arg(long, value_name = "gaussian|linear|poly")]
    kernel: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    /// Multiples of the median pairwise distance tried when --sigma is unset.
    #[arg(long, value_name = "LIST")]
    sigma_grid: Option<String>,
    #[arg(long)]
    degree: Option<String>,
    #[arg(long)]
    offset: Option<String>,
    #[arg(long, value_name = "M")]
    landmarks: Option<String>,
    #[arg(long, value_name = "LIST")]
    gamma_grid: Option<String>,
    #[arg(long, value_name = "LIST")]
    coupling_grid: Option<String>,
    #[arg(long)]
    cca_eps: Option<String>,
    #[arg(long)]
    lambda_floor: Option<String>,
    #[arg(long)]
    penalty_scale: Option<String>,
    #[arg(long, value_name = "LIST")]
    ell: Option<String>,
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    #[arg(long)]
    test_frac: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long, value_name = "BOOL")]
    standardize: Option<String>,
    #[arg(long, value_name = "BOOL")]
    warmup: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_name = "json|csv")]
    report: Option<String>,
}

impl ExperimentFlags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> =
            self.data.iter().map(|p| ("data".to_string(), p.display().to_string())).collect();
        let scalars = [
            ("format", &self.format),
            ("label", &self.label),
            ("algos", &self.algos),
            ("kernel", &self.kernel),
            ("sigma", &self.sigma),
            ("sigma-grid", &self.sigma_grid),
            ("degree", &self.degree),
            ("offset", &self.offset),
            ("landmarks", &self.landmarks),
            ("gamma-grid", &self.gamma_grid),
            ("coupling-grid", &self.coupling_grid),
            ("cca-eps", &self.cca_eps),
            ("lambda-floor", &self.lambda_floor),
            ("penalty-scale", &self.penalty_scale),
            ("ell", &self.ell),
            ("seeds", &self.seeds),
            ("test-frac", &self.test_frac),
            ("folds", &self.folds),
            ("standardize", &self.standardize),
            ("warmup", &self.warmup),
            ("report", &self.report),
        ];
        for (k, v) in scalars {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        if let Some(out) = &self.out {
            pairs.push(("out".into(), out.display().to_string()));
        }
        pairs
    }

    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply(&parse_config_text(&text)?)?;
        }
        cfg.apply(&self.pairs())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FeaturizeArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    /// Reuse the featurization of a trained model instead of fitting one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write both raw Nystrom views instead of canonical coordinates.
    #[arg(long)]
    raw_views: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    /// Where to write the model JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long, default_value = "y")]
    label: String,
    /// Optional CSV of per-row predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    flags: ExperimentFlags,
    #[arg(long, default_value_t = 1.0)]
    a1: f64,
    #[arg(long, default_value_t = 1.0)]
    a2: f64,
    /// Co-regularization strengths to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10,100")]
    aco: Vec<f64>,
    /// `nystrom`: the two landmark views; `columns`: first and second half of
    /// the feature columns.
    #[arg(long, default_value = "nystrom")]
    views: String,
    /// Gram blocks from raw dot products of the view vectors (`linear`) or from
    /// the configured kernel on each view (`kernel`, column views only).
    #[arg(long, default_value = "linear")]
    gram: String,
    /// Unlabeled rows are subsampled to at most this many.
    #[arg(long, default_value_t = 2000)]
    max_unlabeled: usize,
    /// Assumption-(A) slack for the multiview excess-risk bound.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelectronArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 10)]
    replicates: u64,
    #[arg(long, default_value = "batch")]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_first(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.data.first().ok_or_else(|| Error::Config("no --data given".into()))?;
    load_dataset(path, cfg.format, &cfg.label)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn featurize(args: FeaturizeArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let ds = load_first(&cfg)?;
    let featurizer = match &args.model {
        Some(p) => XnvPipeline::load(p)?.featurizer,
        None => fit_featurizer(&ds, &PipelineOptions::from_config(&cfg, args.seed))?,
    };
    let (features, names) = if args.raw_views {
        let (z1, z2) = featurizer.views(&ds.features)?;
        let names = (1..=z1.ncols())
            .map(|j| format!("v1_{j}"))
            .chain((1..=z2.ncols()).map(|j| format!("v2_{j}")))
            .collect::<Vec<_>>();
        let joined = DMatrix::from_fn(z1.nrows(), z1.ncols() + z2.ncols(), |i, j| {
            if j < z1.ncols() {
                z1[(i, j)]
            } else {
                z2[(i, j - z1.ncols())]
            }
        });
        (joined, names)
    } else {
        let z = featurizer.canonical(&ds.features)?;
        let names = (1..=z.ncols()).map(|j| format!("c{j}")).collect::<Vec<_>>();
        (z, names)
    };
    let mut buf = Vec::new();
    write_csv(&mut buf, &features, &names, &ds.labels, &cfg.label)?;
    write_output(cfg.out.as_deref(), &String::from_utf8_lossy(&buf))
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    labeled: usize,
    rows: usize,
    gamma: f64,
    kernel: xnv_core::kernels::KernelSpec,
    canonical_directions: usize,
    train_mse: f64,
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let ds = load_first(&cfg)?;
    let pipeline = fit_pipeline(&ds, &PipelineOptions::from_config(&cfg, args.seed))?;
    pipeline.save(&args.model)?;
    let summary = TrainSummary {
        model: args.model,
        labeled: ds.labeled_indices().len(),
        rows: ds.len(),
        gamma: pipeline.gamma,
        kernel: pipeline.featurizer.view1.kernel,
        canonical_directions: pipeline.featurizer.cca.num_directions(),
        train_mse: pipeline.model.train_mse,
    };
    write_output(cfg.out.as_deref(), &json(&summary)?)
}

#[derive(Serialize)]
struct EvalSummary {
    labeled: usize,
    mse: f64,
}

fn eval(args: EvalArgs) -> Result<()> {
    let pipeline = XnvPipeline::load(&args.model)?;
    let ds = load_dataset(&args.data, args.format.parse()?, &args.label)?;
    let pred = pipeline.predict(&ds.features)?;
    let labeled = ds.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::Data("evaluation data has no labeled rows".into()));
    }
    let y = ds.labels_of(&labeled)?;
    let p: Vec<f64> = labeled.iter().map(|&i| pred[i]).collect();
    if let Some(path) = &args.predictions {
        let m = DMatrix::from_column_slice(pred.len(), 1, &pred);
        let mut buf = Vec::new();
        write_csv(&mut buf, &m, &["prediction".to_string()], &ds.labels, &args.label)?;
        std::fs::write(path, buf)?;
    }
    let summary = EvalSummary { labeled: labeled.len(), mse: mean_squared_error(&p, &y)? };
    write_output(None, &json(&summary)?)
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let report = run_experiment(&cfg)?;
    let text = emit_report(&report, cfg.report, cfg.out.as_deref())?;
    if cfg.out.is_none() {
        write_output(None, &text)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundEntry {
    a_co: f64,
    #[serde(flatten)]
    bound: RademacherBound,
}

#[derive(Serialize)]
struct BoundSummary {
    views: String,
    gram: String,
    labeled: usize,
    unlabeled: usize,
    a1: f64,
    a2: f64,
    rademacher: Vec<BoundEntry>,
    epsilon: f64,
    canonical_correlations: Vec<f64>,
    multiview_excess_risk: f64,
}

fn bound(args: BoundArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let ds = load_first(&cfg)?;
    let labeled = ds.labeled_indices();
    let mut unlabeled = ds.unlabeled_indices();
    if unlabeled.len() > args.max_unlabeled {
        let mut rng = substream(args.seed, "bound-unlabeled", &[]);
        let mut keep = rand::seq::index::sample(&mut rng, unlabeled.len(), args.max_unlabeled).into_vec();
        keep.sort_unstable();
        unlabeled = keep.into_iter().map(|i| unlabeled[i]).collect();
    }
    let rows: Vec<usize> = unlabeled.iter().chain(&labeled).copied().collect();
    let subset = Dataset::new(ds.name.clone(), ds.features.select_rows(&rows), rows.iter().map(|&i| ds.labels[i]).collect())?;

    let (z1, z2) = match args.views.as_str() {
        "nystrom" => {
            let f = fit_featurizer(&subset, &PipelineOptions::from_config(&cfg, args.seed))?;
            f.views(&subset.features)?
        }
        "columns" => {
            let d = subset.dim();
            if d < 2 {
                return Err(Error::Config("column views need at least two feature columns".into()));
            }
            let x = if cfg.standardize {
                let all: Vec<usize> = (0..subset.len()).collect();
                xnv_core::dataset::Standardization::fit(&subset.features, &all)?.apply(&subset.features)?
            } else {
                subset.features.clone()
            };
            (x.columns(0, d / 2).into_owned(), x.columns(d / 2, d - d / 2).into_owned())
        }
        other => return Err(Error::Config(format!("unknown view construction '{other}'"))),
    };
    let (k1, k2) = match args.gram.as_str() {
        "linear" => (linear_gram(&z1), linear_gram(&z2)),
        "kernel" if args.views == "columns" => {
            let kernel = match cfg.kernel {
                xnv_core::experiment::KernelFamily::Gaussian => {
                    let s1 = cfg.sigma.unwrap_or_else(|| xnv_core::kernels::median_pairwise_distance(&z1));
                    let s2 = cfg.sigma.unwrap_or_else(|| xnv_core::kernels::median_pairwise_distance(&z2));
                    (xnv_core::kernels::KernelSpec::gaussian(s1)?, xnv_core::kernels::KernelSpec::gaussian(s2)?)
                }
                xnv_core::experiment::KernelFamily::Linear => {
                    (xnv_core::kernels::KernelSpec::Linear, xnv_core::kernels::KernelSpec::Linear)
                }
                xnv_core::experiment::KernelFamily::Poly => {
                    let k = xnv_core::kernels::KernelSpec::polynomial(cfg.degree, cfg.offset)?;
                    (k, k)
                }
            };
            (
                xnv_core::kernels::gram_symmetric(&kernel.0, &z1)?,
                xnv_core::kernels::gram_symmetric(&kernel.1, &z2)?,
            )
        }
        "kernel" => return Err(Error::Config("--gram kernel applies to --views columns".into())),
        other => return Err(Error::Config(format!("unknown gram construction '{other}'"))),
    };
    let blocks = split_gram_blocks(&k1, &k2, labeled.len(), None)?;
    let rademacher = args
        .aco
        .iter()
        .map(|&a_co| Ok(BoundEntry { a_co, bound: rademacher_bound(&blocks, args.a1, args.a2, a_co)? }))
        .collect::<Result<Vec<_>>>()?;
    let cca = fit_cca(&z1, &z2, cfg.cca_eps)?;
    let multiview = multiview_excess_risk_bound(args.epsilon, &cca.correlations, labeled.len().max(1))?;
    let summary = BoundSummary {
        views: args.views,
        gram: args.gram,
        labeled: labeled.len(),
        unlabeled: unlabeled.len(),
        a1: args.a1,
        a2: args.a2,
        rademacher,
        epsilon: args.epsilon,
        canonical_correlations: cca.correlations,
        multiview_excess_risk: multiview,
    };
    write_output(cfg.out.as_deref(), &json(&summary)?)
}

#[derive(Serialize)]
struct ReplicateSummary {
    replicate: u64,
    initial_objective: f64,
    final_objective: f64,
    accepted_steps: usize,
    /// Reward-form value at the trained state, reported next to the
    /// objective rather than asserted equal to it.
    reward_form: f64,
    held_out: Specialization,
    selective: bool,
    v: Vec<f64>,
}

#[derive(Serialize)]
struct SelectronSummary {
    scenario: Scenario,
    selective_replicates: usize,
    replicates: Vec<ReplicateSummary>,
}

fn selectron(args: SelectronArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scenario)
        .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", args.scenario.display())))?;
    let scenario = Scenario::from_json(&text)?;
    let mode = match args.mode.as_str() {
        "batch" => TrainMode::Batch,
        "online" => TrainMode::Online,
        other => return Err(Error::Config(format!("unknown training mode '{other}'"))),
    };
    let mut replicates = Vec::new();
    for r in 0..args.replicates {
        let (train, test) = scenario.generate(r)?;
        let init = scenario.initial_state(r);
        let config = TrainConfig { lr: scenario.lr, epochs: scenario.epochs, mode, seed: r };
        let outcome = train_selectron_coopt(&init, &train, &config)?;
        let held_out = specialization(&outcome.state, &test)?;
        replicates.push(ReplicateSummary {
            replicate: r,
            initial_objective: outcome.initial_objective,
            final_objective: coopt_objective(&outcome.state, &train)?,
            accepted_steps: outcome.accepted_steps,
            reward_form: coopt_reward_form(&outcome.state, &train)?,
            selective: held_out.is_selective(),
            held_out,
            v: outcome.state.v.clone(),
        });
    }
    let summary = SelectronSummary {
        selective_replicates: replicates.iter().filter(|r| r.selective).count(),
        scenario,
        replicates,
    };
    write_output(args.out.as_deref(), &json(&summary)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Bound(a) => bound(a),
        Command::Selectron(a) => selectron(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
