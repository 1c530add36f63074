use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use onc_core::cli::{self, Meta, RunConfig};
use onc_core::data::{self, Dataset, Schema};
use onc_core::eos::{self, EosSolution};
use onc_core::metrics::{self, FeatureBatch, OncReport};
use onc_core::nn::{self, MlpConfig, SplitName, TrainConfig};
use onc_core::{propcheck, ufm, Error, Thresholds};

#[derive(Parser)]
#[command(
    name = "onc",
    version,
    about = "Ordinal neural collapse toolkit",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML file with one table per module
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $ONC_OUT_DIR, then ./onc-out)
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Print the resolved config as TOML and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Equations of state
    #[command(subcommand, arg_required_else_help = true)]
    Eos(EosCmd),
    /// Unconstrained feature model
    #[command(subcommand, arg_required_else_help = true)]
    Ufm(UfmCmd),
    /// Residual MLP
    #[command(subcommand, arg_required_else_help = true)]
    Nn(NnCmd),
    /// Collapse indicators
    #[command(subcommand, arg_required_else_help = true)]
    Metrics(MetricsCmd),
    /// Datasets
    #[command(subcommand, arg_required_else_help = true)]
    Data(DataCmd),
    /// Property suite
    #[command(subcommand, arg_required_else_help = true)]
    Check(CheckCmd),
}

#[derive(Subcommand)]
enum EosCmd {
    /// Solve at the configured lambda_w
    Solve(Common),
    /// Sweep lambda_w and locate the phase transition
    Sweep(Common),
}

#[derive(Subcommand)]
enum UfmCmd {
    /// Gradient descent on the feature model
    Train(Common),
}

#[derive(Subcommand)]
enum NnCmd {
    /// Train the MLP
    Train(NnTrainArgs),
}

#[derive(Args)]
struct NnTrainArgs {
    #[command(flatten)]
    common: Common,
    /// Use the large network shape and schedule
    #[arg(long)]
    full: bool,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Evaluate a feature dump
    Eval(MetricsEvalArgs),
}

#[derive(Args)]
struct MetricsEvalArgs {
    #[command(flatten)]
    common: Common,
    /// Feature dump CSV (`label,f_1..f_p` plus a `w` row)
    #[arg(long, value_name = "FILE", required_unless_present = "print_config")]
    features: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write a synthetic ordinal dataset
    Synth(Common),
}

#[derive(Subcommand)]
enum CheckCmd {
    /// Run every property for every link
    All(Common),
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Usage,
    Config,
    MissingFile,
    Runtime,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::MissingFile => "missing_file",
            Kind::Runtime => "runtime",
        }
    }

    fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Config => 3,
            Kind::MissingFile => 4,
            Kind::Runtime => 5,
        }
    }
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

type Outcome<T = ()> = Result<T, Failure>;

fn classify(e: &Error, fallback: Kind) -> Kind {
    match e {
        Error::MissingFile(_) => Kind::MissingFile,
        Error::Config(_) => Kind::Config,
        _ => fallback,
    }
}

fn fail(kind: Kind, e: Error) -> Failure {
    Failure {
        kind: classify(&e, kind),
        error: e.into(),
    }
}

/// Errors from validating the resolved config.
fn config<T>(r: onc_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| fail(Kind::Config, e))
}

fn runtime<T>(r: onc_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| fail(Kind::Runtime, e))
}

fn runtime_any<T>(r: anyhow::Result<T>) -> Outcome<T> {
    r.map_err(|error| Failure {
        kind: Kind::Runtime,
        error,
    })
}

fn report_failure(kind: Kind, message: &str) -> ExitCode {
    let flat = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!(
        "error kind={} message=\"{}\"",
        kind.name(),
        flat.replace('\\', "\\\\").replace('"', "\\\"")
    );
    ExitCode::from(kind.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                K::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(Kind::Usage.code())
                }
                _ => {
                    let text = e.to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments");
                    report_failure(Kind::Usage, first.trim_start_matches("error: "))
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(f.kind, &format!("{:#}", f.error)),
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Eos(EosCmd::Solve(c)) => with_config(&c, |cfg| cfg, eos_solve),
        Command::Eos(EosCmd::Sweep(c)) => with_config(&c, |cfg| cfg, eos_sweep),
        Command::Ufm(UfmCmd::Train(c)) => with_config(&c, |cfg| cfg, ufm_train),
        Command::Nn(NnCmd::Train(a)) => {
            let full = a.full;
            with_config(&a.common, move |cfg| apply_full(cfg, full), nn_train)
        }
        Command::Metrics(MetricsCmd::Eval(a)) => {
            let features = a.features.clone();
            with_config(
                &a.common,
                |cfg| cfg,
                move |cfg, out| metrics_eval(cfg, out, features.as_deref().expect("required by clap")),
            )
        }
        Command::Data(DataCmd::Synth(c)) => with_config(&c, |cfg| cfg, data_synth),
        Command::Check(CheckCmd::All(c)) => with_config(&c, |cfg| cfg, check_all),
    }
}

fn with_config(
    common: &Common,
    adjust: impl FnOnce(RunConfig) -> RunConfig,
    run: impl FnOnce(&RunConfig, &Path) -> Outcome,
) -> Outcome {
    let mut cfg = match &common.config {
        Some(path) => config(RunConfig::from_file(path))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    let cfg = adjust(cfg);
    if common.print_config {
        print!("{}", config(cfg.to_toml_string())?);
        return Ok(());
    }
    let out = cli::resolve_out_dir(common.out_dir.clone());
    run(&cfg, &out)
}

fn apply_full(mut cfg: RunConfig, full: bool) -> RunConfig {
    if full {
        let big = MlpConfig::full(cfg.mlp.input_dim);
        cfg.mlp = MlpConfig {
            seed: cfg.mlp.seed,
            prelu_init: cfg.mlp.prelu_init,
            ..big
        };
        let sched = TrainConfig::full();
        cfg.nn.epochs = sched.epochs;
        cfg.nn.lr_decay_epochs = sched.lr_decay_epochs;
        cfg.nn.batch_size = sched.batch_size;
    }
    cfg
}

/// Writes every artifact, then the metadata record.
fn emit(out: &Path, command: &str, cfg: &RunConfig, files: &[(&str, String)]) -> Outcome {
    for (name, body) in files {
        runtime(cli::write_atomic(&out.join(name), body.as_bytes()))?;
    }
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    let meta = Meta::new(command, cfg, &names);
    let meta_name = format!("{}.meta.json", command.replace(' ', "_"));
    runtime(cli::write_atomic(
        &out.join(meta_name),
        runtime(cli::to_json(&meta))?.as_bytes(),
    ))
}

fn json<T: Serialize>(v: &T) -> Outcome<String> {
    runtime(cli::to_json(v))
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    lambda_w: f64,
    lambda_h: f64,
    #[serde(rename = "C")]
    c: f64,
    solution: &'a EosSolution,
}

fn eos_solve(cfg: &RunConfig, out: &Path) -> Outcome {
    let problem = config(cfg.eos.problem())?;
    let c = runtime(eos::phase_constant(&problem))?;
    let sol = runtime(eos::solve(&problem))?;
    let summary = json(&SolveOutput {
        lambda_w: problem.lambda_w,
        lambda_h: problem.lambda_h,
        c,
        solution: &sol,
    })?;
    emit(
        out,
        "eos solve",
        cfg,
        &[
            ("eos_solve.csv", cli::solution_csv(problem.lambda_w, &sol)),
            ("eos_solve.json", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

fn eos_sweep(cfg: &RunConfig, out: &Path) -> Outcome {
    let problem = config(cfg.eos.problem())?;
    let c = runtime(eos::phase_constant(&problem))?;
    let grid = config(cfg.sweep.grid(c, problem.lambda_h))?;
    let sweep = runtime(eos::sweep_lambda_w(&problem, &grid, cfg.sweep.refine))?;
    let summary = json(&sweep.summary)?;
    emit(
        out,
        "eos sweep",
        cfg,
        &[
            ("eos_sweep.csv", cli::sweep_csv(&sweep)),
            ("eos_sweep_summary.json", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct UfmSummary {
    steps: usize,
    converged: bool,
    objective: f64,
    grad_norm: f64,
    report: OncReport,
    eos: ufm::EosComparison,
    eos_solution: EosSolution,
}

fn ufm_train(cfg: &RunConfig, out: &Path) -> Outcome {
    let uc = &cfg.ufm;
    config(uc.validate())?;
    let problem = config(uc.eos_problem())?;
    let run = runtime(ufm::train(uc))?;
    let sol = runtime(eos::solve(&problem))?;
    let cmp = runtime(ufm::compare_to_eos(uc, &run.state, &sol, 1e-4))?;
    let batch = runtime(ufm::feature_batch(uc, &run.state))?;
    let report = runtime(metrics::report(&batch, run.state.w.view(), &uc.thresholds, uc.kind))?;
    let summary = json(&UfmSummary {
        steps: run.steps,
        converged: run.converged,
        objective: run.objective,
        grad_norm: run.grad_norm,
        report,
        eos: cmp,
        eos_solution: sol,
    })?;
    let dump = runtime(cli::feature_dump_csv(
        run.state.h.view(),
        &uc.labels(),
        run.state.w.view(),
    ))?;
    emit(
        out,
        "ufm train",
        cfg,
        &[
            (
                "ufm_trajectory.csv",
                cli::trajectory_csv(&run.trajectory, uc.counts.len()),
            ),
            ("ufm_features.csv", dump),
            ("ufm_summary.json", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

fn require_file(path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(fail(Kind::MissingFile, Error::MissingFile(path.display().to_string())))
    }
}

/// Training split and optional validation split.
fn load_training_data(cfg: &RunConfig) -> Outcome<(Dataset, Option<Dataset>)> {
    let d = &cfg.data;
    let (train, val, warnings) = match &d.path {
        Some(path) => {
            let schema_path = d
                .schema
                .as_ref()
                .ok_or_else(|| fail(Kind::Config, Error::Config("data.path needs data.schema".into())))?;
            require_file(path)?;
            require_file(schema_path)?;
            let schema = runtime(Schema::from_file(schema_path))?;
            match d.train_fraction {
                Some(f) => {
                    let s = runtime(data::load_csv_split(
                        path,
                        &schema,
                        d.label_column.as_deref(),
                        d.normalization,
                        f,
                        d.split_seed,
                    ))?;
                    (s.train, Some(s.validation), s.warnings)
                }
                None => (
                    runtime(data::load_csv(
                        path,
                        &schema,
                        d.label_column.as_deref(),
                        d.normalization,
                    ))?,
                    None,
                    Vec::new(),
                ),
            }
        }
        None => {
            let (ds, _) = config(data::synth_generate(&cfg.synth))?;
            match d.train_fraction {
                Some(f) => {
                    let s = config(data::split(&ds, f, d.split_seed))?;
                    (s.train, Some(s.validation), s.warnings)
                }
                None => (ds, None, Vec::new()),
            }
        }
    };
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok((train, val))
}

#[derive(Serialize)]
struct NnSummary {
    epochs: usize,
    num_params: usize,
    train: Option<OncReport>,
    validation: Option<OncReport>,
}

fn metrics_toml(kind: onc_core::LinkKind, thr: &Thresholds) -> Outcome<String> {
    let mut cfg = RunConfig::default();
    cfg.metrics.link = kind;
    cfg.metrics.thresholds = Some(thr.clone());
    cfg.metrics.num_classes = Some(thr.num_classes());
    #[derive(Serialize)]
    struct Only<'a> {
        metrics: &'a cli::MetricsSection,
    }
    runtime_any(toml::to_string(&Only { metrics: &cfg.metrics }).context("serializing thresholds"))
}

fn nn_train(cfg: &RunConfig, out: &Path) -> Outcome {
    let (train, val) = load_training_data(cfg)?;
    let mut mlp = cfg.mlp.clone();
    mlp.input_dim = train.input_dim();
    config(mlp.validate())?;
    config(cfg.nn.validate())?;
    let run = runtime(nn::train(&mlp, &cfg.nn, &train, val.as_ref()))?;
    let thr = run.thresholds.thresholds();
    let feats = runtime(nn::features(&run.params, &train))?;
    let dump = runtime(cli::feature_dump_csv(
        feats.view(),
        &train.labels,
        run.params.classifier(),
    ))?;
    let summary = json(&NnSummary {
        epochs: cfg.nn.epochs,
        num_params: run.params.len(),
        train: run.last(SplitName::Train).map(|r| r.report),
        validation: run.last(SplitName::Validation).map(|r| r.report),
    })?;
    let mut resolved = cfg.clone();
    resolved.mlp = mlp;
    emit(
        out,
        "nn train",
        &resolved,
        &[
            ("nn_history.csv", cli::history_csv(&run.history)),
            ("nn_features.csv", dump),
            ("nn_metrics.toml", metrics_toml(cfg.nn.kind, &thr)?),
            ("nn_summary.json", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

fn metrics_eval(cfg: &RunConfig, out: &Path, features: &Path) -> Outcome {
    let dump = runtime(cli::parse_feature_dump(&runtime(cli::read_file(features))?))?;
    let m = &cfg.metrics;
    let q = match (&m.thresholds, m.num_classes) {
        (Some(t), _) => t.num_classes(),
        (None, Some(q)) => q,
        (None, None) => dump.labels.iter().copied().max().unwrap_or(0),
    };
    let thr = match &m.thresholds {
        Some(t) => t.clone(),
        None => config(Thresholds::fixed(q, m.half_range))?,
    };
    let batch = runtime(FeatureBatch::new(dump.features, dump.labels, q))?;
    let report = runtime(metrics::report(&batch, dump.w.view(), &thr, m.link))?;
    let body = json(&report)?;
    emit(out, "metrics eval", cfg, &[("metrics_report.json", body.clone())])?;
    print!("{body}");
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    samples: usize,
    num_classes: usize,
    input_dim: usize,
    class_counts: Vec<usize>,
    direction: Vec<f64>,
}

fn data_synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let (ds, direction) = config(data::synth_generate(&cfg.synth))?;
    let summary = json(&SynthSummary {
        samples: ds.len(),
        num_classes: ds.num_classes,
        input_dim: ds.input_dim(),
        class_counts: ds.class_counts(),
        direction: direction.to_vec(),
    })?;
    emit(
        out,
        "data synth",
        cfg,
        &[
            ("synth.csv", runtime(ds.to_csv_string())?),
            ("synth.schema", ds.schema_text()),
            ("synth_summary.json", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

fn check_all(cfg: &RunConfig, out: &Path) -> Outcome {
    let c = &cfg.check;
    config(c.validate())?;
    let reports = runtime(propcheck::check_all(c.trials, c.seed, c.lambda))?;
    let mut grouped: BTreeMap<String, Vec<propcheck::PropertyReport>> = BTreeMap::new();
    for r in &reports {
        let key = runtime_any(serde_json::to_value(r.property).map_err(anyhow::Error::from))?
            .as_str()
            .unwrap_or_default()
            .to_string();
        grouped.entry(key).or_default().push(r.clone());
    }
    let body = json(&grouped)?;
    emit(out, "check all", cfg, &[("check_report.json", body.clone())])?;
    print!("{body}");
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if violations > 0 {
        return runtime_any(Err(anyhow!("{violations} property violations")));
    }
    Ok(())
}
