//! `hierflow` command line: synthetic data, training, forecasting,
//! evaluation, baseline reconciliation and matrix export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use hierflow::config::{Reconciler, RunConfig};
use hierflow::data::{self, Family, SyntheticSpec};
use hierflow::metrics::{crps, QuantileGrid};
use hierflow::pipeline::{baseline_forecast, train, write_training_log, Checkpoint};
use hierflow::reconcile::{
    hier_e2e_projection, mint_projection, mint_weights, seasonal_naive_residuals, LinearReconciler, MintMode,
    ProjectionMatrix,
};
use hierflow::{Error, ErrorKind, HierarchyTree, Result};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "hierflow", version, about = "Coherent probabilistic forecasting for hierarchical time series")]
struct Cli {
    /// Flat `key = value` config file; command line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Log (and report errors) as JSON lines.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hierarchical dataset.
    Synth(SynthArgs),
    /// Fit the model and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Sample forecast paths and write the ensemble CSV.
    Forecast(ForecastArgs),
    /// Score an ensemble against actuals.
    Evaluate(EvaluateArgs),
    /// Apply a closed-form reconciler to base forecasts.
    Reconcile(ReconcileArgs),
    /// Write S, A, M and the projection matrices to CSV.
    DumpMatrices(DumpArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    branching: usize,
    #[arg(long, default_value_t = 200)]
    length: usize,
    #[arg(long, default_value = "gaussian-ar1")]
    family: String,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 12)]
    period: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Treat the last N panel rows as unseen.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint path to write (default: <output_dir>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training log path (default: <output_dir>/training_log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to read (default: <output_dir>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// cnf, naive-bu, mint-ols, mint-shr or hier-e2e-proj.
    #[arg(long)]
    reconciler: Option<String>,
    /// Ensemble CSV to write (default: <output_dir>/ensemble.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    #[arg(long)]
    ensemble: PathBuf,
    /// Long-format panel holding the actual values.
    #[arg(long)]
    actuals: PathBuf,
    /// Score against the last `horizon` rows of the actuals file.
    #[arg(long)]
    last: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconcileArgs {
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Base forecasts in `sample_id,step,node_id,value` form for every node.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    method: Option<String>,
    /// History used for mint-shr residuals.
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// History used for the mint-shr projection.
    #[arg(long)]
    panel: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

fn report(kind: ErrorKind, message: &str, json: bool) -> ExitCode {
    let code = exit_code(kind);
    let message = message.replace('\n', " ");
    if json {
        let line = serde_json::json!({"level": "error", "kind": kind_name(kind), "exit": code, "message": message});
        eprintln!("{line}");
    } else {
        eprintln!("error kind={} exit={code} message={message:?}", kind_name(kind));
    }
    ExitCode::from(code)
}

fn init_logging(quiet: bool, json: bool) {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(if quiet { log::LevelFilter::Error } else { log::LevelFilter::Info });
    builder.parse_env("HIERFLOW_LOG");
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        builder.format_timestamp(None);
    }
    let _ = builder.try_init();
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let json = args.iter().any(|a| a == "--json-logs");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            return report(ErrorKind::Usage, &first, json);
        }
    };
    init_logging(cli.quiet, cli.json_logs);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), &e.to_string(), cli.json_logs),
    }
}

/// Config file, then explicit flags, then `--set` pairs. `HIERFLOW_SEED`
/// applies when nothing else sets the seed.
fn load_config(cli: &Cli, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let (mut cfg, mut keys) = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => (RunConfig::default(), Vec::new()),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
            keys.push(k.to_string());
        }
    }
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.set(k.trim(), v.trim())?;
        keys.push(k.trim().to_string());
    }
    if !keys.iter().any(|k| k == "seed") {
        if let Ok(v) = std::env::var("HIERFLOW_SEED") {
            cfg.set("seed", &v)
                .map_err(|_| Error::Config(format!("HIERFLOW_SEED is not an integer: '{v}'")))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn data_flags(d: &DataArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("hierarchy", path_flag(&d.hierarchy)),
        ("panel", path_flag(&d.panel)),
        ("output_dir", path_flag(&d.output_dir)),
        ("seed", d.seed.map(|s| s.to_string())),
    ]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn hierarchy_of(cfg: &RunConfig) -> Result<HierarchyTree> {
    RunConfig::require_paths(&[("hierarchy", cfg.hierarchy.as_deref())])?;
    data::load_hierarchy(cfg.hierarchy.as_deref().unwrap())
}

fn load_data(cfg: &RunConfig, holdout: usize) -> Result<(data::LoadedPanel, hierflow::PanelSeries)> {
    RunConfig::require_paths(&[("hierarchy", cfg.hierarchy.as_deref()), ("panel", cfg.panel.as_deref())])?;
    let loaded = data::load_panel(
        cfg.hierarchy.as_deref().unwrap(),
        cfg.panel.as_deref().unwrap(),
        cfg.season_length,
    )?;
    let t = loaded.panel.len();
    if holdout >= t {
        return Err(Error::Data(format!("holdout {holdout} leaves no history in a panel of {t} steps")));
    }
    let history = loaded.panel.slice(0, t - holdout);
    Ok((loaded, history))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Forecast(a) => forecast_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Reconcile(a) => reconcile_cmd(cli, a),
        Command::DumpMatrices(a) => dump_cmd(cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = load_config(cli, &[("seed", a.seed.map(|s| s.to_string()))])?;
    let spec = SyntheticSpec {
        depth: a.depth,
        branching: a.branching,
        length: a.length,
        family: a.family.parse::<Family>()?,
        noise: a.noise,
        seed: cfg.train.seed,
        period: a.period,
    };
    let generated = data::generate_synthetic(&spec)?;
    data::write_synthetic(&generated, &a.out)?;
    info!(
        "wrote {} series x {} steps to {}",
        generated.panel.hierarchy.n(),
        generated.panel.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut flags = data_flags(&a.data);
    flags.push(("checkpoint", path_flag(&a.checkpoint)));
    flags.push(("epochs", a.epochs.map(|e| e.to_string())));
    let cfg = load_config(cli, &flags)?;
    let (loaded, history) = load_data(&cfg, a.data.holdout)?;
    let ckpt_path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
    let log_path = a.log.clone().unwrap_or_else(|| cfg.output_dir.join("training_log.csv"));

    let out = train(&history, loaded.covariates, &cfg.model, &cfg.train)?;
    create(&ckpt_path)?;
    out.checkpoint.save(&ckpt_path)?;
    write_training_log(&out.log, create(&log_path)?)?;
    let best = out
        .log
        .iter()
        .filter(|r| r.split == "valid" && r.epoch == out.checkpoint.best_epoch)
        .map(|r| r.nll)
        .next()
        .unwrap_or(f64::NAN);
    info!(
        "checkpoint {} (best epoch {}, valid nll {best:.5}), log {}",
        ckpt_path.display(),
        out.checkpoint.best_epoch,
        log_path.display()
    );
    Ok(())
}

fn forecast_cmd(cli: &Cli, a: &ForecastArgs) -> Result<()> {
    let mut flags = data_flags(&a.data);
    flags.push(("checkpoint", path_flag(&a.checkpoint)));
    flags.push(("horizon", a.horizon.map(|h| h.to_string())));
    flags.push(("sample_count", a.samples.map(|s| s.to_string())));
    flags.push(("reconciler", a.reconciler.clone()));
    let cfg = load_config(cli, &flags)?;
    let ckpt_path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
    if cfg.reconciler == Reconciler::Cnf {
        RunConfig::require_paths(&[("checkpoint", Some(&ckpt_path))])?;
    }
    let (loaded, history) = load_data(&cfg, a.data.holdout)?;
    let horizon = cfg.horizon();
    let labels = data::future_labels(&history, horizon);
    let ensemble = match cfg.reconciler {
        Reconciler::Cnf => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let trained = ckpt.restore()?;
            let t = history.len();
            let future = (a.data.holdout > 0)
                .then(|| loaded.panel.covariates.rows(t, a.data.holdout).into_owned());
            trained.forecast(&history, future.as_ref(), horizon, cfg.train.sample_count, cfg.train.seed, labels)?
        }
        Reconciler::Linear(method) => baseline_forecast(&history, method, cfg.season_length, horizon, labels)?,
    };
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.join("ensemble.csv"));
    data::write_ensemble(&ensemble, create(&out)?)?;
    info!(
        "{} paths x {} steps, max coherency error {:e}, written to {}",
        ensemble.samples(),
        ensemble.horizon(),
        ensemble.max_coherency_error(),
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(
        cli,
        &[
            ("hierarchy", path_flag(&a.hierarchy)),
            ("output_dir", path_flag(&a.output_dir)),
        ],
    )?;
    let tree = Arc::new(hierarchy_of(&cfg)?);
    let paths = data::read_sample_paths(&tree, File::open(&a.ensemble)?)?;
    let actual = data::read_panel(Arc::clone(&tree), File::open(&a.actuals)?, cfg.season_length)?.panel;
    let h = paths.horizon;
    let start = match (a.last, actual.len()) {
        (true, t) if t >= h => t - h,
        (false, t) if t == h => 0,
        (_, t) => {
            return Err(Error::dim(
                "evaluate horizon (ensemble steps vs actual rows)",
                h,
                t,
            ))
        }
    };
    let rows: Vec<Vec<f64>> = (start..start + h).map(|t| actual.row(t)).collect();
    let labels = actual.labels[start..start + h].to_vec();
    let ensemble = hierflow::reconcile::ForecastEnsemble {
        paths,
        hierarchy: tree,
        timestamps: labels,
    };
    let report = crps(&ensemble, &rows, &QuantileGrid::default())?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("scores.json"), report.to_json()? + "\n")?;
    report.write_csv(create(&cfg.output_dir.join("scores.csv"))?)?;
    println!(
        "crps={} mae={} mape={}",
        report.crps,
        report.mae,
        report.mape.map_or("nan".to_string(), |v| v.to_string())
    );
    Ok(())
}

fn reconcile_cmd(cli: &Cli, a: &ReconcileArgs) -> Result<()> {
    let cfg = load_config(
        cli,
        &[
            ("hierarchy", path_flag(&a.hierarchy)),
            ("panel", path_flag(&a.panel)),
            ("reconciler", a.method.clone()),
        ],
    )?;
    let Reconciler::Linear(method) = cfg.reconciler else {
        return Err(Error::Config("reconcile needs a closed-form method, not 'cnf'".into()));
    };
    let tree = Arc::new(hierarchy_of(&cfg)?);
    let base = data::read_sample_paths(&tree, File::open(&a.base)?)?;
    let residuals = match method {
        hierflow::reconcile::Baseline::MintShr => {
            let (_, history) = load_data(&cfg, 0)?;
            Some(seasonal_naive_residuals(&history.values, cfg.season_length)?)
        }
        _ => None,
    };
    let reconciler = LinearReconciler::new(method, &tree, residuals.as_ref())?;
    let labels = (1..=base.horizon).map(|k| k.to_string()).collect();
    let ensemble = reconciler.apply_paths(&base, Arc::clone(&tree), labels)?;
    data::write_ensemble(&ensemble, create(&a.out)?)?;
    info!(
        "reconciled {} paths, max coherency error {:e}",
        ensemble.samples(),
        ensemble.max_coherency_error()
    );
    Ok(())
}

fn dump_cmd(cli: &Cli, a: &DumpArgs) -> Result<()> {
    let cfg = load_config(
        cli,
        &[
            ("hierarchy", path_flag(&a.hierarchy)),
            ("panel", path_flag(&a.panel)),
        ],
    )?;
    let tree = hierarchy_of(&cfg)?;
    let ids: Vec<String> = tree.ids().to_vec();
    let (upper, leaves) = ids.split_at(tree.r());
    std::fs::create_dir_all(&a.out)?;
    let write = |name: &str, m: &hierflow::nalgebra::DMatrix<f64>, rows: &[String], cols: &[String]| -> Result<()> {
        data::write_matrix(m, rows, cols, create(&a.out.join(name))?)
    };
    let s = tree.aggregation_matrix();
    write("S.csv", &s, &ids, leaves)?;
    let a_mat = tree.structure_matrix();
    write("A.csv", &a_mat, upper, &ids)?;
    write("M.csv", &hier_e2e_projection(&a_mat)?.0, &ids, &ids)?;
    write("P_naive_bu.csv", &ProjectionMatrix::bottom_up(&tree).0, leaves, &ids)?;
    let identity = hierflow::nalgebra::DMatrix::identity(tree.n(), tree.n());
    write("P_mint_ols.csv", &mint_projection(&s, &identity)?.0, leaves, &ids)?;
    if cfg.panel.is_some() {
        let (_, history) = load_data(&cfg, 0)?;
        let w = mint_weights(&seasonal_naive_residuals(&history.values, cfg.season_length)?, MintMode::Shr)?;
        write("P_mint_shr.csv", &mint_projection(&s, &w)?.0, leaves, &ids)?;
    }
    info!("matrices for {} nodes written to {}", tree.n(), a.out.display());
    Ok(())
}
