//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use syncb_core::intervention::EvalMode;
use syncb_core::model::ModelKind;

use crate::config::{parse_grid, parse_policies, parse_seed_list, DataSource, RunConfig};
use crate::error::{CliError, CliResult, Classify};
use crate::experiment::{self, CHECKPOINT_FILE};
use crate::report;
use crate::server::{self, AppState, ServedModel};

#[derive(Debug, Parser)]
#[command(name = "syncb", version, about = "Concept-based and neural models with routing and interventions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV plus a group map.
    GenData(GenDataArgs),
    /// Train one model per seed and report test metrics.
    Train(RunArgs),
    /// Re-evaluate trained checkpoints on their test split.
    Eval(EvalArgs),
    /// Intervention curves and AUC for one checkpoint.
    Intervene(InterveneArgs),
    /// Train the five ablation variants.
    Ablate(RunArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run config; only its synthetic data section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data seed, overriding the config.
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long)]
    pub seed: Option<String>,
    /// dnn, cbm, cem, syncbm or syncem.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Evaluate this checkpoint instead of the config's seed directories.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated: rci, rci-group, usi.
    #[arg(long, default_value = "rci,usi")]
    pub policy: String,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub grid: String,
    #[arg(long, default_value = "routed")]
    pub eval_mode: String,
    /// Seed of the random concept selection.
    #[arg(long, default_value = "0")]
    pub seed: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the data source and split from this config instead of the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "8080")]
    pub port: u16,
    #[arg(long, default_value = "routed")]
    pub eval_mode: String,
}

fn parse_kind(name: &str) -> CliResult<ModelKind> {
    ModelKind::parse(name)
        .ok_or_else(|| CliError::usage(format!("unknown model '{name}' (expected dnn, cbm, cem, syncbm or syncem)")))
}

fn parse_eval_mode(name: &str) -> CliResult<EvalMode> {
    EvalMode::parse(name).ok_or_else(|| CliError::usage(format!("unknown eval mode '{name}' (expected routed or forced-cb)")))
}

fn single_seed(text: &str) -> CliResult<u64> {
    match parse_seed_list(text)?.as_slice() {
        [s] => Ok(*s),
        _ => Err(CliError::usage("expected a single seed")),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The config with command-line overrides applied, then validated.
pub fn resolve_run_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seeds) = &args.seed {
        config.seeds = parse_seed_list(seeds)?;
    }
    if let Some(model) = &args.model {
        config.model.kind = parse_kind(model)?;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let config = load_config(args.config.as_deref())?;
    let DataSource::Synthetic(mut synth) = config.data else {
        return Err(CliError::data(anyhow::anyhow!("gen-data needs a synthetic data source")));
    };
    if let Some(seed) = &args.seed {
        synth.seed = single_seed(seed)?;
    }
    synth.validate()?;
    experiment::gen_data(&synth, &args.out)?;
    println!("wrote {} samples to {}", synth.n_samples, args.out.display());
    Ok(())
}

fn train(args: &RunArgs) -> CliResult<()> {
    let config = resolve_run_config(args)?;
    let run = experiment::run_training(&config)?;
    experiment::write_training(&config, &run)?;
    print!("{}", report::report_table(experiment::display_name(run.kind), &run.report));
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let (paths, out) = match &args.checkpoint {
        Some(path) => {
            let out = args.run.out.clone().unwrap_or_else(|| PathBuf::from("."));
            (vec![path.clone()], out)
        }
        None => {
            let config = resolve_run_config(&args.run)?;
            let paths = config
                .seeds
                .iter()
                .map(|&s| experiment::seed_dir(&config.out_dir, s).join(CHECKPOINT_FILE))
                .collect();
            (paths, config.out_dir)
        }
    };
    let (kind, report) = experiment::evaluate_checkpoints(&paths)?;
    experiment::write_report(&out, "eval", kind, &report)?;
    print!("{}", report::report_table(experiment::display_name(kind), &report));
    Ok(())
}

fn intervene(args: &InterveneArgs) -> CliResult<()> {
    let policies = parse_policies(&args.policy)?;
    let grid = parse_grid(&args.grid)?;
    let mode = parse_eval_mode(&args.eval_mode)?;
    let seed = single_seed(&args.seed)?;
    let loaded = experiment::load_checkpoint(&args.checkpoint)?;
    let run = experiment::run_interventions(&loaded.model, &loaded.splits.test, &policies, &grid, mode, seed)?;
    experiment::write_interventions(&args.out, &run, mode)?;
    print!("{}", experiment::auc_json(&run, mode)?);
    Ok(())
}

fn ablate(args: &RunArgs) -> CliResult<()> {
    let config = resolve_run_config(args)?;
    let rows = experiment::run_ablation(&config)?;
    experiment::write_ablation(&config.out_dir, &rows)?;
    print!("{}", report::ablation_table(&rows));
    Ok(())
}

/// Model and test split for the server; `--config` replaces the
/// checkpoint's data source.
pub fn load_served(checkpoint: &Path, config: Option<&Path>, mode: EvalMode) -> CliResult<ServedModel> {
    match config {
        Some(path) => {
            let config = RunConfig::load(path)?;
            let ckpt = crate::checkpoint::Checkpoint::load(checkpoint).map_err(CliError::Data)?;
            let model = ckpt.to_model().map_err(CliError::Data)?;
            let test = experiment::load_splits(&config.data, &config.split)?.test;
            ServedModel::new(model, test, mode)
        }
        None => {
            let loaded = experiment::load_checkpoint(checkpoint)?;
            ServedModel::new(loaded.model, loaded.splits.test, mode)
        }
    }
}

fn serve(args: &ServeArgs) -> CliResult<()> {
    let mode = parse_eval_mode(&args.eval_mode)?;
    let served = load_served(&args.checkpoint, args.config.as_deref(), mode)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .runtime_err(|| "starting the async runtime".into())?;
    runtime.block_on(server::serve(Arc::new(AppState::new(served)), args.port))
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Intervene(a) => intervene(a),
        Command::Ablate(a) => ablate(a),
        Command::Serve(a) => serve(a),
    }
}

/// Parse and run; help and version requests succeed.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            return Err(CliError::Usage(text.trim_end().to_owned()));
        }
    };
    execute(&cli)
}
