//! Experiment runs: data generation, per-seed training, evaluation,
//! intervention curves and the ablation table.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use syncb_core::data::{generate_synthetic, split, ConceptDataset, SplitDataset, SynthConfig};
use syncb_core::intervention::{auc, auc_diff, intervention_curve, EvalMode, InterventionCurve, Policy};
use syncb_core::metrics::{aggregate_seeds, evaluate, EvalMetrics, EvalReport};
use syncb_core::model::{ModelKind, ModelWidths, SynCbModel};
use syncb_core::training::{init_model, train, train_baseline, LossWeights, TrainConfig, TrainHistory};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig, SplitConfig};
use crate::dataset_io::{dataset_to_csv, groups_to_text, load_csv, schema_for};
use crate::error::{CliError, CliResult, Classify};
use crate::report::{self, AblationRow};

pub const DATASET_FILE: &str = "dataset.csv";
pub const GROUPS_FILE: &str = "groups.txt";
pub const SCHEMA_FILE: &str = "data.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn display_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Dnn => "DNN",
        ModelKind::Cbm => "CBM",
        ModelKind::Cem => "CEM",
        ModelKind::SynCbm => "SynCBM",
        ModelKind::SynCem => "SynCEM",
    }
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).runtime_err(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).runtime_err(|| format!("writing {}", path.display()))
}

pub fn load_dataset(source: &DataSource) -> CliResult<ConceptDataset> {
    match source {
        DataSource::Synthetic(s) => Ok(generate_synthetic(s)?),
        DataSource::Csv(c) => load_csv(c).data_err(|| "loading dataset".into()),
    }
}

pub fn load_splits(source: &DataSource, config: &SplitConfig) -> CliResult<SplitDataset> {
    let dataset = load_dataset(source)?;
    Ok(split(&dataset, config.fractions, config.seed)?)
}

/// Write `dataset.csv`, `groups.txt` and a `data.json` column schema whose
/// paths are relative to `out`.
pub fn gen_data(synth: &SynthConfig, out: &Path) -> CliResult<()> {
    let dataset = generate_synthetic(synth)?;
    let csv = dataset_to_csv(&dataset).runtime_err(|| "rendering dataset".into())?;
    write(&out.join(DATASET_FILE), &csv)?;
    write(&out.join(GROUPS_FILE), &groups_to_text(&dataset))?;
    let schema = schema_for(&dataset, Path::new(DATASET_FILE), Some(Path::new(GROUPS_FILE)));
    let json = serde_json::to_string_pretty(&schema).runtime_err(|| "rendering schema".into())?;
    write(&out.join(SCHEMA_FILE), &(json + "\n"))
}

/// Train one model. The seed initialises the weights and drives shuffling
/// and training interventions; baselines use their fixed loss recipe.
pub fn train_seed(
    kind: ModelKind,
    widths: &ModelWidths,
    splits: &SplitDataset,
    config: &TrainConfig,
    weights: &LossWeights,
    seed: u64,
) -> CliResult<(SynCbModel, TrainHistory)> {
    let config = TrainConfig { seed, ..config.clone() };
    if kind.is_synergy() {
        let mut model = init_model(kind, widths, &splits.train, seed)?;
        let history = train(&mut model, splits, &config, weights)?;
        Ok((model, history))
    } else {
        Ok(train_baseline(kind, splits, &config, widths, seed)?)
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: SynCbModel,
    pub history: TrainHistory,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub kind: ModelKind,
    pub splits: SplitDataset,
    pub seeds: Vec<SeedRun>,
    pub report: EvalReport,
}

/// Train and test-evaluate one model per configured seed.
pub fn run_training(config: &RunConfig) -> CliResult<TrainingRun> {
    config.validate()?;
    let splits = load_splits(&config.data, &config.split)?;
    let kind = config.model.kind;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (model, history) = train_seed(kind, &config.model.widths, &splits, &config.train, &config.weights, seed)?;
        let metrics = evaluate(&model, &splits.test)?;
        seeds.push(SeedRun { seed, model, history, metrics });
    }
    let report = aggregate_seeds(&seeds.iter().map(|s| s.metrics).collect::<Vec<_>>())?;
    Ok(TrainingRun { kind, splits, seeds, report })
}

pub fn write_report(out: &Path, stem: &str, kind: ModelKind, report: &EvalReport) -> CliResult<()> {
    let json = report::report_json(kind.name(), report).runtime_err(|| "rendering report".into())?;
    write(&out.join(format!("{stem}.json")), &json)?;
    write(&out.join(format!("{stem}.txt")), &report::report_table(display_name(kind), report))
}

/// Per seed a checkpoint and history; the aggregate as `report.json/txt`.
pub fn write_training(config: &RunConfig, run: &TrainingRun) -> CliResult<()> {
    let out = &config.out_dir;
    for s in &run.seeds {
        let dir = seed_dir(out, s.seed);
        let ckpt = Checkpoint::new(&s.model, s.seed, config.data.clone(), config.split.clone());
        write(&dir.join(CHECKPOINT_FILE), &ckpt.to_json().runtime_err(|| "rendering checkpoint".into())?)?;
        write(&dir.join(HISTORY_FILE), &report::history_csv(&s.history).runtime_err(|| "rendering history".into())?)?;
    }
    write_report(out, "report", run.kind, &run.report)
}

/// A checkpoint with its model and the test split it was trained against.
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub model: SynCbModel,
    pub splits: SplitDataset,
}

pub fn load_checkpoint(path: &Path) -> CliResult<LoadedCheckpoint> {
    let checkpoint = Checkpoint::load(path).map_err(CliError::Data)?;
    let model = checkpoint.to_model().map_err(CliError::Data)?;
    let splits = load_splits(&checkpoint.data, &checkpoint.split)?;
    check_compatible(&model, &splits.test)?;
    Ok(LoadedCheckpoint { checkpoint, model, splits })
}

/// The model's input width, concept count and class count match the data.
pub fn check_compatible(model: &SynCbModel, dataset: &ConceptDataset) -> CliResult<()> {
    let cfg = model.config();
    let concepts_ok = !cfg.has_concepts() || model.n_concepts() == dataset.n_concepts();
    if cfg.input_dim != dataset.feature_dim() || !concepts_ok || model.n_classes() != dataset.n_classes() {
        return Err(CliError::data(anyhow::anyhow!(
            "model expects {} features, {} concepts, {} classes; dataset has {}, {}, {}",
            cfg.input_dim,
            model.n_concepts(),
            model.n_classes(),
            dataset.feature_dim(),
            dataset.n_concepts(),
            dataset.n_classes()
        )));
    }
    Ok(())
}

/// Re-evaluate checkpoints on their test splits and aggregate.
pub fn evaluate_checkpoints(paths: &[PathBuf]) -> CliResult<(ModelKind, EvalReport)> {
    let mut metrics = Vec::with_capacity(paths.len());
    let mut kind = None;
    for path in paths {
        let loaded = load_checkpoint(path)?;
        let k = loaded.model.kind();
        if kind.is_some_and(|prev| prev != k) {
            return Err(CliError::usage("checkpoints of different model kinds cannot be aggregated"));
        }
        kind = Some(k);
        metrics.push(evaluate(&loaded.model, &loaded.splits.test)?);
    }
    let kind = kind.ok_or_else(|| CliError::usage("no checkpoints to evaluate"))?;
    Ok((kind, aggregate_seeds(&metrics)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRun {
    pub curves: Vec<InterventionCurve>,
    pub aucs: Vec<(Policy, f64)>,
    /// `AUC(USI) − AUC(RCI)` when both policies ran.
    pub auc_diff: Option<f64>,
}

/// Curves on `dataset` for each policy; USI thresholds are estimated on
/// `dataset`.
pub fn run_interventions(
    model: &SynCbModel,
    dataset: &ConceptDataset,
    policies: &[Policy],
    grid: &[f64],
    mode: EvalMode,
    seed: u64,
) -> CliResult<InterventionRun> {
    let curves = policies
        .iter()
        .map(|&p| intervention_curve(model, dataset, p, grid, mode, seed, None))
        .collect::<syncb_core::Result<Vec<_>>>()?;
    let aucs = curves.iter().map(|c| Ok((c.policy, auc(c)?))).collect::<syncb_core::Result<Vec<_>>>()?;
    let find = |p: Policy| curves.iter().find(|c| c.policy == p);
    let diff = match (find(Policy::Usi), find(Policy::Rci)) {
        (Some(u), Some(r)) => Some(auc_diff(u, r)?),
        _ => None,
    };
    Ok(InterventionRun { curves, aucs, auc_diff: diff })
}

pub fn auc_json(run: &InterventionRun, mode: EvalMode) -> CliResult<String> {
    let mut map = Map::new();
    map.insert("eval_mode".into(), Value::String(mode.name().into()));
    for (policy, value) in &run.aucs {
        map.insert(format!("auc_{}", policy.name().replace('-', "_")), Value::from(*value));
    }
    if let Some(d) = run.auc_diff {
        map.insert("auc_diff".into(), Value::from(d));
    }
    let text = serde_json::to_string_pretty(&Value::Object(map)).runtime_err(|| "rendering AUC report".into())?;
    Ok(text + "\n")
}

pub fn write_interventions(out: &Path, run: &InterventionRun, mode: EvalMode) -> CliResult<()> {
    let csv = report::curves_csv(&run.curves).runtime_err(|| "rendering curves".into())?;
    write(&out.join("curves.csv"), &csv)?;
    write(&out.join("auc.json"), &auc_json(run, mode)?)
}

/// The five ablation rows: the full model, then one switch flipped each.
pub fn ablation_variants(kind: ModelKind, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |f: fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        (display_name(kind).to_owned(), base.clone()),
        ("w/o Interv. Loss".to_owned(), with(|c| c.use_intervention_loss = false)),
        ("with Early Routing".to_owned(), with(|c| c.early_routing = true)),
        ("w/o Gradient Concepts".to_owned(), with(|c| c.grad_from_cb = false)),
        ("w/o Gradient Residual".to_owned(), with(|c| c.grad_from_nn = false)),
    ]
}

/// Train every ablation variant over the configured seeds.
pub fn run_ablation(config: &RunConfig) -> CliResult<Vec<AblationRow>> {
    config.validate()?;
    let kind = config.model.kind;
    if !kind.is_synergy() {
        return Err(CliError::usage(format!("ablation needs syncbm or syncem, got {}", kind.name())));
    }
    let splits = load_splits(&config.data, &config.split)?;
    ablation_variants(kind, &config.train)
        .into_iter()
        .map(|(label, train_cfg)| {
            let metrics = config
                .seeds
                .iter()
                .map(|&seed| {
                    let (model, _) =
                        train_seed(kind, &config.model.widths, &splits, &train_cfg, &config.weights, seed)?;
                    Ok(evaluate(&model, &splits.test)?)
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(AblationRow { label, report: aggregate_seeds(&metrics)? })
        })
        .collect()
}

pub fn write_ablation(out: &Path, rows: &[AblationRow]) -> CliResult<()> {
    write(&out.join("ablation.txt"), &report::ablation_table(rows))?;
    write(&out.join("ablation.json"), &report::ablation_json(rows).runtime_err(|| "rendering ablation".into())?)
}
