//! JSON run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use syncb_core::data::{SynthConfig, DEFAULT_SPLIT};
use syncb_core::intervention::{validate_grid, EvalMode, Policy};
use syncb_core::model::{ModelKind, ModelWidths};
use syncb_core::training::{LossWeights, TrainConfig};

use crate::error::{CliError, CliResult, Classify};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SynthConfig::default())
    }
}

/// A CSV file plus the role of each column. Relative paths resolve against
/// the directory of the config file that names them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Feature columns; `None` takes every column that is not a concept or
    /// the label, in file order.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    pub concepts: Vec<String>,
    pub label: String,
    /// Defaults to one more than the largest label.
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Group map file: one line per group, comma-separated concept names.
    #[serde(default)]
    pub groups: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fractions: DEFAULT_SPLIT, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub widths: ModelWidths,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::SynCbm, widths: ModelWidths::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionSection {
    pub policies: Vec<Policy>,
    pub grid: Vec<f64>,
    pub eval_mode: EvalMode,
    pub seed: u64,
}

impl Default for InterventionSection {
    fn default() -> Self {
        Self {
            policies: vec![Policy::Rci, Policy::Usi],
            grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eval_mode: EvalMode::Routed,
            seed: 0,
        }
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Used by the SynCB kinds; baselines fix their own weights.
    pub weights: LossWeights,
    pub intervention: InterventionSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            split: SplitConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            intervention: InterventionSection::default(),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).data_err(|| "invalid run config".into())
    }

    /// Read and validate a config file; relative data paths are made
    /// relative to the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).data_err(|| format!("reading {}", path.display()))?;
        let mut config = Self::from_json(&text).map_err(|e| match e {
            CliError::Data(err) => CliError::Data(err.context(format!("in {}", path.display()))),
            other => other,
        })?;
        if let DataSource::Csv(csv) = &mut config.data {
            let base = path.parent().unwrap_or(Path::new("."));
            csv.path = base.join(&csv.path);
            if let Some(g) = &csv.groups {
                csv.groups = Some(base.join(g));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        let f = self.split.fractions;
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::data(anyhow::anyhow!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        self.train.validate()?;
        self.weights.validate()?;
        validate_grid(&self.intervention.grid)?;
        if self.seeds.is_empty() {
            return Err(CliError::data(anyhow::anyhow!("seed list must not be empty")));
        }
        Ok(())
    }
}

/// Parse `"0,1,2"` into seeds.
pub fn parse_seed_list(text: &str) -> CliResult<Vec<u64>> {
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| CliError::usage(format!("invalid seed '{s}'"))))
        .collect::<CliResult<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(CliError::usage("seed list must not be empty"));
    }
    Ok(seeds)
}

/// Parse `"0,0.25,0.5"` into a budget grid.
pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::usage(format!("invalid grid value '{s}'"))))
        .collect::<CliResult<Vec<_>>>()?;
    validate_grid(&grid).map_err(|e| CliError::usage(e.to_string()))?;
    Ok(grid)
}

/// Parse `"rci,usi"` into policies.
pub fn parse_policies(text: &str) -> CliResult<Vec<Policy>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            Policy::parse(s).ok_or_else(|| CliError::usage(format!("unknown policy '{s}' (expected rci, rci-group or usi)")))
        })
        .collect()
}
