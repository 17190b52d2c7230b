//! Run configuration: a TOML file merged with command-line overrides and
//! snapshotted, fully resolved, into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cis_core::train::TrainConfig;
use cis_core::{AlphaMode, Dataset, HeadMode, ModelConfig, ScmSpec, Variant};

use crate::error::{require_file, CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "CISNET_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Fully resolved configuration of a `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub spec: Option<PathBuf>,
    pub out: PathBuf,
    pub variant: Variant,
    pub kfold: usize,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// What a config file may contain; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub kfold: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub kfold: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub head: Option<HeadMode>,
    pub alpha: Option<AlphaMode>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
}

pub fn read_text(path: &Path) -> CliResult<String> {
    require_file(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::config(path.display(), e))
}

pub fn load_config_file(path: &Path) -> CliResult<RunConfigFile> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::config(path.display(), e))
}

pub fn load_spec(path: &Path) -> CliResult<ScmSpec> {
    ScmSpec::from_toml_str(&read_text(path)?).map_err(|e| CliError::config(path.display(), e))
}

pub fn load_data(path: &Path) -> CliResult<Dataset> {
    if !path.is_file() {
        return Err(CliError::Data(format!("dataset not found: {}", path.display())));
    }
    cis_core::load_dataset(path).map_err(|e| CliError::data(path.display(), e))
}

/// `base` with the keys of `table` replaced.
fn merge<T: Clone + Serialize + for<'de> Deserialize<'de>>(base: &T, table: Option<&toml::Table>, what: &str) -> CliResult<T> {
    let Some(table) = table else {
        return Ok(base.clone());
    };
    let mut merged = toml::Table::try_from(base).map_err(|e| CliError::config(what, e))?;
    for (k, v) in table {
        if !merged.contains_key(k) {
            return Err(CliError::Config(format!("{what}: unknown key `{k}`")));
        }
        merged.insert(k.clone(), v.clone());
    }
    merged.try_into().map_err(|e| CliError::config(what, e))
}

fn absolute(path: PathBuf) -> PathBuf {
    std::path::absolute(&path).unwrap_or(path)
}

impl RunConfig {
    /// Merges defaults, the file and the overrides, then checks the result
    /// against the dataset it names.
    pub fn resolve(file: RunConfigFile, flags: Overrides, default_out: PathBuf) -> CliResult<(Self, Dataset)> {
        let dataset = flags
            .dataset
            .or(file.dataset)
            .ok_or_else(|| CliError::Config("no dataset given (--data or `dataset` in the config)".into()))?;
        let data = load_data(&dataset)?;
        let spec = flags.spec.or(file.spec);
        if let Some(s) = &spec {
            require_file(s)?;
        }

        let mut model = merge(&ModelConfig::for_dataset(&data), file.model.as_ref(), "[model]")?;
        if let Some(h) = flags.head {
            model.head = h;
        }
        if let Some(a) = flags.alpha {
            model.alpha = a;
        }
        let mut train = merge(&TrainConfig::default(), file.train.as_ref(), "[train]")?;
        if let Some(v) = flags.epochs {
            train.max_epochs = v;
        }
        if let Some(v) = flags.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = flags.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = flags.patience {
            train.patience = v;
        }

        let config = RunConfig {
            dataset: absolute(dataset),
            spec: spec.map(absolute),
            out: flags.out.or(file.out).unwrap_or(default_out),
            variant: flags.variant.or(file.variant).unwrap_or(Variant::Cisnet),
            kfold: flags.kfold.or(file.kfold).unwrap_or(3),
            seeds: flags.seeds.or(file.seeds).unwrap_or_else(|| vec![1]),
            model,
            train,
        };
        config.validate(&data)?;
        Ok((config, data))
    }

    pub fn validate(&self, data: &Dataset) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_obs != data.obs_dim || self.model.num_aus != data.num_aus {
            return Err(CliError::Config(format!(
                "model expects d_obs = {}, C = {} but the dataset has {}, {}",
                self.model.d_obs, self.model.num_aus, data.obs_dim, data.num_aus
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.kfold < 2 || self.kfold > data.num_subjects {
            return Err(CliError::Config(format!(
                "--kfold {} needs 2 <= k <= {} subjects",
                self.kfold, data.num_subjects
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load_snapshot(path: &Path) -> CliResult<Self> {
        toml::from_str(&read_text(path)?).map_err(|e| CliError::config(path.display(), e))
    }
}
