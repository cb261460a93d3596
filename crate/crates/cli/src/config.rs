//! Run configuration: one TOML file with `[run]`, `[model]`, `[data]`,
//! `[training]` and an optional `[ablation]` section.

use std::path::{Path, PathBuf};

use als_core::calibration::DEFAULT_BINS;
use als_core::registry::GKind;
use als_core::trainer::{CopyData, DataConfig, Method, MixtureData, ModelConfig, Network, Task, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that relocates the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ALS_OUTPUT_ROOT";
/// Output root used when neither the config nor the environment names one.
pub const DEFAULT_OUTPUT_ROOT: &str = "als-runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_name")]
    pub name: String,
    /// Root seed for data, initialisation and shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_bins")]
    pub calibration_bins: usize,
}

fn default_name() -> String {
    "run".into()
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: default_name(),
            seed: 0,
            output_dir: None,
            calibration_bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub task: Task,
    /// Defaults to `data.dim` for the mixture task; unused for sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// `TrainConfig` without the seed; every field but `method` is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_kind: Option<GKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epoch: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_teacher: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_checkpoints: Option<usize>,
}

impl TrainingSection {
    fn resolve(&self, method: Method, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(method);
        cfg.seed = seed;
        // explicit hyperparameters win over the method defaults
        cfg.fixed_alpha = self.fixed_alpha.or(cfg.fixed_alpha);
        cfg.beta = self.beta.or(cfg.beta);
        cfg.max_alpha = self.max_alpha.or(cfg.max_alpha);
        cfg.max_epoch = self.max_epoch.or(cfg.max_epoch);
        if let Some(v) = self.g_kind {
            cfg.g_kind = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.cache_teacher {
            cfg.cache_teacher = v;
        }
        cfg.keep_checkpoints = self.keep_checkpoints.or(cfg.keep_checkpoints);
        cfg
    }

    fn from_train_config(cfg: &TrainConfig) -> Self {
        Self {
            method: Some(cfg.method),
            g_kind: Some(cfg.g_kind),
            epochs: Some(cfg.epochs),
            batch_size: Some(cfg.batch_size),
            learning_rate: Some(cfg.learning_rate),
            warmup_steps: Some(cfg.warmup_steps),
            momentum: Some(cfg.momentum),
            fixed_alpha: cfg.fixed_alpha,
            beta: cfg.beta,
            max_alpha: cfg.max_alpha,
            max_epoch: cfg.max_epoch,
            cache_teacher: Some(cfg.cache_teacher),
            keep_checkpoints: cfg.keep_checkpoints,
        }
    }
}

/// One row of the ablation matrix. Unset fields inherit from `[training]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_kind: Option<GKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epoch: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs, applied in order.
    pub set: Vec<String>,
    pub seed: Option<u64>,
}

/// Parses `text`, applies `overrides` and checks the schema.
pub fn parse_config(text: &str, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))?;
    for assignment in &overrides.set {
        apply_override(&mut table, assignment)?;
    }
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} is out of range")))?;
        set_path(&mut table, &["run", "seed"], toml::Value::Integer(seed))?;
    }
    for section in ["model", "training"] {
        if let Some(toml::Value::Table(t)) = table.get(section) {
            if t.contains_key("seed") {
                return Err(CliError::Config(format!(
                    "{section}.seed is not allowed; all randomness comes from run.seed"
                )));
            }
        }
    }
    check_data_section(&table)?;
    let cfg: RunConfig = serde_path_to_error::deserialize(table).map_err(|e| schema_error("", e))?;
    cfg.check()?;
    Ok(cfg)
}

fn schema_error(prefix: &str, e: serde_path_to_error::Error<toml::de::Error>) -> CliError {
    let path = e.path().to_string();
    let at = match (prefix, path.as_str()) {
        (p, ".") => p.to_string(),
        ("", rest) => rest.to_string(),
        (p, rest) => format!("{p}.{rest}"),
    };
    CliError::Config(format!("{at}: {}", e.inner().message().trim()))
}

/// The `data` table is tagged by `task`, which hides field paths from a
/// single pass, so the variant's own fields are checked first.
fn check_data_section(table: &toml::Table) -> CliResult<()> {
    let Some(toml::Value::Table(data)) = table.get("data") else {
        return Ok(());
    };
    let mut rest = data.clone();
    let task = match rest.remove("task") {
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(CliError::Config("data.task: expected a string".into())),
        None => return Err(CliError::Config("data.task: missing field `task`".into())),
    };
    match task.as_str() {
        "gaussian_mixture" => serde_path_to_error::deserialize::<_, MixtureData>(rest).map(drop),
        "copy_substitution" => serde_path_to_error::deserialize::<_, CopyData>(rest).map(drop),
        other => {
            return Err(CliError::Config(format!(
                "data.task: unknown task `{other}`, expected `gaussian_mixture` or `copy_substitution`"
            )))
        }
    }
    .map_err(|e| schema_error("data", e))
}

pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, overrides)
}

/// Applies one `a.b.c=value` assignment. The value is read as a TOML value
/// and taken as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = raw
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    set_path(table, &path, value)
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> CliResult<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(CliError::Config(format!(
                    "cannot set {}: {} is not a table",
                    path.join("."),
                    path[..=depth].join(".")
                )))
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    fn check(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !is_safe_component(&self.run.name) {
            return bad(format!("run.name `{}` must be a plain file name", self.run.name));
        }
        if self.run.calibration_bins == 0 {
            return bad("run.calibration_bins must be positive".into());
        }
        let data_task = match self.data {
            DataConfig::GaussianMixture(_) => Task::Classification,
            DataConfig::CopySubstitution(_) => Task::SeqTransduction,
        };
        if data_task != self.model.task {
            return bad(format!(
                "data.task does not match model.task ({:?} vs {:?})",
                data_task, self.model.task
            ));
        }
        if let (DataConfig::GaussianMixture(m), Some(d)) = (&self.data, self.model.input_dim) {
            if m.dim != d {
                return bad(format!("model.input_dim {d} differs from data.dim {}", m.dim));
            }
        }
        Network::from_config(&self.model_config()).map_err(|e| CliError::Config(format!("model: {e}")))?;
        if let Some(ab) = &self.ablation {
            if ab.variants.is_empty() {
                return bad("ablation.variants is empty".into());
            }
            for (i, v) in ab.variants.iter().enumerate() {
                if !is_safe_component(&v.label) {
                    return bad(format!("ablation.variants[{i}].label `{}` must be a plain file name", v.label));
                }
                if ab.variants[..i].iter().any(|o| o.label == v.label) {
                    return bad(format!("ablation.variants[{i}].label `{}` is repeated", v.label));
                }
                self.variant_config(v)
                    .validate()
                    .map_err(|e| CliError::Config(format!("ablation.variants[{i}] ({}): {e}", v.label)))?;
            }
        } else {
            self.train_config()?
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let input_dim = match (&self.data, self.model.input_dim) {
            (_, Some(d)) => d,
            (DataConfig::GaussianMixture(m), None) => m.dim,
            (DataConfig::CopySubstitution(_), None) => 0,
        };
        ModelConfig {
            task: self.model.task,
            input_dim,
            hidden: self.model.hidden.clone(),
            classes: self.model.classes,
            seed: self.run.seed,
        }
    }

    /// The `[training]` section resolved against method defaults.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let method = self
            .training
            .method
            .ok_or_else(|| CliError::Config("training.method: missing field `method`".into()))?;
        Ok(self.training.resolve(method, self.run.seed))
    }

    pub fn variant_config(&self, v: &Variant) -> TrainConfig {
        let mut section = self.training.clone();
        section.g_kind = v.g_kind.or(section.g_kind);
        section.fixed_alpha = v.fixed_alpha.or(section.fixed_alpha);
        section.beta = v.beta.or(section.beta);
        section.max_alpha = v.max_alpha.or(section.max_alpha);
        section.max_epoch = v.max_epoch.or(section.max_epoch);
        section.resolve(v.method, self.run.seed)
    }

    /// Fully resolved copy with every default written out, suitable for
    /// reproducing the run. The output location is left to the caller.
    pub fn snapshot(&self) -> CliResult<RunConfig> {
        let mut snap = self.clone();
        snap.run.output_dir = None;
        snap.model.input_dim = match snap.model.task {
            Task::Classification => Some(self.model_config().input_dim),
            Task::SeqTransduction => self.model.input_dim,
        };
        if self.ablation.is_none() || self.training.method.is_some() {
            snap.training = TrainingSection::from_train_config(&self.train_config()?);
        }
        Ok(snap)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
    }

    /// Output directory: `--out`, then `run.output_dir`, then
    /// `$ALS_OUTPUT_ROOT/<name>`, then `./als-runs/<name>`.
    pub fn output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.run.output_dir.clone())
            .unwrap_or_else(|| default_output_dir(&self.run.name))
    }
}

pub fn default_output_dir(name: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    root.join(name)
}

fn is_safe_component(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}
