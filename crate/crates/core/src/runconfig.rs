//! The JSON run configuration: one document drives training,
//! evaluation sweeps, benchmarks, and gradient checks. Flat dotted-key
//! overrides (`compression.p=0.18`) mutate the document before
//! validation; unknown keys are rejected wholesale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::adaptation::AdaptationMode;
use crate::compression::CompressionSpec;
use crate::error::{Error, Result};
use crate::ssm::{DeltaForm, ModelConfig};
use crate::training::TrainConfig;

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "REMAMBA_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Passkey,
    AssocRecall,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    #[serde(default)]
    pub task: TaskKind,
    #[serde(default = "default_key_length")]
    pub key_length: usize,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_train_lengths")]
    pub train_lengths: Vec<usize>,
    #[serde(default = "default_train_instances")]
    pub train_instances: usize,
    #[serde(default = "default_eval_lengths")]
    pub eval_lengths: Vec<usize>,
    /// Instances per evaluated context length.
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
}

fn default_key_length() -> usize {
    4
}
fn default_n_pairs() -> usize {
    8
}
fn default_train_lengths() -> Vec<usize> {
    vec![64, 128, 256]
}
fn default_train_instances() -> usize {
    800
}
fn default_eval_lengths() -> Vec<usize> {
    vec![512, 1024]
}
fn default_eval_instances() -> usize {
    200
}

impl Default for TasksConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_input_lens")]
    pub input_lens: Vec<usize>,
    #[serde(default = "default_output_len")]
    pub output_len: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
}

fn default_input_lens() -> Vec<usize> {
    vec![128, 512, 1024]
}
fn default_output_len() -> usize {
    128
}
fn default_reps() -> usize {
    5
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub compression: CompressionSpec,
    #[serde(default)]
    pub adaptation: AdaptationMode,
    /// Variant flag: scale Δ multiplicatively instead of the published
    /// offset form.
    #[serde(default)]
    pub exact_delta_scale: bool,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub tasks: TasksConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale defaults: a 2-layer model and the long-context
    /// hyperparameters scaled to synthetic-task lengths.
    pub fn default_desk() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                num_layers: 2,
                hidden_size: 64,
                intermediate_size: 128,
                state_size: 16,
                vocab_size: 64,
                tied_lm_head: false,
            },
            compression: CompressionSpec::new(0.0, 0.18, 0.009),
            adaptation: AdaptationMode::SelectiveDelta,
            exact_delta_scale: false,
            training: TrainConfig::default(),
            tasks: TasksConfig::default(),
            bench: BenchConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compression.validate()?;
        self.training.validate()?;
        if self.tasks.eval_lengths.is_empty() || self.tasks.train_lengths.is_empty() {
            return Err(Error::config("tasks.train_lengths and eval_lengths must be non-empty"));
        }
        if self.tasks.train_instances == 0 || self.tasks.eval_instances == 0 {
            return Err(Error::config("tasks.*_instances must be positive"));
        }
        if self.bench.reps < 3 {
            return Err(Error::config("bench.reps must be at least 3"));
        }
        Ok(())
    }

    /// Config seed, unless `REMAMBA_SEED` is set.
    pub fn effective_seed(&self) -> u64 {
        match std::env::var(SEED_ENV) {
            Ok(v) => v.parse().unwrap_or(self.seed),
            Err(_) => self.seed,
        }
    }

    pub fn delta_form(&self) -> DeltaForm {
        if self.exact_delta_scale {
            DeltaForm::Scaled
        } else {
            DeltaForm::Offset
        }
    }

    pub fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(json: Json) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(json)
            .map_err(|e| Error::config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let json: Json = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: not valid json: {e}", path.display())))?;
        Self::from_json(json)
    }

    /// Load (or default), apply `key.path=value` overrides, validate.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut json = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: not valid json: {e}", p.display())))?
            }
            None => RunConfig::default_desk().to_json(),
        };
        for ov in overrides {
            apply_override(&mut json, ov)?;
        }
        Self::from_json(json)
    }
}

/// Apply one `dotted.key=value` override to a JSON document. The value
/// is parsed as JSON when possible, else taken as a string.
pub fn apply_override(doc: &mut Json, expr: &str) -> Result<()> {
    let (key, raw) = expr
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {expr:?} is not key=value")))?;
    if key.is_empty() {
        return Err(Error::config(format!("override {expr:?} has an empty key")));
    }
    let value: Json = serde_json::from_str(raw).unwrap_or(Json::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {part} is not an object")))?
            .entry(part.to_string())
            .or_insert_with(|| Json::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(format!("override {key}: parent is not an object")))?
        .insert(parts.last().unwrap().to_string(), value);
    Ok(())
}
