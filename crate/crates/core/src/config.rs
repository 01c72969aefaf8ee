//! JSON experiment configuration.
//!
//! A file holds either one experiment object or `{"experiments": [...]}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::data::{default_data_dir, BATCH_SIZE};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Task};
use crate::sparse::Backend;
use crate::train::TrainConfig;

/// Training settings shared by every model of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
    pub backend: Backend,
    /// Overrides the family default when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub grad_probe: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: BATCH_SIZE,
            trials: 10,
            seed: 0,
            backend: Backend::Reference,
            learning_rate: None,
            grad_probe: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    pub models: Vec<ModelSpec>,
    /// Extra dropout probabilities tried for every listed model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropout_sweep: Vec<f64>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_true")]
    pub download: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Suite { experiments: Vec<ExperimentConfig> },
    Single(Box<ExperimentConfig>),
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<Backend>,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Model list with the dropout sweep expanded, duplicates removed,
    /// in listing order.
    pub fn expanded_models(&self) -> Vec<ModelSpec> {
        let mut out: Vec<ModelSpec> = Vec::new();
        for spec in &self.models {
            let variants = std::iter::once(*spec).chain(self.dropout_sweep.iter().map(|&p| spec.with_dropout(p)));
            for v in variants {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn train_config(&self, spec: ModelSpec) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            spec,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch: t.batch,
            trials: t.trials,
            base_seed: t.seed,
            backend: t.backend,
            grad_probe: t.grad_probe,
        }
    }

    /// Checks every field, reporting the first problem with its path.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "at least one model is required"));
        }
        for (i, spec) in self.models.iter().enumerate() {
            let at = |field: &str| format!("models[{i}].{field}");
            if spec.task() != self.task {
                return Err(Error::config(
                    at("family"),
                    format!("{} does not run on task {}", spec.family(), self.task),
                ));
            }
            let width = if spec.family().is_dendritic() { "b" } else { "h" };
            match spec.validate() {
                Ok(()) => {}
                Err(Error::Parameter(detail)) if detail.contains("dropout") => {
                    return Err(Error::config(at("p"), detail))
                }
                Err(e) => return Err(Error::config(at(width), e.to_string())),
            }
        }
        for (i, &p) in self.dropout_sweep.iter().enumerate() {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("dropout_sweep[{i}]"), format!("{p} is outside [0, 1)")));
            }
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if t.trials == 0 {
            return Err(Error::config("train.trials", "must be at least 1"));
        }
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if let Some(lr) = t.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("train.learning_rate", format!("{lr} is not positive")));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.trials {
            self.train.trials = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.backend {
            self.train.backend = v;
        }
        if let Some(v) = &o.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
    }

    /// Canonical pretty JSON rendering.
    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Git blob hash (SHA-1 of `blob <len>\0<content>`) of [`Self::render`].
    pub fn content_hash(&self) -> String {
        git_blob_hash(self.render().as_bytes())
    }
}

pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses a config document; JSON errors carry the line and column.
pub fn parse_configs(text: &str, origin: &str) -> Result<Vec<ExperimentConfig>> {
    let parsed: ConfigFile = serde_json::from_str(text).map_err(|e| {
        // Untagged errors lose detail; retry as a single experiment to
        // surface the field-level message.
        let detail = serde_json::from_str::<ExperimentConfig>(text)
            .err()
            .map_or_else(|| e.to_string(), |e| e.to_string());
        Error::config(origin, detail)
    })?;
    let configs = match parsed {
        ConfigFile::Suite { experiments } => experiments,
        ConfigFile::Single(c) => vec![*c],
    };
    if configs.is_empty() {
        return Err(Error::config(format!("{origin}: experiments"), "no experiments listed"));
    }
    for (i, c) in configs.iter().enumerate() {
        c.validate().map_err(|e| match e {
            Error::Config { path, detail } if configs.len() > 1 => Error::Config {
                path: format!("experiments[{i}].{path}"),
                detail,
            },
            other => other,
        })?;
    }
    Ok(configs)
}

pub fn load_configs(path: &Path) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_configs(&text, &path.display().to_string())
}
