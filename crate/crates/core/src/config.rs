//! Experiment configuration files.
//!
//! One TOML file describes the dataset, prompt template, run protocol,
//! backend and analytics options. Unknown keys are rejected, relative paths
//! are resolved against the file's directory, and everything is validated
//! before a command touches the network or the output directory.
//!
//! ```toml
//! out_dir = "out"
//!
//! [dataset]
//! path = "sst2.jsonl"
//! classes = ["negative", "positive"]
//! fields = ["sentence"]
//! split_key = "split"
//!
//! [run]
//! trials = 5
//! permutations = 20
//! k = 20
//!
//! [backend]
//! kind = "remote"
//! endpoint = "http://localhost:8000/v1/completions"
//! api_key_env = "OPENAI_API_KEY"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::MuMode;
use crate::corpus::{self, CorpusError, DataFormat, Dataset, DatasetSchema, FieldMapping};
use crate::engine::RunConfig;
use crate::prompting::{PromptError, PromptTemplate, Template};
use crate::scorer::{MockModelSpec, MockScorer, RemoteConfig, RemoteScorer, ScoreError, Scorer};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("dataset: {0}")]
    Corpus(#[from] CorpusError),
    #[error("template: {0}")]
    Prompt(#[from] PromptError),
    #[error("backend: {0}")]
    Backend(#[from] ScoreError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// A text field given either as a bare name or as `{ name, key }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Name(String),
    Mapped(FieldMapping),
}

impl FieldSpec {
    fn mapping(&self) -> FieldMapping {
        match self {
            FieldSpec::Name(n) => FieldMapping::new(n.clone()),
            FieldSpec::Mapped(m) => m.clone(),
        }
    }
}

fn default_label_key() -> String {
    "label".into()
}

fn default_train_split() -> String {
    "train".into()
}

fn default_eval_split() -> String {
    "validation".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Defaults to the data file's stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Single file, routed to splits by `split_key` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DataFormat>,
    pub classes: Vec<String>,
    #[serde(default = "default_label_key")]
    pub label_key: String,
    pub fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_key: Option<String>,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    /// Restrict the train split to these ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ids: Option<Vec<String>>,
}

impl DatasetSection {
    fn data_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        self.path
            .as_ref()
            .or(self.train.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            name: self.data_name(),
            classes: self.classes.clone(),
            label_key: self.label_key.clone(),
            fields: self.fields.iter().map(FieldSpec::mapping).collect(),
            id_key: self.id_key.clone(),
            split_key: self.split_key.clone(),
            train_split: self.train_split.clone(),
            eval_split: self.eval_split.clone(),
        }
    }

    pub fn load(&self) -> Result<Dataset, ConfigError> {
        let schema = self.schema();
        let dataset = match (&self.path, &self.train, &self.eval) {
            (Some(path), None, None) => corpus::load_dataset(path, self.format, &schema)?,
            (None, Some(train), Some(eval)) => corpus::load_splits(train, eval, self.format, &schema)?,
            _ => {
                return Err(invalid(
                    "dataset",
                    "set either `path` or both `train` and `eval`",
                ))
            }
        };
        match &self.train_ids {
            Some(ids) => Ok(dataset.with_train_subset(ids)?),
            None => Ok(dataset),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    /// `single-text` (default) or `text-pair`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// TOML file holding a full template; replaces the preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_prefix: Option<String>,
}

impl TemplateSection {
    pub fn resolve(&self) -> Result<PromptTemplate, ConfigError> {
        let mut t = match (&self.file, &self.preset) {
            (Some(_), Some(_)) => return Err(invalid("template", "set `file` or `preset`, not both")),
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: path.clone(),
                    message: e.to_string(),
                })?
            }
            (None, preset) => PromptTemplate::preset(preset.as_deref().unwrap_or("single-text"))?,
        };
        let overrides = [
            (&self.instruction, &mut t.instruction),
            (&self.exemplar_format, &mut t.exemplar_format),
            (&self.query_format, &mut t.query_format),
            (&self.separator, &mut t.separator),
            (&self.target_prefix, &mut t.target_prefix),
        ];
        for (value, slot) in overrides {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Mock(MockModelSpec),
    Remote(RemoteConfig),
}

impl BackendConfig {
    /// Parse a command-line override: `mock:hash[:salt]`,
    /// `mock:label-bias:<label>`, `mock:prefix-majority:<default>` or
    /// `remote:<url>`. A remote override keeps the other remote settings of
    /// `current` when it is remote too.
    pub fn parse_override(spec: &str, current: &BackendConfig) -> Result<Self, ConfigError> {
        let bad = |m: &str| invalid("--backend", format!("{spec:?}: {m}"));
        let number = |s: Option<&str>, name: &str| -> Result<Option<u64>, ConfigError> {
            s.map(|v| v.parse::<u64>().map_err(|_| bad(&format!("{name} must be a non-negative integer"))))
                .transpose()
        };
        if let Some(url) = spec.strip_prefix("remote:") {
            let mut remote = match current {
                BackendConfig::Remote(r) => r.clone(),
                BackendConfig::Mock(_) => RemoteConfig::new(url),
            };
            remote.endpoint = url.to_string();
            return Ok(BackendConfig::Remote(remote));
        }
        let mut parts = spec.split(':');
        if parts.next() != Some("mock") {
            return Err(bad("expected mock:<mode>[:<arg>] or remote:<url>"));
        }
        let mode = parts.next().ok_or_else(|| bad("missing mock mode"))?;
        let arg = parts.next();
        if parts.next().is_some() {
            return Err(bad("too many components"));
        }
        let spec = match mode {
            "hash" => MockModelSpec::Hash {
                salt: number(arg, "salt")?.unwrap_or(0),
            },
            "label-bias" => MockModelSpec::LabelBias {
                label: number(arg, "label")?.ok_or_else(|| bad("label-bias needs a label"))? as usize,
            },
            "prefix-majority" => MockModelSpec::PrefixMajority {
                default_label: number(arg, "default label")?.unwrap_or(0) as usize,
            },
            other => return Err(bad(&format!("unknown mock mode {other:?}"))),
        };
        Ok(BackendConfig::Mock(spec))
    }

    pub fn build(&self, dataset: &Dataset) -> Result<Box<dyn Scorer>, ConfigError> {
        Ok(match self {
            BackendConfig::Mock(spec) => Box::new(MockScorer::new(spec.clone(), dataset)?),
            BackendConfig::Remote(remote) => Box::new(RemoteScorer::new(remote.clone())?),
        })
    }
}

fn default_threshold() -> f64 {
    1.0
}

fn default_set_size() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticsSection {
    #[serde(default)]
    pub mu_mode: MuMode,
    #[serde(default = "default_threshold")]
    pub z_threshold: f64,
    #[serde(default = "default_set_size")]
    pub set_size: usize,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        Self {
            mu_mode: MuMode::default(),
            z_threshold: default_threshold(),
            set_size: default_set_size(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Fixed tolerance on |grand mean - exact mean|. Default: exact match
    /// for exhaustive runs, three standard errors otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub template: TemplateSection,
    #[serde(default)]
    pub run: RunConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub analytics: AnalyticsSection,
    #[serde(default)]
    pub verify: VerifySection,
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    let joined = if p.is_absolute() { p.clone() } else { base.join(&*p) };
    *p = std::path::absolute(&joined).unwrap_or(joined);
}

impl ExperimentConfig {
    /// Read, parse and resolve paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Make every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.out_dir);
        for p in [&mut self.dataset.path, &mut self.dataset.train, &mut self.dataset.eval, &mut self.template.file]
            .into_iter()
            .flatten()
        {
            absolutize(base, p);
        }
        if let BackendConfig::Remote(r) = &mut self.backend {
            if let Some(p) = &mut r.audit_log {
                absolutize(base, p);
            }
        }
    }

    /// Checks that need no I/O.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run
            .validate()
            .map_err(|e| invalid("run", e.to_string()))?;
        if !(self.analytics.z_threshold.is_finite() && self.analytics.z_threshold >= 0.0) {
            return Err(invalid("analytics.z_threshold", "must be a non-negative number"));
        }
        if self.analytics.set_size == 0 {
            return Err(invalid("analytics.set_size", "must be at least 1"));
        }
        if let Some(t) = self.verify.tolerance {
            if !(t.is_finite() && t >= 0.0) {
                return Err(invalid("verify.tolerance", "must be a non-negative number"));
            }
        }
        self.dataset.schema().validate()?;
        match &self.backend {
            BackendConfig::Mock(spec) => spec.validate(self.dataset.classes.len())?,
            BackendConfig::Remote(r) => r.validate()?,
        }
        Ok(())
    }

    /// Validate and load everything a command needs, without side effects
    /// beyond reading input files.
    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        self.validate()?;
        let dataset = self.dataset.load()?;
        let template = Template::new(self.template.resolve()?)?;
        template.check_fields(dataset.field_names())?;
        let backend = self.backend.build(&dataset)?;
        Ok(Prepared {
            dataset,
            template,
            backend,
        })
    }
}

/// Loaded inputs of an experiment.
pub struct Prepared {
    pub dataset: Dataset,
    pub template: Template,
    pub backend: Box<dyn Scorer>,
}
