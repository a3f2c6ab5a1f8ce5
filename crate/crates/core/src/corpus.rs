//! Dataset ingestion, evaluation subsampling and support-set draws.
//!
//! Datasets are declared by a [`DatasetSchema`] rather than hard-coded per
//! benchmark: the schema maps source keys onto named text fields, names the
//! label key, and lists the class verbalizations.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, tag};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("{path}: no records")]
    Empty { path: PathBuf },
    #[error("exemplar {id}: label {label} outside class range 0..{classes}")]
    LabelOutOfRange { id: String, label: u64, classes: usize },
    #[error("exemplar {id}: label {value:?} is neither a class index nor a class name")]
    UnknownLabel { id: String, value: String },
    #[error("duplicate exemplar id {0}")]
    DuplicateId(String),
    #[error("exemplar {0} appears in both train and eval splits")]
    OverlappingSplits(String),
    #[error("exemplar {0} has no non-empty text field")]
    EmptyText(String),
    #[error("unknown exemplar id {0}")]
    UnknownId(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("cannot draw {requested} exemplars from a train split of {available}")]
    SupportTooLarge { requested: usize, available: usize },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
}

/// One labeled instance. `fields` keeps the schema's field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub fields: IndexMap<String, String>,
    pub label: usize,
}

impl Exemplar {
    pub fn new<I, K, V>(id: impl Into<String>, fields: I, label: usize) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            id: id.into(),
            fields: fields
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Self::Jsonl),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

/// Maps a source key onto a named text field. `key` defaults to `name`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldMapping {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
}

impl FieldMapping {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            key: None,
        }
    }

    pub fn source_key(&self) -> &str {
        self.key.as_deref().unwrap_or(&self.name)
    }
}

fn default_train_split() -> String {
    "train".into()
}

fn default_eval_split() -> String {
    "validation".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub name: String,
    pub classes: Vec<String>,
    pub label_key: String,
    pub fields: Vec<FieldMapping>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_key: Option<String>,
    /// When set, rows of a single file are routed to train or eval by this key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_key: Option<String>,
    #[serde(default = "default_train_split")]
    pub train_split: String,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
}

impl DatasetSchema {
    pub fn new(name: impl Into<String>, classes: &[&str], label_key: &str, fields: &[&str]) -> Self {
        Self {
            name: name.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            label_key: label_key.into(),
            fields: fields.iter().map(|f| FieldMapping::new(*f)).collect(),
            id_key: None,
            split_key: None,
            train_split: default_train_split(),
            eval_split: default_eval_split(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.classes.is_empty() {
            return Err(CorpusError::Schema("classes must not be empty".into()));
        }
        if self.label_key.is_empty() {
            return Err(CorpusError::Schema("label_key must be set".into()));
        }
        if self.fields.is_empty() {
            return Err(CorpusError::Schema("at least one text field is required".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.name.is_empty() || f.name == "label" {
                return Err(CorpusError::Schema(format!("invalid field name {:?}", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(CorpusError::Schema(format!("field {:?} declared twice", f.name)));
            }
        }
        let mut classes = HashSet::new();
        for c in &self.classes {
            if !classes.insert(c.as_str()) {
                return Err(CorpusError::Schema(format!("class {c:?} declared twice")));
            }
        }
        Ok(())
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// An immutable labeled corpus with id-disjoint train and eval splits.
#[derive(Debug, Clone, Serialize)]
pub struct Dataset {
    name: String,
    classes: Vec<String>,
    fields: Vec<String>,
    train: Vec<Exemplar>,
    eval: Vec<Exemplar>,
    #[serde(skip)]
    index: HashMap<String, (Split, usize)>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.classes == other.classes
            && self.fields == other.fields
            && self.train == other.train
            && self.eval == other.eval
    }
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        fields: Vec<String>,
        train: Vec<Exemplar>,
        eval: Vec<Exemplar>,
    ) -> Result<Self, CorpusError> {
        if classes.is_empty() {
            return Err(CorpusError::Schema("classes must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(train.len() + eval.len());
        for (split, rows) in [(Split::Train, &train), (Split::Eval, &eval)] {
            for (i, ex) in rows.iter().enumerate() {
                if ex.label >= classes.len() {
                    return Err(CorpusError::LabelOutOfRange {
                        id: ex.id.clone(),
                        label: ex.label as u64,
                        classes: classes.len(),
                    });
                }
                if ex.fields.values().all(|v| v.is_empty()) {
                    return Err(CorpusError::EmptyText(ex.id.clone()));
                }
                if let Some((prev, _)) = index.insert(ex.id.clone(), (split, i)) {
                    return Err(if prev == split {
                        CorpusError::DuplicateId(ex.id.clone())
                    } else {
                        CorpusError::OverlappingSplits(ex.id.clone())
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            classes,
            fields,
            train,
            eval,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Names of the text fields every exemplar may carry.
    pub fn field_names(&self) -> &[String] {
        &self.fields
    }

    pub fn train(&self) -> &[Exemplar] {
        &self.train
    }

    pub fn eval(&self) -> &[Exemplar] {
        &self.eval
    }

    pub fn get(&self, id: &str) -> Option<&Exemplar> {
        self.index.get(id).map(|&(split, i)| match split {
            Split::Train => &self.train[i],
            Split::Eval => &self.eval[i],
        })
    }

    pub fn resolve<'a, I>(&self, ids: I) -> Result<Vec<&Exemplar>, CorpusError>
    where
        I: IntoIterator<Item = &'a String>,
    {
        ids.into_iter()
            .map(|id| self.get(id).ok_or_else(|| CorpusError::UnknownId(id.clone())))
            .collect()
    }

    pub fn with_eval(&self, eval: Vec<Exemplar>) -> Result<Self, CorpusError> {
        Self::new(
            self.name.clone(),
            self.classes.clone(),
            self.fields.clone(),
            self.train.clone(),
            eval,
        )
    }

    /// Restrict the train split to `ids`, keeping the order given.
    pub fn with_train_subset(&self, ids: &[String]) -> Result<Self, CorpusError> {
        let mut train = Vec::with_capacity(ids.len());
        for id in ids {
            match self.index.get(id) {
                Some(&(Split::Train, i)) => train.push(self.train[i].clone()),
                _ => return Err(CorpusError::UnknownId(id.clone())),
            }
        }
        Self::new(
            self.name.clone(),
            self.classes.clone(),
            self.fields.clone(),
            train,
            self.eval.clone(),
        )
    }

    pub fn digest(&self) -> String {
        seeding::json_digest(self)
    }
}

/// The K exemplars drawn for one trial, in draw order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub trial: u32,
    pub members: Vec<String>,
    pub seed: u64,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

type Row = serde_json::Map<String, serde_json::Value>;

fn read_rows(path: &Path, format: DataFormat) -> Result<Vec<(u64, Row)>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut rows = Vec::new();
    match format {
        DataFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                let line_no = i as u64 + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                        path: path.to_path_buf(),
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                match value {
                    serde_json::Value::Object(map) => rows.push((line_no, map)),
                    _ => {
                        return Err(CorpusError::Malformed {
                            path: path.to_path_buf(),
                            line: line_no,
                            reason: "expected a JSON object".into(),
                        })
                    }
                }
            }
        }
        DataFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: e.to_string(),
                })?
                .clone();
            for record in reader.records() {
                let record = record.map_err(|e| CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: e.position().map(|p| p.line()).unwrap_or(0),
                    reason: e.to_string(),
                })?;
                let line_no = record.position().map(|p| p.line()).unwrap_or(0);
                let map = headers
                    .iter()
                    .zip(record.iter())
                    .map(|(h, v)| (h.to_string(), serde_json::Value::String(v.to_string())))
                    .collect();
                rows.push((line_no, map));
            }
        }
    }
    if rows.is_empty() {
        return Err(CorpusError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(rows)
}

fn scalar_to_string(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_row(
    schema: &DatasetSchema,
    path: &Path,
    line: u64,
    row: &Row,
    default_id: String,
) -> Result<Exemplar, CorpusError> {
    let malformed = |reason: String| CorpusError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let id = match &schema.id_key {
        Some(key) => row
            .get(key)
            .and_then(scalar_to_string)
            .ok_or_else(|| malformed(format!("missing id key {key:?}")))?,
        None => default_id,
    };
    let mut fields = IndexMap::with_capacity(schema.fields.len());
    for mapping in &schema.fields {
        let key = mapping.source_key();
        let text = match row.get(key) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(_) => return Err(malformed(format!("text key {key:?} is not a string"))),
            None => return Err(malformed(format!("missing text key {key:?}"))),
        };
        fields.insert(mapping.name.clone(), text);
    }
    let raw = row
        .get(&schema.label_key)
        .ok_or_else(|| malformed(format!("missing label key {:?}", schema.label_key)))?;
    let label = match raw {
        serde_json::Value::Number(n) => n
            .as_u64()
            .ok_or_else(|| malformed(format!("label {n} is not a non-negative integer")))?,
        serde_json::Value::String(s) => {
            if let Ok(v) = s.trim().parse::<u64>() {
                v
            } else if let Some(pos) = schema.classes.iter().position(|c| c == s) {
                pos as u64
            } else {
                return Err(CorpusError::UnknownLabel {
                    id,
                    value: s.clone(),
                });
            }
        }
        other => return Err(malformed(format!("label {other} is not an integer"))),
    };
    if label >= schema.classes.len() as u64 {
        return Err(CorpusError::LabelOutOfRange {
            id,
            label,
            classes: schema.classes.len(),
        });
    }
    Ok(Exemplar {
        id,
        fields,
        label: label as usize,
    })
}

fn resolve_format(path: &Path, format: Option<DataFormat>) -> Result<DataFormat, CorpusError> {
    format.or_else(|| DataFormat::from_path(path)).ok_or_else(|| {
        CorpusError::Schema(format!(
            "cannot infer format of {}; declare jsonl or csv",
            path.display()
        ))
    })
}

/// Load a single file. Without a `split_key`, every row lands in train.
pub fn load_dataset(
    path: &Path,
    format: Option<DataFormat>,
    schema: &DatasetSchema,
) -> Result<Dataset, CorpusError> {
    schema.validate()?;
    let format = resolve_format(path, format)?;
    let rows = read_rows(path, format)?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, (line, row)) in rows.iter().enumerate() {
        let split = match &schema.split_key {
            None => Split::Train,
            Some(key) => {
                let value = row.get(key).and_then(scalar_to_string).ok_or_else(|| {
                    CorpusError::Malformed {
                        path: path.to_path_buf(),
                        line: *line,
                        reason: format!("missing split key {key:?}"),
                    }
                })?;
                if value == schema.train_split {
                    Split::Train
                } else if value == schema.eval_split {
                    Split::Eval
                } else {
                    return Err(CorpusError::Malformed {
                        path: path.to_path_buf(),
                        line: *line,
                        reason: format!("unknown split {value:?}"),
                    });
                }
            }
        };
        let ex = parse_row(schema, path, *line, row, i.to_string())?;
        match split {
            Split::Train => train.push(ex),
            Split::Eval => eval.push(ex),
        }
    }
    Dataset::new(
        schema.name.clone(),
        schema.classes.clone(),
        schema.field_names(),
        train,
        eval,
    )
}

/// Load separate train and eval files sharing one schema. Row-index ids are
/// prefixed with the split name so the two files cannot collide.
pub fn load_splits(
    train_path: &Path,
    eval_path: &Path,
    format: Option<DataFormat>,
    schema: &DatasetSchema,
) -> Result<Dataset, CorpusError> {
    schema.validate()?;
    let mut splits = Vec::with_capacity(2);
    for (path, prefix) in [(train_path, "train"), (eval_path, "eval")] {
        let fmt = resolve_format(path, format)?;
        let rows = read_rows(path, fmt)?;
        let parsed = rows
            .iter()
            .enumerate()
            .map(|(i, (line, row))| parse_row(schema, path, *line, row, format!("{prefix}-{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        splits.push(parsed);
    }
    let eval = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Dataset::new(
        schema.name.clone(),
        schema.classes.clone(),
        schema.field_names(),
        train,
        eval,
    )
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Keep `n` eval instances drawn uniformly without replacement, in their
/// original relative order. `n >= |eval|` returns the split unchanged.
pub fn subsample_eval(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset, CorpusError> {
    if n == 0 {
        return Err(CorpusError::ZeroCount("eval subsample size"));
    }
    let len = dataset.eval.len();
    if n >= len {
        return Ok(dataset.clone());
    }
    let mut rng = seeding::rng_for(tag::EVAL_SUBSAMPLE, &[seed]);
    let mut picked = index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    let eval = picked.into_iter().map(|i| dataset.eval[i].clone()).collect();
    dataset.with_eval(eval)
}

/// Draw K distinct train exemplars for `trial`. The effective seed is a
/// stable hash of `(seed, trial)`; members keep their draw order.
pub fn sample_support(
    dataset: &Dataset,
    k: usize,
    trial: u32,
    seed: u64,
) -> Result<SupportSet, CorpusError> {
    if k == 0 {
        return Err(CorpusError::ZeroCount("support size"));
    }
    if k > dataset.train.len() {
        return Err(CorpusError::SupportTooLarge {
            requested: k,
            available: dataset.train.len(),
        });
    }
    let effective = seeding::derive_seed(tag::SUPPORT, &[seed, trial as u64]);
    let mut rng = seeding::rng_for(tag::SUPPORT, &[effective]);
    let members = index::sample(&mut rng, dataset.train.len(), k)
        .into_iter()
        .map(|i| dataset.train[i].id.clone())
        .collect();
    Ok(SupportSet {
        trial,
        members,
        seed: effective,
    })
}
