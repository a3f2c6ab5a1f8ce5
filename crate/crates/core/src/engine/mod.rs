//! Monte Carlo prefix-scan engine.
//!
//! Per trial: draw a support set of K exemplars, draw P random orderings of
//! it, and for every ordering measure eval-set accuracy after each prefix
//! `k = 0..=K`. All (prefix, query) evaluations of a trial are collected,
//! deduplicated through the prediction cache, dispatched in parallel, and
//! reduced back into records by position, so the output never depends on
//! dispatch order.

mod cache;
mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Dataset, Exemplar, SupportSet};
use crate::prompting::{self, PromptError, Template};
use crate::scorer::{self, ScoreError, Scorer};
use crate::seeding::{self, tag};

pub use cache::{CachedPrediction, PredictionCache, PrefixKey};
pub use checkpoint::Checkpoint;

/// Largest K for which exhaustive enumeration of orderings is allowed.
pub const MAX_EXHAUSTIVE_K: usize = 8;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failed at prefix length {prefix_len}, query {query_id}: {source}")]
    Backend {
        prefix_len: usize,
        query_id: String,
        #[source]
        source: ScoreError,
    },
    #[error("trial {trial}: {source}")]
    Trial {
        trial: u32,
        #[source]
        source: Box<EngineError>,
    },
    #[error("prediction cache: {0}")]
    Cache(#[source] std::io::Error),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

impl EngineError {
    /// True when the root cause is a backend failure.
    pub fn is_backend(&self) -> bool {
        match self {
            EngineError::Backend { .. } => true,
            EngineError::Trial { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}

fn default_k() -> usize {
    20
}
fn default_permutations() -> usize {
    20
}
fn default_trials() -> u32 {
    5
}
fn default_eval_subsample() -> usize {
    256
}
fn default_true() -> bool {
    true
}
fn default_concurrency() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Maximum number of exemplars (support set size).
    #[serde(default = "default_k")]
    pub k: usize,
    /// Random orderings per trial.
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_subsample")]
    pub eval_subsample: usize,
    #[serde(default = "default_true")]
    pub cache: bool,
    /// Maximum concurrent (prefix, query) evaluations.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Replace the random orderings with all K! orderings, in lexicographic
    /// order. Used to check the estimator against exact enumeration.
    #[serde(default)]
    pub exhaustive: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            permutations: default_permutations(),
            trials: default_trials(),
            seed: 0,
            eval_subsample: default_eval_subsample(),
            cache: true,
            concurrency: default_concurrency(),
            exhaustive: false,
        }
    }
}

/// The result-affecting part of a [`RunConfig`]. Cache and concurrency
/// settings are excluded: they never change records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub k: usize,
    pub permutations: usize,
    pub trials: u32,
    pub seed: u64,
    pub eval_subsample: usize,
    pub exhaustive: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.permutations == 0 && !self.exhaustive {
            return fail("permutations must be at least 1");
        }
        if self.trials == 0 {
            return fail("trials must be at least 1");
        }
        if self.eval_subsample == 0 {
            return fail("eval_subsample must be at least 1");
        }
        if self.concurrency == 0 {
            return fail("concurrency must be at least 1");
        }
        if self.exhaustive && self.k > MAX_EXHAUSTIVE_K {
            return Err(EngineError::Config(format!(
                "exhaustive orderings need k <= {MAX_EXHAUSTIVE_K}, got {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Orderings per trial: P, or K! when exhaustive.
    pub fn permutation_count(&self) -> usize {
        if self.exhaustive {
            (1..=self.k).product()
        } else {
            self.permutations
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            k: self.k,
            permutations: self.permutation_count(),
            trials: self.trials,
            seed: self.seed,
            eval_subsample: self.eval_subsample,
            exhaustive: self.exhaustive,
        }
    }
}

/// Exact accuracy as a count of correct predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// One measurement: accuracy with the first `k` exemplars of ordering
/// `perm` in `trial`. `accuracy` is `correct / total` rounded to f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub trial: u32,
    pub perm: u32,
    pub k: u32,
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
    pub prefix_ids: Vec<String>,
}

impl EvalRecord {
    pub fn exact(&self) -> Accuracy {
        Accuracy {
            correct: self.correct,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutput {
    pub support: SupportSet,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub format: String,
    pub dataset: String,
    pub dataset_digest: String,
    pub config_digest: String,
    pub template_digest: String,
    pub backend: String,
    pub backend_digest: String,
    pub protocol: Protocol,
    pub classes: Vec<String>,
    pub eval_ids: Vec<String>,
    pub supports: Vec<SupportSet>,
}

pub const ARTIFACT_FORMAT: &str = "iclmc-run/1";

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifact {
    pub provenance: Provenance,
    pub records: Vec<EvalRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ArtifactLine {
    Provenance(Box<Provenance>),
    Record(EvalRecord),
}

impl RunArtifact {
    /// JSONL: a provenance header line, then one line per record.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ArtifactLine::Provenance(Box::new(self.provenance.clone())))
            .expect("provenance serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ArtifactLine::Record(r.clone())).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut provenance = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))? {
                ArtifactLine::Provenance(p) if provenance.is_none() => provenance = Some(*p),
                ArtifactLine::Provenance(_) => return Err(format!("line {}: second provenance header", i + 1)),
                ArtifactLine::Record(r) => records.push(r),
            }
        }
        Ok(Self {
            provenance: provenance.ok_or("missing provenance header")?,
            records,
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_jsonl(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// A uniformly random ordering of the support set, seeded from
/// `(seed, trial, perm_index)`. Distinct indices are independent draws.
pub fn permute(support: &SupportSet, perm_index: u32, seed: u64) -> Vec<String> {
    let mut rng = seeding::rng_for(tag::PERMUTATION, &[seed, support.trial as u64, perm_index as u64]);
    let mut order = support.members.clone();
    order.shuffle(&mut rng);
    order
}

/// The `index`-th ordering of `items` in lexicographic order of positions.
pub fn nth_ordering<T: Clone>(items: &[T], mut index: usize) -> Vec<T> {
    let mut pool: Vec<T> = items.to_vec();
    let mut out = Vec::with_capacity(items.len());
    let mut radix: usize = (1..items.len().max(1)).product();
    while !pool.is_empty() {
        let pick = index / radix;
        index %= radix;
        out.push(pool.remove(pick));
        radix /= pool.len().max(1);
    }
    out
}

pub struct Engine<'a> {
    config: RunConfig,
    full_digest: String,
    dataset: Dataset,
    template: &'a Template,
    scorer: &'a dyn Scorer,
    backend_identity: String,
    backend_digest: String,
    candidates: Vec<String>,
    cache: Option<PredictionCache>,
    pool: rayon::ThreadPool,
    dispatch_shuffle: Option<u64>,
}

impl<'a> Engine<'a> {
    /// Subsamples the eval split per `config` and prepares the dispatcher.
    pub fn new(
        config: RunConfig,
        dataset: &Dataset,
        template: &'a Template,
        scorer: &'a dyn Scorer,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        template.check_fields(dataset.field_names())?;
        if dataset.classes().len() < 2 {
            return Err(EngineError::Config("at least two classes are required".into()));
        }
        if dataset.eval().is_empty() {
            return Err(EngineError::Config("the eval split is empty".into()));
        }
        if config.k > dataset.train().len() {
            return Err(CorpusError::SupportTooLarge {
                requested: config.k,
                available: dataset.train().len(),
            }
            .into());
        }
        let full_digest = dataset.digest();
        let subsampled = corpus::subsample_eval(dataset, config.eval_subsample, config.seed)?;
        let backend_identity = scorer.identity();
        let backend_digest = seeding::sha256_hex(&backend_identity);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .thread_name(|i| format!("iclmc-eval-{i}"))
            .build()
            .map_err(|e| EngineError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            cache: config.cache.then(PredictionCache::in_memory),
            candidates: template.continuations(dataset.classes()),
            config,
            full_digest,
            dataset: subsampled,
            template,
            scorer,
            backend_identity,
            backend_digest,
            pool,
            dispatch_shuffle: None,
        })
    }

    /// Use `cache` instead of the default in-memory one. Ignored when the
    /// configuration disables caching.
    pub fn with_cache(mut self, cache: PredictionCache) -> Self {
        if self.config.cache {
            self.cache = Some(cache);
        }
        self
    }

    /// Dispatch evaluations in a seeded random order (testing hook).
    pub fn with_dispatch_shuffle(mut self, seed: u64) -> Self {
        self.dispatch_shuffle = Some(seed);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// The dataset with its eval split subsampled.
    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn cache(&self) -> Option<&PredictionCache> {
        self.cache.as_ref()
    }

    pub fn backend_digest(&self) -> &str {
        &self.backend_digest
    }

    fn key(&self, prefix: &[String], query_id: &str) -> String {
        PrefixKey::new(prefix, query_id, self.template.digest(), &self.backend_digest).digest()
    }

    fn predict(&self, prefix: &[&Exemplar], query: &Exemplar) -> Result<scorer::Classification, EngineError> {
        let prompt = prompting::render(self.template, self.dataset.classes(), prefix, query)?;
        scorer::classify(self.scorer, &prompt, &self.candidates).map_err(|source| EngineError::Backend {
            prefix_len: prefix.len(),
            query_id: query.id.clone(),
            source,
        })
    }

    /// Accuracy on the eval split for each prefix in `slots`.
    fn evaluate_slots(&self, slots: &[&[String]]) -> Result<Vec<Accuracy>, EngineError> {
        let queries = self.dataset.eval();
        let n = queries.len();
        let resolved: Vec<Vec<&Exemplar>> = slots
            .iter()
            .map(|ids| self.dataset.resolve(ids.iter()))
            .collect::<Result<_, _>>()?;

        let mut predictions: Vec<Option<usize>> = vec![None; slots.len() * n];
        let mut keys: Vec<Option<String>> = vec![None; slots.len() * n];
        let mut pending = Vec::new();
        for (s, ids) in slots.iter().enumerate() {
            for (q, query) in queries.iter().enumerate() {
                let unit = s * n + q;
                if let Some(cache) = &self.cache {
                    let key = self.key(ids, &query.id);
                    if let Some(hit) = cache.get(&key) {
                        predictions[unit] = Some(hit.predicted);
                        continue;
                    }
                    keys[unit] = Some(key);
                }
                pending.push(unit);
            }
        }
        if let Some(seed) = self.dispatch_shuffle {
            pending.shuffle(&mut seeding::rng_for("dispatch", &[seed, slots.len() as u64]));
        }

        // Units past the smallest failing unit are skipped; every unit before
        // it still runs, so the reported error does not depend on scheduling.
        let min_failed = AtomicUsize::new(usize::MAX);
        let outcomes: Vec<(usize, Option<Result<usize, EngineError>>)> = self.pool.install(|| {
            pending
                .par_iter()
                .map(|&unit| {
                    if unit > min_failed.load(Ordering::Relaxed) {
                        return (unit, None);
                    }
                    let result = self.predict(&resolved[unit / n], &queries[unit % n]).and_then(|c| {
                        if let (Some(cache), Some(key)) = (&self.cache, &keys[unit]) {
                            cache
                                .insert(
                                    key.clone(),
                                    CachedPrediction {
                                        predicted: c.predicted,
                                        scores: c.scores.iter().map(|s| s.score).collect(),
                                    },
                                )
                                .map_err(EngineError::Cache)?;
                        }
                        Ok(c.predicted)
                    });
                    if result.is_err() {
                        min_failed.fetch_min(unit, Ordering::Relaxed);
                    }
                    (unit, Some(result))
                })
                .collect()
        });

        let mut first_error: Option<(usize, EngineError)> = None;
        for (unit, outcome) in outcomes {
            match outcome {
                Some(Ok(label)) => predictions[unit] = Some(label),
                Some(Err(e)) if first_error.as_ref().is_none_or(|(u, _)| unit < *u) => {
                    first_error = Some((unit, e));
                }
                Some(Err(_)) | None => {}
            }
        }
        if let Some((_, e)) = first_error {
            return Err(e);
        }

        Ok((0..slots.len())
            .map(|s| {
                let correct = (0..n)
                    .filter(|&q| predictions[s * n + q] == Some(queries[q].label))
                    .count() as u64;
                Accuracy {
                    correct,
                    total: n as u64,
                }
            })
            .collect())
    }

    /// Eval-split accuracy after the given prefix.
    pub fn evaluate_prefix(&self, prefix: &[String]) -> Result<Accuracy, EngineError> {
        Ok(self.evaluate_slots(&[prefix])?[0])
    }

    pub fn support_for(&self, trial: u32) -> Result<SupportSet, EngineError> {
        Ok(corpus::sample_support(&self.dataset, self.config.k, trial, self.config.seed)?)
    }

    /// The orderings scanned in `trial`.
    pub fn orderings(&self, support: &SupportSet) -> Vec<Vec<String>> {
        let count = self.config.permutation_count();
        (0..count)
            .map(|p| {
                if self.config.exhaustive {
                    nth_ordering(&support.members, p)
                } else {
                    permute(support, p as u32, self.config.seed)
                }
            })
            .collect()
    }

    /// Scan every ordering of one trial: P × (K + 1) records.
    pub fn run_trial(&self, trial: u32) -> Result<TrialOutput, EngineError> {
        self.run_trial_inner(trial).map_err(|e| EngineError::Trial {
            trial,
            source: Box::new(e),
        })
    }

    fn run_trial_inner(&self, trial: u32) -> Result<TrialOutput, EngineError> {
        let support = self.support_for(trial)?;
        let orderings = self.orderings(&support);
        let k_max = self.config.k;

        // Cells in (perm, k) order; each maps to an evaluation slot.
        let mut slots: Vec<&[String]> = Vec::new();
        let mut cell_slot = Vec::with_capacity(orderings.len() * (k_max + 1));
        let mut seen: BTreeMap<&[String], usize> = BTreeMap::new();
        for order in &orderings {
            for k in 0..=k_max {
                let prefix = &order[..k];
                let slot = if self.cache.is_some() {
                    *seen.entry(prefix).or_insert_with(|| {
                        slots.push(prefix);
                        slots.len() - 1
                    })
                } else {
                    slots.push(prefix);
                    slots.len() - 1
                };
                cell_slot.push(slot);
            }
        }
        let accuracies = self.evaluate_slots(&slots)?;
        if let Some(cache) = &self.cache {
            cache.flush().map_err(EngineError::Cache)?;
        }

        let mut records = Vec::with_capacity(cell_slot.len());
        let mut cells = cell_slot.into_iter();
        for (p, order) in orderings.iter().enumerate() {
            for k in 0..=k_max {
                let acc = accuracies[cells.next().expect("one slot per cell")];
                records.push(EvalRecord {
                    trial,
                    perm: p as u32,
                    k: k as u32,
                    correct: acc.correct,
                    total: acc.total,
                    accuracy: acc.value(),
                    prefix_ids: order[..k].to_vec(),
                });
            }
        }
        Ok(TrialOutput { support, records })
    }

    fn provenance(&self, supports: Vec<SupportSet>) -> Provenance {
        let protocol = self.config.protocol();
        Provenance {
            format: ARTIFACT_FORMAT.into(),
            dataset: self.dataset.name().to_string(),
            dataset_digest: self.full_digest.clone(),
            config_digest: seeding::json_digest(&protocol),
            template_digest: self.template.digest().to_string(),
            backend: self.backend_identity.clone(),
            backend_digest: self.backend_digest.clone(),
            protocol,
            classes: self.dataset.classes().to_vec(),
            eval_ids: self.dataset.eval().iter().map(|e| e.id.clone()).collect(),
            supports,
        }
    }

    fn assemble(&self, outputs: Vec<TrialOutput>) -> RunArtifact {
        let mut supports = Vec::with_capacity(outputs.len());
        let mut records = Vec::new();
        for out in outputs {
            supports.push(out.support);
            records.extend(out.records);
        }
        RunArtifact {
            provenance: self.provenance(supports),
            records,
        }
    }

    /// Run all trials in order.
    pub fn run_experiment(&self) -> Result<RunArtifact, EngineError> {
        let outputs = (0..self.config.trials)
            .map(|t| self.run_trial(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.assemble(outputs))
    }

    /// Run all trials, saving a checkpoint after each one. With `resume`,
    /// trials already recorded in a matching checkpoint are reused.
    pub fn run_experiment_resumable(&self, checkpoint: &Path, resume: bool) -> Result<RunArtifact, EngineError> {
        let run_digest = seeding::json_digest(&self.provenance(Vec::new()));
        let mut state = if resume && checkpoint.exists() {
            let state = Checkpoint::load(checkpoint)?;
            if state.run_digest != run_digest {
                return Err(EngineError::Checkpoint {
                    path: checkpoint.display().to_string(),
                    message: "checkpoint belongs to a different run configuration".into(),
                });
            }
            state
        } else {
            Checkpoint::new(run_digest)
        };
        state.save(checkpoint)?;
        for t in 0..self.config.trials {
            if state.trials.iter().any(|o| o.support.trial == t) {
                continue;
            }
            let output = self.run_trial(t)?;
            state.trials.push(output);
            state.save(checkpoint)?;
        }
        let mut outputs = state.trials;
        outputs.sort_by_key(|o| o.support.trial);
        Ok(self.assemble(outputs))
    }
}
