//! Synthetic datasets and instrumented backends for tests and smoke runs.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::corpus::{Dataset, Exemplar};
use crate::prompting::{PromptTemplate, RenderedPrompt, Template};
use crate::scorer::{ScoreError, Scorer};

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

fn exemplar(id: String, label: usize) -> Exemplar {
    let text = format!("text of {id}");
    Exemplar::new(id, [("sentence", text)], label)
}

/// `n_train` train exemplars `t0..` with labels cycling through the classes,
/// and `n_eval` eval exemplars `e0..` with a shifted label cycle.
pub fn dataset(n_train: usize, n_eval: usize, n_classes: usize) -> Dataset {
    let eval_labels: Vec<usize> = (0..n_eval).map(|i| (i * 7 + 3) % n_classes).collect();
    dataset_with_eval_labels(n_train, &eval_labels, n_classes)
}

pub fn dataset_with_eval_labels(n_train: usize, eval_labels: &[usize], n_classes: usize) -> Dataset {
    dataset_with_labels(&(0..n_train).map(|i| i % n_classes).collect::<Vec<_>>(), eval_labels, n_classes)
}

pub fn dataset_with_labels(train_labels: &[usize], eval_labels: &[usize], n_classes: usize) -> Dataset {
    Dataset::new(
        "synthetic",
        class_names(n_classes),
        vec!["sentence".into()],
        train_labels
            .iter()
            .enumerate()
            .map(|(i, &l)| exemplar(format!("t{i}"), l))
            .collect(),
        eval_labels
            .iter()
            .enumerate()
            .map(|(i, &l)| exemplar(format!("e{i}"), l))
            .collect(),
    )
    .expect("synthetic dataset is valid")
}

/// Single-text template over the `sentence` field.
pub fn template() -> Template {
    Template::new(PromptTemplate::single_text()).expect("preset is valid")
}

/// Wraps a backend and counts `score` calls by prefix length.
pub struct CountingScorer<S> {
    inner: S,
    by_prefix_len: Mutex<BTreeMap<usize, usize>>,
}

impl<S: Scorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            by_prefix_len: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.by_prefix_len.lock().expect("counter lock").values().sum()
    }

    pub fn calls_at(&self, prefix_len: usize) -> usize {
        self.by_prefix_len
            .lock()
            .expect("counter lock")
            .get(&prefix_len)
            .copied()
            .unwrap_or(0)
    }

    pub fn reset(&self) {
        self.by_prefix_len.lock().expect("counter lock").clear();
    }
}

impl<S: Scorer> Scorer for CountingScorer<S> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError> {
        *self
            .by_prefix_len
            .lock()
            .expect("counter lock")
            .entry(prompt.prefix_ids.len())
            .or_default() += 1;
        self.inner.score(prompt, candidates)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}
