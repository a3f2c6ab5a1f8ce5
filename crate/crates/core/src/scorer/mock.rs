//! Deterministic mock models. They never perform I/O; a prediction is a
//! pure function of the prefix ids in order, the query, and the spec.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ScoreError, Scorer};
use crate::corpus::{Dataset, Exemplar};
use crate::prompting::RenderedPrompt;
use crate::seeding::PartsHasher;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MockModelSpec {
    /// Always predicts `label`.
    LabelBias { label: usize },
    /// Predicts the majority label among prefix exemplars; ties and the
    /// empty prefix predict `default_label`.
    PrefixMajority { default_label: usize },
    /// Predicts a stable hash of (salt, prefix ids in order, query id) mod C.
    Hash {
        #[serde(default)]
        salt: u64,
    },
    /// The most recently added exemplar decides: ids in `helpful` make the
    /// model answer the gold label, ids in `harmful` make it answer the next
    /// label instead. Any other prefix falls back to hash mode.
    Influence {
        helpful: Vec<String>,
        harmful: Vec<String>,
        #[serde(default)]
        salt: u64,
    },
}

impl MockModelSpec {
    pub fn validate(&self, n_classes: usize) -> Result<(), ScoreError> {
        if n_classes < 2 {
            return Err(ScoreError::TooFewClasses(n_classes));
        }
        match self {
            MockModelSpec::LabelBias { label } if *label >= n_classes => Err(ScoreError::Config(
                format!("label-bias label {label} outside 0..{n_classes}"),
            )),
            MockModelSpec::PrefixMajority { default_label } if *default_label >= n_classes => {
                Err(ScoreError::Config(format!(
                    "prefix-majority default label {default_label} outside 0..{n_classes}"
                )))
            }
            MockModelSpec::Influence { helpful, harmful, .. } => {
                let helpful: HashSet<_> = helpful.iter().collect();
                match harmful.iter().find(|id| helpful.contains(id)) {
                    Some(id) => Err(ScoreError::Config(format!(
                        "exemplar {id} listed as both helpful and harmful"
                    ))),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

fn hash_label(salt: u64, prefix: &[&Exemplar], query: &Exemplar, n_classes: usize) -> usize {
    let h = PartsHasher::new()
        .part(&salt.to_string())
        .parts(prefix.iter().map(|e| e.id.as_str()))
        .part(&query.id)
        .finish_u64();
    (h % n_classes as u64) as usize
}

/// The mock's predicted class for `query` after `prefix`.
pub fn mock_classify(
    spec: &MockModelSpec,
    prefix: &[&Exemplar],
    query: &Exemplar,
    n_classes: usize,
) -> usize {
    match spec {
        MockModelSpec::LabelBias { label } => *label,
        MockModelSpec::PrefixMajority { default_label } => {
            let mut counts = vec![0usize; n_classes];
            for e in prefix {
                counts[e.label] += 1;
            }
            let top = counts.iter().copied().max().unwrap_or(0);
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == top && c > 0);
            match (winners.next(), winners.next()) {
                (Some((label, _)), None) => label,
                _ => *default_label,
            }
        }
        MockModelSpec::Hash { salt } => hash_label(*salt, prefix, query, n_classes),
        MockModelSpec::Influence {
            helpful,
            harmful,
            salt,
        } => match prefix.last() {
            Some(last) if helpful.contains(&last.id) => query.label,
            Some(last) if harmful.contains(&last.id) => (query.label + 1) % n_classes,
            _ => hash_label(*salt, prefix, query, n_classes),
        },
    }
}

/// A [`Scorer`] wrapping a mock spec. The predicted class scores 0, every
/// other class scores -1.
#[derive(Debug, Clone)]
pub struct MockScorer {
    spec: MockModelSpec,
    dataset: Dataset,
}

impl MockScorer {
    pub fn new(spec: MockModelSpec, dataset: &Dataset) -> Result<Self, ScoreError> {
        spec.validate(dataset.classes().len())?;
        Ok(Self {
            spec,
            dataset: dataset.clone(),
        })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    fn lookup(&self, id: &str) -> Result<&Exemplar, ScoreError> {
        self.dataset
            .get(id)
            .ok_or_else(|| ScoreError::Config(format!("mock backend does not know exemplar {id}")))
    }

    pub fn predict(&self, prompt: &RenderedPrompt) -> Result<usize, ScoreError> {
        let prefix = prompt
            .prefix_ids
            .iter()
            .map(|id| self.lookup(id))
            .collect::<Result<Vec<_>, _>>()?;
        let query = self.lookup(&prompt.query_id)?;
        Ok(mock_classify(
            &self.spec,
            &prefix,
            query,
            self.dataset.classes().len(),
        ))
    }
}

impl Scorer for MockScorer {
    fn identity(&self) -> String {
        format!(
            "mock:{}",
            serde_json::to_string(&self.spec).expect("spec serializes")
        )
    }

    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError> {
        let predicted = self.predict(prompt)?;
        Ok((0..candidates.len())
            .map(|i| if i == predicted { 0.0 } else { -1.0 })
            .collect())
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}
