//! Model backends and candidate-ranking classification.
//!
//! A backend assigns a score to each candidate continuation of a rendered
//! prompt; the predicted class is the argmax, ties going to the lowest class
//! index.

mod mock;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::RenderedPrompt;

pub use mock::{mock_classify, MockModelSpec, MockScorer};
pub use remote::{score_remote, RemoteConfig, RemoteScorer};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("transport failure for query {query_id} after {attempts} attempt(s): {message}")]
    Transport {
        query_id: String,
        attempts: u32,
        message: String,
    },
    #[error("protocol error for query {query_id}: {message}")]
    Protocol { query_id: String, message: String },
    #[error("non-finite score {value} for class {label}")]
    NonFinite { label: usize, value: f64 },
    #[error("classification needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("backend returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error("prompt for query {query_id} is {chars} characters, over the budget of {budget}")]
    PromptTooLong {
        query_id: String,
        chars: usize,
        budget: usize,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl ScoreError {
    /// Failures worth surfacing as "backend unavailable" rather than bad input.
    pub fn is_transport(&self) -> bool {
        matches!(self, ScoreError::Transport { .. })
    }
}

/// Score for one class; higher is preferred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub predicted: usize,
    pub scores: Vec<CandidateScore>,
}

pub trait Scorer: Send + Sync {
    /// Stable description of the backend. Feeds cache keys and provenance.
    fn identity(&self) -> String;

    /// One score per candidate continuation, in candidate order.
    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError>;

    /// Whether equal inputs always produce equal outputs.
    fn is_deterministic(&self) -> bool {
        false
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError> {
        (**self).score(prompt, candidates)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError> {
        (**self).score(prompt, candidates)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

/// Argmax over scores; the lowest class index wins ties.
pub fn argmax(scores: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<CandidateScore> = None;
    for s in scores {
        best = match best {
            None => Some(*s),
            Some(b) if s.score > b.score || (s.score == b.score && s.label < b.label) => Some(*s),
            keep => keep,
        };
    }
    best.map(|b| b.label)
}

/// Score every class continuation and pick the best one.
///
/// `candidates[i]` is the continuation for class `i`.
pub fn classify<S: Scorer + ?Sized>(
    backend: &S,
    prompt: &RenderedPrompt,
    candidates: &[String],
) -> Result<Classification, ScoreError> {
    if candidates.len() < 2 {
        return Err(ScoreError::TooFewClasses(candidates.len()));
    }
    let raw = backend.score(prompt, candidates)?;
    if raw.len() != candidates.len() {
        return Err(ScoreError::ScoreCount {
            expected: candidates.len(),
            got: raw.len(),
        });
    }
    let scores: Vec<CandidateScore> = raw
        .into_iter()
        .enumerate()
        .map(|(label, score)| {
            if score.is_finite() {
                Ok(CandidateScore { label, score })
            } else {
                Err(ScoreError::NonFinite { label, value: score })
            }
        })
        .collect::<Result<_, _>>()?;
    let predicted = argmax(&scores).expect("at least two scores");
    Ok(Classification { predicted, scores })
}
