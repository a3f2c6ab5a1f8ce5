//! Exact expectation of the per-k accuracy curve by enumeration.
//!
//! For a fixed support set of K exemplars, the expected accuracy after a
//! random k-prefix is the average over all K!/(K-k)! ordered k-prefixes.
//! Enumerating them is feasible for small K and gives the value the
//! Monte Carlo estimator must converge to.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{self, AnalyticsError};
use crate::corpus::{Dataset, Exemplar, SupportSet};
use crate::engine::{Engine, EngineError, Protocol, RunConfig, MAX_EXHAUSTIVE_K};
use crate::prompting::{self, PromptError, Template};
use crate::scorer::{self, ScoreError, Scorer};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("exact enumeration supports k <= {max}, got {k}")]
    TooLarge { k: usize, max: usize },
    #[error("backend is nondeterministic: two evaluations of query {query_id} after prefix {prefix:?} disagree")]
    Nondeterministic { prefix: Vec<String>, query_id: String },
    #[error("eval split is empty")]
    EmptyEval,
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failed on query {query_id}: {source}")]
    Backend {
        query_id: String,
        #[source]
        source: ScoreError,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

type Exact = Ratio<i128>;

fn to_f64(r: &Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPoint {
    pub k: usize,
    /// Number of ordered k-prefixes enumerated.
    pub prefixes: usize,
    pub numerator: i128,
    pub denominator: i128,
    pub exact_mean: f64,
    /// Population variance of accuracy over the enumerated prefixes.
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl ExactPoint {
    pub fn exact(&self) -> Exact {
        Ratio::new(self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactCurve {
    pub trial: u32,
    pub points: Vec<ExactPoint>,
}

/// Every ordered k-prefix of `items`, in lexicographic order of positions.
pub fn k_prefixes<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    fn extend<T: Clone>(items: &[T], k: usize, used: &mut [bool], cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..items.len() {
            if !used[i] {
                used[i] = true;
                cur.push(items[i].clone());
                extend(items, k, used, cur, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if k <= items.len() {
        extend(items, k, &mut vec![false; items.len()], &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Exact accuracy of `backend` on `eval` after `prefix`, evaluating each
/// query twice to catch nondeterminism.
fn prefix_accuracy(
    prefix: &[&Exemplar],
    eval: &[Exemplar],
    classes: &[String],
    backend: &dyn Scorer,
    template: &Template,
    candidates: &[String],
) -> Result<Exact, OracleError> {
    let mut correct = 0i128;
    for query in eval {
        let prompt = prompting::render(template, classes, prefix, query)?;
        let run = || {
            scorer::classify(backend, &prompt, candidates).map_err(|source| OracleError::Backend {
                query_id: query.id.clone(),
                source,
            })
        };
        let first = run()?;
        if run()? != first {
            return Err(OracleError::Nondeterministic {
                prefix: prefix.iter().map(|e| e.id.clone()).collect(),
                query_id: query.id.clone(),
            });
        }
        if first.predicted == query.label {
            correct += 1;
        }
    }
    Ok(Ratio::new(correct, eval.len() as i128))
}

/// Exact expected accuracy at every k for one support set, evaluated on the
/// eval split of `dataset` (the split is used as is, not subsampled).
pub fn exact_expectation(
    support: &SupportSet,
    dataset: &Dataset,
    backend: &dyn Scorer,
    template: &Template,
) -> Result<ExactCurve, OracleError> {
    let k_max = support.members.len();
    if k_max > MAX_EXHAUSTIVE_K {
        return Err(OracleError::TooLarge {
            k: k_max,
            max: MAX_EXHAUSTIVE_K,
        });
    }
    if dataset.eval().is_empty() {
        return Err(OracleError::EmptyEval);
    }
    template.check_fields(dataset.field_names())?;
    let members = dataset.resolve(support.members.iter())?;
    let candidates = template.continuations(dataset.classes());

    let points = (0..=k_max)
        .map(|k| {
            let prefixes = k_prefixes(&members, k);
            let accs: Vec<Exact> = prefixes
                .par_iter()
                .map(|p| prefix_accuracy(p, dataset.eval(), dataset.classes(), backend, template, &candidates))
                .collect::<Result<_, _>>()?;
            let n = Exact::from_integer(accs.len() as i128);
            let mean = accs.iter().fold(Exact::from_integer(0), |a, v| a + v) / n;
            let variance = accs
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .fold(Exact::from_integer(0), |a, v| a + v)
                / n;
            let min = accs.iter().min().expect("at least one prefix");
            let max = accs.iter().max().expect("at least one prefix");
            Ok(ExactPoint {
                k,
                prefixes: accs.len(),
                numerator: *mean.numer(),
                denominator: *mean.denom(),
                exact_mean: to_f64(&mean),
                variance: to_f64(&variance),
                min: to_f64(min),
                max: to_f64(max),
            })
        })
        .collect::<Result<_, OracleError>>()?;
    Ok(ExactCurve {
        trial: support.trial,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyPoint {
    pub k: usize,
    pub grand_mean: f64,
    /// Average of the trials' exact expectations.
    pub exact_mean: f64,
    pub abs_error: f64,
    /// Standard error of the grand mean implied by the enumerated variances.
    pub std_error: f64,
    pub tolerance: f64,
    /// Every trial's estimate lies within that trial's [min, max] range.
    pub within_range: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub protocol: Protocol,
    /// `"fixed"`, `"exact"` (exhaustive orderings) or `"3se"`.
    pub tolerance_mode: String,
    pub points: Vec<VerifyPoint>,
    pub trials: Vec<ExactCurve>,
    pub max_abs_error: f64,
    pub pass: bool,
}

/// Run the engine and compare its curve with exact enumeration.
///
/// Per k the tolerance is `tolerance` when given; otherwise zero for
/// exhaustive runs (the estimator is then exact) and three standard errors
/// `3·√(Σ_t v_tk)/(T·√P)` for sampled runs, which is `3·√(v_k/P)` for a
/// single trial.
pub fn verify_estimator(
    config: &RunConfig,
    dataset: &Dataset,
    backend: &dyn Scorer,
    template: &Template,
    tolerance: Option<f64>,
) -> Result<VerifyReport, OracleError> {
    if config.k > MAX_EXHAUSTIVE_K {
        return Err(OracleError::TooLarge {
            k: config.k,
            max: MAX_EXHAUSTIVE_K,
        });
    }
    let engine = Engine::new(config.clone(), dataset, template, backend)?;
    let artifact = engine.run_experiment()?;
    let summary = analytics::summarize_curve(&artifact.records)?;
    let trials = artifact
        .provenance
        .supports
        .iter()
        .map(|s| exact_expectation(s, engine.dataset(), backend, template))
        .collect::<Result<Vec<_>, _>>()?;

    let t = trials.len() as f64;
    let p = config.permutation_count() as f64;
    let tolerance_mode = match (tolerance, config.exhaustive) {
        (Some(_), _) => "fixed",
        (None, true) => "exact",
        (None, false) => "3se",
    };
    let points: Vec<VerifyPoint> = summary
        .points
        .iter()
        .map(|pt| {
            let k = pt.k as usize;
            let exact = trials
                .iter()
                .fold(Exact::from_integer(0), |a, c| a + c.points[k].exact())
                / Exact::from_integer(trials.len() as i128);
            let exact_mean = to_f64(&exact);
            let std_error = trials.iter().map(|c| c.points[k].variance).sum::<f64>().sqrt() / (t * p.sqrt());
            let tol = match tolerance_mode {
                "fixed" => tolerance.expect("fixed mode has a tolerance"),
                "exact" => 0.0,
                _ => 3.0 * std_error,
            };
            let within_range = trials
                .iter()
                .zip(&pt.mean_over_perms_per_trial)
                .all(|(c, m)| c.points[k].min <= *m && *m <= c.points[k].max);
            let abs_error = (pt.grand_mean - exact_mean).abs();
            VerifyPoint {
                k,
                grand_mean: pt.grand_mean,
                exact_mean,
                abs_error,
                std_error,
                tolerance: tol,
                within_range,
                pass: abs_error <= tol,
            }
        })
        .collect();
    let max_abs_error = points.iter().map(|p| p.abs_error).fold(0.0, f64::max);
    let pass = points.iter().all(|p| p.pass);
    Ok(VerifyReport {
        protocol: config.protocol(),
        tolerance_mode: tolerance_mode.into(),
        points,
        trials,
        max_abs_error,
        pass,
    })
}
