//! Aggregation of evaluation records: per-k curves, per-exemplar averages,
//! trial Z-scores and high/low exemplar selection.
//!
//! Means are accumulated as exact rationals over the records' correct/total
//! counts and rounded to f64 once, so equal expectations compare equal.

mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::IndexMap;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SupportSet;
use crate::engine::EvalRecord;

pub use tables::{curve_csv, oneshot_csv, plot_curve_csv, traces_csv, zscores_csv};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("no records")]
    Empty,
    #[error("incomplete grid: missing record for trial {trial}, perm {perm}, k {k}")]
    Missing { trial: u32, perm: u32, k: u32 },
    #[error("duplicate record for trial {trial}, perm {perm}, k {k}")]
    Duplicate { trial: u32, perm: u32, k: u32 },
    #[error("record for trial {trial}, perm {perm}, k {k} is inconsistent: {reason}")]
    Inconsistent {
        trial: u32,
        perm: u32,
        k: u32,
        reason: String,
    },
    #[error("no support set for trial {0}")]
    MissingSupport(u32),
    #[error("exemplar {id} of trial {trial} never appears in the records")]
    MissingExemplar { trial: u32, id: String },
    #[error("z-scores need at least 2 exemplars per trial, got {0}")]
    TooFewExemplars(usize),
    #[error(
        "only {found} exemplars exceed |z| > {threshold}; {needed} are needed for two disjoint sets, consider lowering the threshold"
    )]
    InsufficientCandidates {
        found: usize,
        needed: usize,
        threshold: f64,
    },
}

type Exact = Ratio<i128>;

fn exact(correct: u64, total: u64) -> Exact {
    Ratio::new(correct as i128, total.max(1) as i128)
}

fn to_f64(r: &Exact) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Population mean and standard deviation of exact values.
fn exact_moments(values: &[Exact]) -> (Exact, f64) {
    let n = Exact::from_integer(values.len() as i128);
    let mean = values.iter().fold(Exact::from_integer(0), |a, v| a + v) / n;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .fold(Exact::from_integer(0), |a, v| a + v)
        / n;
    (mean, to_f64(&var).sqrt())
}

/// Records indexed by (trial, perm, k), with the grid shape checked.
struct Grid<'a> {
    trials: Vec<u32>,
    permutations: u32,
    k_max: u32,
    cells: HashMap<(u32, u32, u32), &'a EvalRecord>,
}

impl<'a> Grid<'a> {
    fn build(records: &'a [EvalRecord]) -> Result<Self, AnalyticsError> {
        if records.is_empty() {
            return Err(AnalyticsError::Empty);
        }
        let trials: Vec<u32> = records.iter().map(|r| r.trial).collect::<BTreeSet<_>>().into_iter().collect();
        let permutations = records.iter().map(|r| r.perm).max().expect("non-empty") + 1;
        let k_max = records.iter().map(|r| r.k).max().expect("non-empty");
        let mut cells = HashMap::with_capacity(records.len());
        for r in records {
            if r.prefix_ids.len() != r.k as usize {
                return Err(AnalyticsError::Inconsistent {
                    trial: r.trial,
                    perm: r.perm,
                    k: r.k,
                    reason: format!("{} prefix ids", r.prefix_ids.len()),
                });
            }
            if r.total == 0 || r.correct > r.total {
                return Err(AnalyticsError::Inconsistent {
                    trial: r.trial,
                    perm: r.perm,
                    k: r.k,
                    reason: format!("accuracy {}/{}", r.correct, r.total),
                });
            }
            if cells.insert((r.trial, r.perm, r.k), r).is_some() {
                return Err(AnalyticsError::Duplicate {
                    trial: r.trial,
                    perm: r.perm,
                    k: r.k,
                });
            }
        }
        for &trial in &trials {
            for perm in 0..permutations {
                for k in 0..=k_max {
                    if !cells.contains_key(&(trial, perm, k)) {
                        return Err(AnalyticsError::Missing { trial, perm, k });
                    }
                }
            }
        }
        Ok(Self {
            trials,
            permutations,
            k_max,
            cells,
        })
    }

    fn get(&self, trial: u32, perm: u32, k: u32) -> &'a EvalRecord {
        self.cells[&(trial, perm, k)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: u32,
    /// One mean per trial, in trial order.
    pub mean_over_perms_per_trial: Vec<f64>,
    pub grand_mean: f64,
    /// Population std of the per-trial means.
    pub std_over_trials: f64,
    /// Population std over every (trial, perm) accuracy.
    pub std_over_all_perms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub trials: Vec<u32>,
    pub permutations: u32,
    pub points: Vec<CurvePoint>,
}

/// Mean and dispersion of accuracy at each k.
pub fn summarize_curve(records: &[EvalRecord]) -> Result<CurveSummary, AnalyticsError> {
    let grid = Grid::build(records)?;
    let points = (0..=grid.k_max)
        .map(|k| {
            let mut all = Vec::with_capacity(grid.trials.len() * grid.permutations as usize);
            let trial_means: Vec<Exact> = grid
                .trials
                .iter()
                .map(|&t| {
                    let values: Vec<Exact> = (0..grid.permutations)
                        .map(|p| {
                            let r = grid.get(t, p, k);
                            exact(r.correct, r.total)
                        })
                        .collect();
                    all.extend(values.iter().copied());
                    exact_moments(&values).0
                })
                .collect();
            let (grand, std_trials) = exact_moments(&trial_means);
            let (_, std_all) = exact_moments(&all);
            CurvePoint {
                k,
                mean_over_perms_per_trial: trial_means.iter().map(to_f64).collect(),
                grand_mean: to_f64(&grand),
                std_over_trials: std_trials,
                std_over_all_perms: std_all,
            }
        })
        .collect();
    Ok(CurveSummary {
        trials: grid.trials,
        permutations: grid.permutations,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMode {
    /// Mean accuracy at the step where the exemplar was just added: exactly
    /// P samples per exemplar per trial.
    #[default]
    AtAddition,
    /// Mean accuracy over every (perm, k) whose prefix contains the exemplar.
    InPrefix,
}

impl std::str::FromStr for MuMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "at-addition" | "at_addition" => Ok(Self::AtAddition),
            "in-prefix" | "in_prefix" => Ok(Self::InPrefix),
            other => Err(format!("unknown mu mode {other:?} (expected at-addition or in-prefix)")),
        }
    }
}

/// Per-exemplar mean accuracies of one trial, in support order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAverages {
    pub trial: u32,
    pub mu: IndexMap<String, f64>,
}

pub fn per_example_average(
    records: &[EvalRecord],
    supports: &[SupportSet],
    mode: MuMode,
) -> Result<Vec<TrialAverages>, AnalyticsError> {
    let grid = Grid::build(records)?;
    let mut out = Vec::with_capacity(grid.trials.len());
    for &trial in &grid.trials {
        let support = supports
            .iter()
            .find(|s| s.trial == trial)
            .ok_or(AnalyticsError::MissingSupport(trial))?;
        let mut sums: HashMap<&str, (Exact, i128)> = HashMap::new();
        for perm in 0..grid.permutations {
            for k in 1..=grid.k_max {
                let r = grid.get(trial, perm, k);
                let acc = exact(r.correct, r.total);
                let ids: &[String] = match mode {
                    MuMode::AtAddition => &r.prefix_ids[k as usize - 1..],
                    MuMode::InPrefix => &r.prefix_ids,
                };
                for id in ids {
                    let e = sums.entry(id.as_str()).or_insert((Exact::from_integer(0), 0));
                    e.0 += acc;
                    e.1 += 1;
                }
            }
        }
        let mut mu = IndexMap::with_capacity(support.members.len());
        for id in &support.members {
            let (sum, count) = sums.get(id.as_str()).ok_or_else(|| AnalyticsError::MissingExemplar {
                trial,
                id: id.clone(),
            })?;
            mu.insert(id.clone(), to_f64(&(sum / Exact::from_integer(*count))));
        }
        out.push(TrialAverages { trial, mu });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialZScores {
    pub trial: u32,
    pub mu_t: f64,
    pub sigma_t: f64,
    /// Exemplar id → (mu_e, z), in support order.
    pub exemplars: IndexMap<String, ExemplarScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarScore {
    pub mu_e: f64,
    pub z: f64,
}

/// Standardize one trial's exemplar means. `sigma_t` is the population
/// standard deviation (squared deviations, divisor K); a zero `sigma_t`
/// gives every exemplar z = 0.
pub fn trial_zscores(averages: &TrialAverages) -> Result<TrialZScores, AnalyticsError> {
    let k = averages.mu.len();
    if k < 2 {
        return Err(AnalyticsError::TooFewExemplars(k));
    }
    let values: Vec<f64> = averages.mu.values().copied().collect();
    let mu_t = values.iter().sum::<f64>() / k as f64;
    let all_equal = values.iter().all(|v| *v == values[0]);
    let sigma_t = if all_equal {
        0.0
    } else {
        (values.iter().map(|v| (v - mu_t) * (v - mu_t)).sum::<f64>() / k as f64).sqrt()
    };
    let exemplars = averages
        .mu
        .iter()
        .map(|(id, &mu_e)| {
            let z = if sigma_t > 0.0 { (mu_e - mu_t) / sigma_t } else { 0.0 };
            (id.clone(), ExemplarScore { mu_e, z })
        })
        .collect();
    Ok(TrialZScores {
        trial: averages.trial,
        mu_t,
        sigma_t,
        exemplars,
    })
}

/// An exemplar's most extreme z across the trials it appeared in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub id: String,
    pub z: f64,
    pub trial: u32,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub high_set: Vec<String>,
    pub low_set: Vec<String>,
    /// Every exemplar, by pooled z descending then id.
    pub ranking: Vec<PooledScore>,
}

fn pool_extremes(trials: &[TrialZScores], threshold: f64) -> Vec<PooledScore> {
    let mut pooled: BTreeMap<&str, (f64, u32)> = BTreeMap::new();
    for t in trials {
        for (id, s) in &t.exemplars {
            let slot = pooled.entry(id.as_str()).or_insert((s.z, t.trial));
            if s.z.abs() > slot.0.abs() {
                *slot = (s.z, t.trial);
            }
        }
    }
    let mut ranking: Vec<PooledScore> = pooled
        .into_iter()
        .map(|(id, (z, trial))| PooledScore {
            id: id.to_string(),
            z,
            trial,
            candidate: z.abs() > threshold,
        })
        .collect();
    ranking.sort_by(|a, b| b.z.total_cmp(&a.z).then_with(|| a.id.cmp(&b.id)));
    ranking
}

/// Pick the `set_size` highest- and lowest-z exemplars among those with
/// |z| > `threshold` in some trial. The two sets are always disjoint.
pub fn select_extremes(
    trials: &[TrialZScores],
    threshold: f64,
    set_size: usize,
) -> Result<Selection, AnalyticsError> {
    let ranking = pool_extremes(trials, threshold);
    let candidates: Vec<&PooledScore> = ranking.iter().filter(|p| p.candidate).collect();
    let needed = 2 * set_size;
    if candidates.len() < needed || set_size == 0 {
        return Err(AnalyticsError::InsufficientCandidates {
            found: candidates.len(),
            needed,
            threshold,
        });
    }
    let high_set: Vec<String> = candidates[..set_size].iter().map(|p| p.id.clone()).collect();
    let mut rest: Vec<&PooledScore> = candidates[set_size..].to_vec();
    rest.sort_by(|a, b| a.z.total_cmp(&b.z).then_with(|| a.id.cmp(&b.id)));
    let low_set = rest[..set_size].iter().map(|p| p.id.clone()).collect();
    Ok(Selection {
        high_set,
        low_set,
        ranking,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreReport {
    pub mode: MuMode,
    pub threshold: f64,
    pub set_size: usize,
    pub trials: Vec<TrialZScores>,
    pub selection: Option<Selection>,
}

/// Averages, z-scores and (when feasible) the selection, in one pass.
/// The selection error is returned alongside the partial report.
pub fn zscore_report(
    records: &[EvalRecord],
    supports: &[SupportSet],
    mode: MuMode,
    threshold: f64,
    set_size: usize,
) -> Result<(ZScoreReport, Option<AnalyticsError>), AnalyticsError> {
    let averages = per_example_average(records, supports, mode)?;
    let trials = averages.iter().map(trial_zscores).collect::<Result<Vec<_>, _>>()?;
    let (selection, err) = match select_extremes(&trials, threshold, set_size) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e)),
    };
    Ok((
        ZScoreReport {
            mode,
            threshold,
            set_size,
            trials,
            selection,
        },
        err,
    ))
}
