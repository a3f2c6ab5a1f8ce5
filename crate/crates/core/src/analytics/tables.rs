//! CSV tables for external plotting.

use std::collections::BTreeMap;

use super::{AnalyticsError, CurveSummary, Grid, ZScoreReport};
use crate::engine::EvalRecord;

fn finish(writer: csv::Writer<Vec<u8>>) -> String {
    let bytes = writer.into_inner().expect("writing to memory cannot fail");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

fn row<I, S>(w: &mut csv::Writer<Vec<u8>>, fields: I)
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).expect("writing to memory cannot fail");
}

/// One row per k: grand mean, both dispersions, then each trial's mean.
pub fn curve_csv(summary: &CurveSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "k".to_string(),
        "grand_mean".into(),
        "std_over_trials".into(),
        "std_over_all_perms".into(),
    ];
    header.extend(summary.trials.iter().map(|t| format!("trial_{t}_mean")));
    row(&mut w, header);
    for p in &summary.points {
        let mut fields = vec![
            p.k.to_string(),
            p.grand_mean.to_string(),
            p.std_over_trials.to_string(),
            p.std_over_all_perms.to_string(),
        ];
        fields.extend(p.mean_over_perms_per_trial.iter().map(f64::to_string));
        row(&mut w, fields);
    }
    finish(w)
}

/// Mean with ± one-std bands, for shaded-region curve plots.
pub fn plot_curve_csv(summary: &CurveSummary) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    row(
        &mut w,
        [
            "k",
            "mean",
            "lower_trials",
            "upper_trials",
            "lower_all_perms",
            "upper_all_perms",
        ],
    );
    for p in &summary.points {
        row(
            &mut w,
            [
                p.k.to_string(),
                p.grand_mean.to_string(),
                (p.grand_mean - p.std_over_trials).to_string(),
                (p.grand_mean + p.std_over_trials).to_string(),
                (p.grand_mean - p.std_over_all_perms).to_string(),
                (p.grand_mean + p.std_over_all_perms).to_string(),
            ],
        );
    }
    finish(w)
}

/// One row per (trial, perm) holding the accuracy at every k.
pub fn traces_csv(records: &[EvalRecord]) -> Result<String, AnalyticsError> {
    let grid = Grid::build(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trial".to_string(), "perm".into()];
    header.extend((0..=grid.k_max).map(|k| format!("k{k}")));
    row(&mut w, header);
    for &t in &grid.trials {
        for p in 0..grid.permutations {
            let mut fields = vec![t.to_string(), p.to_string()];
            fields.extend((0..=grid.k_max).map(|k| grid.get(t, p, k).accuracy.to_string()));
            row(&mut w, fields);
        }
    }
    Ok(finish(w))
}

/// One-shot accuracy of every permutation's first exemplar, plus one
/// zero-shot reference row per trial.
pub fn oneshot_csv(records: &[EvalRecord]) -> Result<String, AnalyticsError> {
    let grid = Grid::build(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    row(&mut w, ["trial", "kind", "perm", "exemplar_id", "accuracy"]);
    for &t in &grid.trials {
        let zero = grid.get(t, 0, 0);
        row(
            &mut w,
            [t.to_string(), "zero-shot".into(), String::new(), String::new(), zero.accuracy.to_string()],
        );
        if grid.k_max == 0 {
            continue;
        }
        for p in 0..grid.permutations {
            let r = grid.get(t, p, 1);
            row(
                &mut w,
                [
                    t.to_string(),
                    "one-shot".into(),
                    p.to_string(),
                    r.prefix_ids[0].clone(),
                    r.accuracy.to_string(),
                ],
            );
        }
    }
    Ok(finish(w))
}

/// One row per (trial, exemplar), with the selection outcome.
pub fn zscores_csv(report: &ZScoreReport) -> String {
    let mut chosen: BTreeMap<&str, &str> = BTreeMap::new();
    if let Some(sel) = &report.selection {
        chosen.extend(sel.high_set.iter().map(|id| (id.as_str(), "high")));
        chosen.extend(sel.low_set.iter().map(|id| (id.as_str(), "low")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    row(
        &mut w,
        ["trial", "exemplar_id", "mu_e", "mu_t", "sigma_t", "z", "candidate", "selected"],
    );
    for t in &report.trials {
        for (id, s) in &t.exemplars {
            row(
                &mut w,
                [
                    t.trial.to_string(),
                    id.clone(),
                    s.mu_e.to_string(),
                    t.mu_t.to_string(),
                    t.sigma_t.to_string(),
                    s.z.to_string(),
                    (s.z.abs() > report.threshold).to_string(),
                    chosen.get(id.as_str()).copied().unwrap_or("").to_string(),
                ],
            );
        }
    }
    finish(w)
}
