//! Multi-label evaluation metrics.
//!
//! Scores and labels are `N x C` row-major grids (sample-major). All
//! report-level values are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_F1_THRESHOLD: f64 = 0.5;

/// Information-retrieval average precision of one class.
///
/// Samples are ranked by descending score with ties broken by ascending
/// sample index; AP is the mean of the precision at each positive's rank.
/// Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn column(grid: &[f64], n: usize, c: usize, j: usize) -> Vec<f64> {
    (0..n).map(|i| grid[i * c + j]).collect()
}

fn label_column(grid: &[bool], n: usize, c: usize, j: usize) -> Vec<bool> {
    (0..n).map(|i| grid[i * c + j]).collect()
}

/// Per-class AP in percent, `None` for classes without positives.
pub fn per_class_ap(scores: &[f64], labels: &[bool], samples: usize, classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|j| {
            average_precision(&column(scores, samples, classes, j), &label_column(labels, samples, classes, j))
                .map(|ap| 100.0 * ap)
        })
        .collect()
}

/// Mean over the defined entries; `None` if there are none.
pub fn mean_ap(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn f1(tp: usize, fp: usize, fne: usize) -> f64 {
    let denom = 2 * tp + fp + fne;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// `(CF1, OF1)` in percent at `score >= threshold`.
///
/// CF1 averages per-class F1 (a class with no predictions and no positives
/// scores 0); OF1 pools every `(sample, class)` decision.
pub fn f1_metrics(scores: &[f64], labels: &[bool], samples: usize, classes: usize, threshold: f64) -> (f64, f64) {
    assert_eq!(scores.len(), samples * classes);
    assert_eq!(labels.len(), samples * classes);
    let mut per_class = vec![(0usize, 0usize, 0usize); classes];
    for i in 0..samples {
        for j in 0..classes {
            let k = i * classes + j;
            let pred = scores[k] >= threshold;
            let entry = &mut per_class[j];
            match (pred, labels[k]) {
                (true, true) => entry.0 += 1,
                (true, false) => entry.1 += 1,
                (false, true) => entry.2 += 1,
                (false, false) => {}
            }
        }
    }
    let cf1 = if classes == 0 {
        0.0
    } else {
        per_class.iter().map(|&(tp, fp, fne)| f1(tp, fp, fne)).sum::<f64>() / classes as f64
    };
    let (tp, fp, fne) = per_class
        .iter()
        .fold((0, 0, 0), |acc, &(a, b, c)| (acc.0 + a, acc.1 + b, acc.2 + c));
    (100.0 * cf1, 100.0 * f1(tp, fp, fne))
}

/// Evaluation of one session on the cumulative test set.
///
/// Serialized field order is fixed: `session`, `classes`, `samples`, `mAP`,
/// `CF1`, `OF1`, `excluded_classes`, `per_class_ap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub session: usize,
    pub classes: usize,
    pub samples: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    /// Classes left out of mAP because the test set has no positives.
    pub excluded_classes: Vec<usize>,
    pub per_class_ap: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn compute(session: usize, scores: &[f64], labels: &[bool], samples: usize, classes: usize) -> Result<Self> {
        if scores.len() != samples * classes || labels.len() != samples * classes {
            return Err(Error::shape(
                "metrics",
                format!("{} scores / {} labels for {samples}x{classes}", scores.len(), labels.len()),
            ));
        }
        let per_class = per_class_ap(scores, labels, samples, classes);
        let excluded = per_class
            .iter()
            .enumerate()
            .filter(|(_, ap)| ap.is_none())
            .map(|(j, _)| j)
            .collect();
        let (cf1, of1) = f1_metrics(scores, labels, samples, classes, DEFAULT_F1_THRESHOLD);
        Ok(MetricsReport {
            session,
            classes,
            samples,
            map: mean_ap(&per_class).unwrap_or(0.0),
            cf1,
            of1,
            excluded_classes: excluded,
            per_class_ap: per_class,
        })
    }
}

/// Average and last mAP over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sessions: usize,
    #[serde(rename = "mAPs")]
    pub maps: Vec<f64>,
    #[serde(rename = "avg_mAP")]
    pub average: f64,
    #[serde(rename = "last_mAP")]
    pub last: f64,
    #[serde(rename = "last_CF1")]
    pub last_cf1: f64,
    #[serde(rename = "last_OF1")]
    pub last_of1: f64,
}

pub fn summarize_maps(maps: &[f64]) -> Result<(f64, f64)> {
    let last = *maps
        .last()
        .ok_or_else(|| Error::Config("cannot summarize an empty run".into()))?;
    Ok((maps.iter().sum::<f64>() / maps.len() as f64, last))
}

pub fn summarize_run(reports: &[MetricsReport]) -> Result<RunSummary> {
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let (average, last) = summarize_maps(&maps)?;
    let final_report = reports.last().expect("non-empty");
    Ok(RunSummary {
        sessions: reports.len(),
        maps,
        average,
        last,
        last_cf1: final_report.cf1,
        last_of1: final_report.of1,
    })
}
