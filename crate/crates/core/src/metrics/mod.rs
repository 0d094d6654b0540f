//! Ranking metrics (AUC, recall at fixed precision), provenance slices, and the
//! ablation and sweep harnesses.

mod harness;

use thiserror::Error;

pub use harness::{
    ablation_run, sweep, summarize_runs, write_ablation_csv, write_sweep_csv, AblationRow, SweepGrid, SweepRow, Variant,
    VariantSummary,
};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties broken by index for determinism.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Area under the ROC curve via the Mann-Whitney statistic with average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined {
            metric: "auc",
            reason: format!("needs both classes, got {pos} positives and {neg} negatives"),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Best qualifying operating point: `(recall, threshold)` of the score-descending
/// prefix (whole tie groups only) with the highest recall among those with
/// precision at least `p`. `None` when no prefix qualifies.
pub fn operating_point(scores: &[f64], labels: &[u8], p: f64) -> Result<Option<(f64, f64)>, MetricError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::Undefined {
            metric: "recall_at_precision",
            reason: "no positive labels".into(),
        });
    }
    let idx = descending(scores);
    let (mut tp, mut taken) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += labels[idx[i]] as usize;
            taken += 1;
            i += 1;
        }
        let precision = tp as f64 / taken as f64;
        let recall = tp as f64 / pos as f64;
        if precision >= p && best.is_none_or(|(r, _)| recall > r) {
            best = Some((recall, s));
        }
    }
    Ok(best)
}

/// Maximum recall over score-descending prefixes with precision at least `p`; 0 if
/// none qualifies.
pub fn recall_at_precision(scores: &[f64], labels: &[u8], p: f64) -> Result<f64, MetricError> {
    Ok(operating_point(scores, labels, p)?.map_or(0.0, |(r, _)| r))
}

/// Evaluation tags of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub label: u8,
    pub camouflaged: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SliceResult {
    /// AUC of the slice's positives against all negatives; `None` if undefined.
    pub auc: Option<f64>,
    /// Recall of the slice's positives at the full-population operating point.
    pub recall_at_p90: Option<f64>,
    pub positives: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub r_at_p90: f64,
    pub camouflaged: SliceResult,
    pub ring: SliceResult,
}

pub const PRECISION_TARGET: f64 = 0.9;

/// Full-population metrics plus camouflaged-only and ring-only slices.
pub fn evaluate(scores: &[f64], tags: &[Provenance]) -> Result<EvalResult, MetricError> {
    let labels: Vec<u8> = tags.iter().map(|t| t.label).collect();
    let auc_all = auc(scores, &labels)?;
    let op = operating_point(scores, &labels, PRECISION_TARGET)?;
    let slice = |camo: bool| -> SliceResult {
        let keep: Vec<usize> = (0..tags.len())
            .filter(|&i| tags[i].label == 0 || tags[i].camouflaged == camo)
            .collect();
        let positives = keep.iter().filter(|&&i| tags[i].label == 1).count();
        let s: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
        let recall = (positives > 0).then(|| {
            op.map_or(0.0, |(_, thr)| {
                keep.iter().filter(|&&i| labels[i] == 1 && scores[i] >= thr).count() as f64 / positives as f64
            })
        });
        SliceResult {
            auc: auc(&s, &l).ok(),
            recall_at_p90: recall,
            positives,
        }
    };
    Ok(EvalResult {
        auc: auc_all,
        r_at_p90: op.map_or(0.0, |(r, _)| r),
        camouflaged: slice(true),
        ring: slice(false),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_is_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::Undefined { .. })));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_precision(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.9).unwrap(), 1.0);
        assert_eq!(recall_at_precision(&[0.9, 0.8, 0.1], &[0, 0, 1], 0.9).unwrap(), 0.0);
        let labels = [1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 10.0).collect();
        assert_eq!(recall_at_precision(&scores, &labels, 0.9).unwrap(), 0.8);
    }

    #[test]
    fn ties_are_grouped() {
        // One tie group of a positive and a negative: precision 0.5, never qualifies.
        assert_eq!(recall_at_precision(&[0.5, 0.5], &[1, 0], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn slices_use_global_threshold() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let tags = [
            Provenance { label: 1, camouflaged: false },
            Provenance { label: 1, camouflaged: false },
            Provenance { label: 0, camouflaged: false },
            Provenance { label: 1, camouflaged: true },
            Provenance { label: 0, camouflaged: false },
        ];
        let r = evaluate(&scores, &tags).unwrap();
        assert!((r.r_at_p90 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.camouflaged.recall_at_p90, Some(0.0));
        assert_eq!(r.ring.recall_at_p90, Some(1.0));
        assert_eq!(r.camouflaged.auc, Some(0.5));
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
