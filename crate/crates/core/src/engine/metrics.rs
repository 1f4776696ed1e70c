//! Calibrated stacking, gamma selection and GZSL metrics.
//!
//! Categories are identified by their global index in the bundle; a score
//! matrix has one column per candidate category.

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::numerics::Tensor;

/// `2ab / (a + b)`, and 0 when either side is 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Index of the best `score - gamma * seen` entry, lowest index on ties.
pub fn calibrated_predict(scores: &[f64], seen: &[bool], gamma: f64) -> Result<usize, EngineError> {
    if scores.is_empty() {
        return Err(EngineError::Invalid {
            op: "calibrated_predict",
            detail: "empty prototype set".into(),
        });
    }
    if scores.len() != seen.len() {
        return Err(EngineError::Invalid {
            op: "calibrated_predict",
            detail: format!("{} scores for {} categories", scores.len(), seen.len()),
        });
    }
    if !(gamma >= 0.0) {
        return Err(EngineError::Invalid {
            op: "calibrated_predict",
            detail: format!("gamma must be non-negative, got {gamma}"),
        });
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&s, &is_seen)) in scores.iter().zip(seen).enumerate() {
        let v = if is_seen { s - gamma } else { s };
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok(best)
}

/// Row-wise [`calibrated_predict`], mapped to global category ids.
pub fn calibrated_predictions(
    scores: &Tensor,
    candidates: &[usize],
    is_seen: &[bool],
    gamma: f64,
) -> Result<Vec<usize>, EngineError> {
    let seen: Vec<bool> = candidates.iter().map(|&c| is_seen[c]).collect();
    (0..scores.rows())
        .map(|r| calibrated_predict(scores.row_slice(r), &seen, gamma).map(|j| candidates[j]))
        .collect()
}

/// `points` evenly spaced values from 0 to the 99th percentile
/// (nearest rank) of the per-sample score ranges.
pub fn gamma_grid(scores: &Tensor, points: usize) -> Vec<f64> {
    let mut ranges: Vec<f64> = (0..scores.rows())
        .map(|r| {
            let row = scores.row_slice(r);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .filter(|v| v.is_finite())
        .collect();
    if ranges.is_empty() || points <= 1 {
        return vec![0.0];
    }
    ranges.sort_by(f64::total_cmp);
    let rank = ((0.99 * ranges.len() as f64).ceil() as usize).clamp(1, ranges.len());
    let top = ranges[rank - 1];
    if top <= 0.0 {
        return vec![0.0];
    }
    (0..points).map(|i| top * i as f64 / (points - 1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Absent when the group has no instances.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

/// Confusion counts of one category over all evaluated instances.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub category: usize,
    pub seen: bool,
    pub support: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClassCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_positives + self.false_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.true_positives as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seen: GroupMetrics,
    pub unseen: GroupMetrics,
    /// Harmonic means of the seen and unseen values.
    pub overall: OverallMetrics,
    pub gamma: f64,
    pub per_class: Vec<ClassCounts>,
    /// Instances assigned to a seen category.
    pub predicted_seen: usize,
}

/// Accuracy and support-weighted F1 per group.
///
/// `is_seen` is indexed by global category. Per-class F1 counts false
/// positives over every evaluated instance, so unseen instances mistaken
/// for a seen class lower that class's F1.
pub fn evaluate_predictions(labels: &[usize], predictions: &[usize], is_seen: &[bool], gamma: f64) -> EvalReport {
    assert_eq!(labels.len(), predictions.len(), "one prediction per label");
    let c = is_seen.len();
    let mut counts: Vec<ClassCounts> = (0..c)
        .map(|category| ClassCounts {
            category,
            seen: is_seen[category],
            support: 0,
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
        })
        .collect();
    for (&y, &p) in labels.iter().zip(predictions) {
        counts[y].support += 1;
        if y == p {
            counts[y].true_positives += 1;
        } else {
            counts[y].false_negatives += 1;
            counts[p].false_positives += 1;
        }
    }
    let group = |seen: bool| {
        let members: Vec<&ClassCounts> = counts.iter().filter(|k| k.seen == seen && k.support > 0).collect();
        let support: usize = members.iter().map(|k| k.support).sum();
        if support == 0 {
            return GroupMetrics {
                accuracy: None,
                f1: None,
                support: 0,
            };
        }
        let correct: usize = members.iter().map(|k| k.true_positives).sum();
        let f1 = members.iter().map(|k| k.support as f64 * k.f1()).sum::<f64>() / support as f64;
        GroupMetrics {
            accuracy: Some(correct as f64 / support as f64),
            f1: Some(f1),
            support,
        }
    };
    let seen = group(true);
    let unseen = group(false);
    let h = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => harmonic_mean(a, b),
        _ => 0.0,
    };
    let overall = OverallMetrics {
        accuracy: h(seen.accuracy, unseen.accuracy),
        f1: h(seen.f1, unseen.f1),
    };
    let predicted_seen = predictions.iter().filter(|&&p| is_seen[p]).count();
    counts.retain(|k| k.support > 0 || k.false_positives > 0);
    EvalReport {
        seen,
        unseen,
        overall,
        gamma,
        per_class: counts,
        predicted_seen,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    pub harmonic: f64,
    pub predicted_seen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    /// Ascending in gamma.
    pub points: Vec<SweepPoint>,
    /// Seen-prediction counts never increase along the grid.
    pub monotone: bool,
}

impl GammaSweep {
    /// Grid point with the highest harmonic mean, smallest gamma on ties.
    pub fn best(&self) -> &SweepPoint {
        let mut best = &self.points[0];
        for p in &self.points[1..] {
            if p.harmonic > best.harmonic {
                best = p;
            }
        }
        best
    }
}

/// Evaluates every grid value and checks calibration monotonicity.
pub fn sweep_gamma(
    scores: &Tensor,
    labels: &[usize],
    candidates: &[usize],
    is_seen: &[bool],
    grid: &[f64],
) -> Result<GammaSweep, EngineError> {
    if grid.is_empty() {
        return Err(EngineError::Invalid {
            op: "sweep_gamma",
            detail: "empty gamma grid".into(),
        });
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut points = Vec::with_capacity(grid.len());
    for &gamma in &grid {
        let preds = calibrated_predictions(scores, candidates, is_seen, gamma)?;
        let r = evaluate_predictions(labels, &preds, is_seen, gamma);
        let (a, b) = (r.seen.accuracy.unwrap_or(0.0), r.unseen.accuracy.unwrap_or(0.0));
        points.push(SweepPoint {
            gamma,
            seen_accuracy: a,
            unseen_accuracy: b,
            harmonic: harmonic_mean(a, b),
            predicted_seen: r.predicted_seen,
        });
    }
    let monotone = points.windows(2).all(|w| w[1].predicted_seen <= w[0].predicted_seen);
    Ok(GammaSweep { points, monotone })
}

/// Gamma maximising validation harmonic-mean accuracy, with the sweep.
pub fn select_gamma(
    scores: &Tensor,
    labels: &[usize],
    candidates: &[usize],
    is_seen: &[bool],
    grid: &[f64],
) -> Result<(f64, GammaSweep), EngineError> {
    if !labels.iter().any(|&y| !is_seen[y]) {
        return Err(EngineError::NoValidationUnseen);
    }
    let sweep = sweep_gamma(scores, labels, candidates, is_seen, grid)?;
    Ok((sweep.best().gamma, sweep))
}
