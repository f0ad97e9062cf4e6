//! Evaluation: confusion matrices, test error, noise-matrix recovery,
//! entropy scores and inlier precision-recall.
//!
//! Everything here reads the hidden ground truth that training never sees.
//! Test error always scores the bare base model — the noise layer cannot
//! even be passed in — because prediction on clean data happens with the
//! layer removed.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::model::{neg_log, Mlp};
use crate::noise::NoiseMatrix;
use crate::synth::Dataset;
use crate::{Error, Result};

/// Which model a confusion matrix describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfusionSource {
    Base,
    Combined,
}

/// Column `j` holds the mean prediction vector over samples whose true
/// class is `j`, so each column lies on the simplex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub matrix: Array2<f64>,
    pub source: ConfusionSource,
}

/// Mean prediction vector per true class.
///
/// Every class `0..probs.ncols()` must occur in `true_labels`.
pub fn confusion_matrix(
    probs: &ArrayView2<f64>,
    true_labels: &[usize],
) -> Result<ConfusionMatrix> {
    let (n, k) = probs.dim();
    if true_labels.len() != n {
        return Err(Error::invalid("label count does not match predictions"));
    }
    let mut matrix = Array2::zeros((k, k));
    let mut counts = vec![0usize; k];
    for (row, &y) in true_labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("true label {y} out of range for {k} classes")));
        }
        counts[y] += 1;
        for i in 0..k {
            matrix[[i, y]] += probs[[row, i]];
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::MissingClass(class));
        }
        for i in 0..k {
            matrix[[i, class]] /= count as f64;
        }
    }
    Ok(ConfusionMatrix {
        matrix,
        source: ConfusionSource::Base,
    })
}

/// The combined model's confusion matrix is the product `Q * C`.
pub fn combined_confusion(q: &NoiseMatrix, c: &ConfusionMatrix) -> Result<ConfusionMatrix> {
    if q.dim() != c.matrix.nrows() {
        return Err(Error::invalid(format!(
            "noise matrix is {}x{} but confusion is {:?}",
            q.dim(),
            q.dim(),
            c.matrix.dim()
        )));
    }
    Ok(ConfusionMatrix {
        matrix: q.matrix().dot(&c.matrix),
        source: ConfusionSource::Combined,
    })
}

/// Fraction of argmax mispredictions of the bare base model on data with
/// true labels. Ties break toward the smaller class index.
pub fn test_error(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot score an empty dataset"));
    }
    let probs = model.forward(&data.features)?;
    let mut wrong = 0usize;
    for (row, &truth) in data.true_labels.iter().enumerate() {
        if argmax(&probs.row(row)) != truth {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

pub(crate) fn argmax(row: &ArrayView1<f64>) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Largest absolute elementwise difference between two noise matrices
/// (or any equally shaped matrices).
pub fn q_recovery_error(q: &Array2<f64>, q_star: &Array2<f64>) -> Result<f64> {
    crate::simplex::max_abs_diff(q, q_star)
}

/// Shannon entropy of a probability row, natural log.
pub fn entropy_score(p: &ArrayView1<f64>) -> f64 {
    let mut h = 0.0;
    for &x in p.iter() {
        if x > 0.0 {
            h += x * neg_log(x);
        }
    }
    h
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve for a score-ranked binary detection task, with
/// its step-wise average precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub average_precision: f64,
}

/// Sweep a descending threshold over the distinct values of `scores`
/// (higher score = more inlier) and record precision and recall of
/// "predict inlier" at every threshold. Tied scores collapse into one
/// threshold. Average precision is the step-wise integral
/// `sum_k (recall_k - recall_{k-1}) * precision_k`.
pub fn inlier_pr_curve(scores: &[f64], is_inlier: &[bool]) -> Result<PRCurve> {
    if scores.len() != is_inlier.len() {
        return Err(Error::invalid("scores and flags must align"));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let positives = is_inlier.iter().filter(|&&b| b).count();
    if positives == 0 || positives == is_inlier.len() {
        return Err(Error::invalid(
            "need at least one inlier and one outlier to sweep thresholds",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut idx = 0;
    while idx < order.len() {
        // Consume the whole tie group at this threshold.
        let threshold = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == threshold {
            if is_inlier[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PRPoint { recall, precision });
    }
    Ok(PRCurve {
        points,
        average_precision: ap,
    })
}
