//! Image-level classification metrics and radius-based detection matching.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Default match radius in pixels at 40× magnification.
pub const DEFAULT_RADIUS: f64 = 30.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("AUC is undefined: scores contain only {0} samples")]
    SingleClass(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub annotation: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
}

impl MatchReport {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }

    /// Whether each detection was matched.
    pub fn detection_matched(&self, n_detections: usize) -> Vec<bool> {
        let mut m = vec![false; n_detections];
        for p in &self.pairs {
            m[p.detection] = true;
        }
        m
    }

    pub fn annotation_matched(&self, n_annotations: usize) -> Vec<bool> {
        let mut m = vec![false; n_annotations];
        for p in &self.pairs {
            m[p.annotation] = true;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// One-to-one assignment of detections to annotations within `radius`
/// (inclusive) that maximizes the number of matches, then minimizes their
/// total distance. Points are `(row, col)`.
pub fn match_detections(
    detections: &[(f64, f64)],
    annotations: &[(f64, f64)],
    radius: f64,
) -> Result<MatchReport, EvalError> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(EvalError::Contract(format!("match radius must be a finite value ≥ 0, got {radius}")));
    }
    let (n, m) = (detections.len(), annotations.len());
    let mut pairs = Vec::new();
    if n > 0 && m > 0 {
        // Feasible pairs cost d − K, everything else 0. With K above any
        // achievable total distance, fewer matches can never be cheaper.
        let big = radius * n.min(m) as f64 + 1.0;
        let size = n.max(m);
        let mut cost = vec![0.0; size * size];
        for (i, &d) in detections.iter().enumerate() {
            for (j, &a) in annotations.iter().enumerate() {
                let dd = dist(d, a);
                if dd <= radius {
                    cost[i * size + j] = dd - big;
                }
            }
        }
        let assignment = hungarian(&cost, size);
        for (i, &j) in assignment.iter().enumerate().take(n) {
            if j < m {
                let dd = dist(detections[i], annotations[j]);
                if dd <= radius {
                    pairs.push(MatchedPair { detection: i, annotation: j, distance: dd });
                }
            }
        }
    }
    let tp = pairs.len();
    Ok(MatchReport { tp, fp: n - tp, fn_: m - tp, pairs })
}

/// Minimum-cost perfect assignment on a square `size × size` matrix;
/// returns the column assigned to each row.
fn hungarian(cost: &[f64], size: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * size + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0; size];
    for j in 1..=size {
        rows[p[j] - 1] = j - 1;
    }
    rows
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn prf1(counts: Counts) -> MetricSummary {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    MetricSummary { precision, recall, f1: f1_score(precision, recall), accuracy: None, auc: None }
}

/// Area under the ROC curve by trapezoidal integration; tied scores move
/// the curve diagonally, which counts each tied pair as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Contract("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(EvalError::SingleClass("negative"));
    }
    if neg == 0 {
        return Err(EvalError::SingleClass("positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Ok(area / (pos as f64 * neg as f64))
}

/// Accuracy, precision, recall and F1 of `score ≥ threshold`, plus AUC.
pub fn image_level_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricSummary, EvalError> {
    let auc = auc(scores, labels)?;
    let mut c = Counts::default();
    let mut tn = 0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut summary = prf1(c);
    summary.accuracy = Some((c.tp + tn) as f64 / scores.len() as f64);
    summary.auc = Some(auc);
    Ok(summary)
}
