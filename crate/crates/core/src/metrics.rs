//! Accuracy, ROC/AUC and TPR at a fixed FPR for membership scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Parallel scores and binary labels with both classes present.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_pos: usize,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::invalid(format!(
                "scored set needs equal nonempty lengths, got {} scores and {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores must not be NaN"));
        }
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        if n_pos == 0 || n_pos == labels.len() {
            return Err(Error::invalid("scored set needs both classes present"));
        }
        Ok(ScoredSet {
            scores,
            labels,
            n_pos,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.n_pos
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos
    }
}

fn ser_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_infinite() {
        s.serialize_none()
    } else {
        s.serialize_some(t)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// One ROC operating point: predicting members where `score >= threshold`.
/// The initial point has threshold `+inf`, written as `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(serialize_with = "ser_threshold", deserialize_with = "de_threshold")]
    pub threshold: f64,
}

/// Fraction of labels matching `score >= threshold`.
pub fn accuracy(set: &ScoredSet, threshold: f64) -> f64 {
    let hits = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(s, l)| u8::from(**s >= threshold) == **l)
        .count();
    hits as f64 / set.labels.len() as f64
}

/// Cumulative (false, true) positive counts at each distinct threshold,
/// highest first, starting from (0, 0).
fn count_steps(set: &ScoredSet) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut steps = vec![(0, 0, f64::INFINITY)];
    let (mut fp, mut tp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let t = set.scores[order[k]];
        while k < order.len() && set.scores[order[k]] == t {
            if set.labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        steps.push((fp, tp, t));
    }
    steps
}

/// ROC points over descending distinct thresholds and the trapezoidal AUC.
///
/// The area is accumulated in integer units and divided once, so it equals
/// the Mann-Whitney pair count with ties scored one half.
pub fn roc_auc(set: &ScoredSet) -> (Vec<RocPoint>, f64) {
    let (p, n) = (set.n_pos() as f64, set.n_neg() as f64);
    let steps = count_steps(set);
    let points = steps
        .iter()
        .map(|&(fp, tp, t)| RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: t,
        })
        .collect();
    let twice_area: u128 = steps
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0) * (w[1].1 + w[0].1)) as u128)
        .sum();
    (points, twice_area as f64 / (2.0 * p * n))
}

/// Pair-count AUC: positive above negative scores 1, ties score one half.
pub fn pairwise_auc(set: &ScoredSet) -> f64 {
    let mut twice = 0u128;
    for (i, &si) in set.scores.iter().enumerate() {
        if set.labels[i] != 1 {
            continue;
        }
        for (j, &sj) in set.scores.iter().enumerate() {
            if set.labels[j] == 0 {
                twice += match si.total_cmp(&sj) {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2.0 * set.n_pos() as f64 * set.n_neg() as f64)
}

/// Largest TPR over thresholds whose FPR stays at or below `fpr_target`.
pub fn tpr_at_fpr(set: &ScoredSet, fpr_target: f64) -> Result<f64> {
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::invalid(format!("FPR target {fpr_target} outside (0, 1)")));
    }
    let (p, n) = (set.n_pos() as f64, set.n_neg() as f64);
    Ok(count_steps(set)
        .into_iter()
        .filter(|&(fp, _, _)| fp as f64 / n <= fpr_target)
        .map(|(_, tp, _)| tp as f64 / p)
        .fold(0.0, f64::max))
}

/// Default low-FPR operating points.
pub const FPR_TARGETS: [f64; 2] = [0.1, 0.01];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub feature_set: String,
    pub level: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub accuracy: f64,
    pub auc: f64,
    /// Keyed by the FPR target rendered as a decimal string.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub roc: Vec<RocPoint>,
}

pub fn fpr_key(target: f64) -> String {
    format!("{target}")
}

pub fn metrics_report(
    set: &ScoredSet,
    feature_set: &str,
    level: &str,
    fpr_targets: &[f64],
) -> Result<MetricsReport> {
    let (roc, auc) = roc_auc(set);
    let mut tprs = BTreeMap::new();
    for &t in fpr_targets {
        tprs.insert(fpr_key(t), tpr_at_fpr(set, t)?);
    }
    Ok(MetricsReport {
        feature_set: feature_set.to_string(),
        level: level.to_string(),
        n_pos: set.n_pos(),
        n_neg: set.n_neg(),
        accuracy: accuracy(set, 0.5),
        auc,
        tpr_at_fpr: tprs,
        roc,
    })
}
