use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnmodel::RoutingMode;
use crate::otroute::DispatchMatrix;
use crate::scalar::Scalar;
use crate::tokenizer::RegionGraph;

/// Slide-level evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_slides: usize,
    pub routing_mode: RoutingMode,
    pub loss: f64,
    pub accuracy: f64,
    /// Binary AUC of the class-1 probability; `None` when undefined.
    pub auc: Option<f64>,
    /// Quadratic-weighted kappa of the arg-max predictions.
    pub qwk: Option<f64>,
    /// Why a metric is missing.
    pub notes: Vec<String>,
    /// Mean dispatched mass per expert.
    pub mean_load: Vec<f64>,
    /// Mean fraction of graph edges joining different dominant experts.
    pub neighbor_disagreement: f64,
}

/// Mann–Whitney AUC with half credit for ties.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::invalid("auc needs binary labels"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Quadratic-weighted Cohen's kappa.
pub fn qwk(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("qwk of an empty sample"));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!(
            "class {bad} outside 0..{n_classes}"
        )));
    }
    let single = |v: &[usize]| v.iter().all(|&c| c == v[0]);
    if single(pred) && single(truth) {
        return if pred[0] == truth[0] {
            Ok(1.0)
        } else {
            Err(Error::invalid(
                "qwk undefined: a single label value on both sides",
            ))
        };
    }
    let k = n_classes;
    let mut observed = vec![0.0; k * k];
    let mut hist_p = vec![0.0; k];
    let mut hist_t = vec![0.0; k];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * k + p] += 1.0;
        hist_p[p] += 1.0;
        hist_t[t] += 1.0;
    }
    let n = pred.len() as f64;
    let denom_w = ((k.max(2) - 1) * (k.max(2) - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..k {
        for p in 0..k {
            let w = ((t as f64 - p as f64).powi(2)) / denom_w;
            num += w * observed[t * k + p];
            den += w * hist_t[t] * hist_p[p] / n;
        }
    }
    Ok(1.0 - num / den)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Fraction of undirected graph edges whose endpoints have different
/// dominant experts.
pub fn neighbor_disagreement<T: Scalar>(
    dispatch: &DispatchMatrix<T>,
    graph: &RegionGraph<T>,
) -> Result<f64> {
    if graph.n_nodes() != dispatch.gamma.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "graph has {} nodes, dispatch {} rows",
            graph.n_nodes(),
            dispatch.gamma.nrows()
        )));
    }
    let dominant = dispatch.dominant_experts();
    let edges = graph.undirected_edges();
    if edges.is_empty() {
        return Ok(0.0);
    }
    let split = edges
        .iter()
        .filter(|&&(a, b)| dominant[a] != dominant[b])
        .count();
    Ok(split as f64 / edges.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_counts_tied_pairs_as_half() {
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.5, 0.5, 0.9], &[0, 0, 1, 1]).unwrap(), 0.875);
    }

    #[test]
    fn qwk_single_value_cases() {
        assert_eq!(qwk(&[2, 2], &[2, 2], 3).unwrap(), 1.0);
        assert!(qwk(&[1, 1], &[2, 2], 3).is_err());
        assert!(qwk(&[3], &[0], 3).is_err());
    }
}
