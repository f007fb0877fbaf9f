//! Evaluation metrics: assignment-based clustering accuracy, forgetting
//! and discovery summaries, and Recall@K over the embedding space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::cosine_sim;
use crate::par;
use crate::{Error, Result};

/// Accuracy triple for one continual step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub m_all: f64,
    pub m_old: f64,
    pub m_new: f64,
    pub estimated_category_count: usize,
}

/// Whole-run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    /// Old-class accuracy before any continual step.
    pub initial_accuracy: f64,
    pub steps: Vec<StepMetrics>,
    /// Worst drop of old-class accuracy relative to the initial stage.
    pub m_f: f64,
    /// Mean new-class accuracy over the continual steps.
    pub m_d: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
}

fn relabel(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let dense: Vec<usize> = ids
        .iter()
        .map(|&id| {
            let next = map.len();
            *map.entry(id).or_insert(next)
        })
        .collect();
    let count = map.len();
    (dense, count)
}

/// Kuhn-Munkres on an n x n cost matrix (minimization), O(n^3) potentials
/// formulation. Returns for each row the assigned column.
fn kuhn_munkres_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; column 0 is the virtual root
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // row matched to column, 0 = free

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// The optimal one-to-one matching between predicted ids and truth ids.
///
/// Returns a map from predicted id to truth id maximizing total agreement.
/// Predicted ids matched only to zero-padded columns are absent from the
/// map (they contribute no correct samples).
pub fn hungarian_assignment(
    predicted: &[usize],
    truth: &[usize],
) -> Result<BTreeMap<usize, usize>> {
    if predicted.is_empty() || truth.is_empty() {
        return Err(Error::EmptyInput("hungarian_assignment".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "hungarian_assignment: {} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let (pred_dense, np) = relabel(predicted);
    let (truth_dense, nt) = relabel(truth);
    let n = np.max(nt);
    let mut agree = vec![vec![0usize; n]; n];
    for (&p, &t) in pred_dense.iter().zip(&truth_dense) {
        agree[p][t] += 1;
    }
    let max_agree = agree.iter().flatten().copied().max().unwrap_or(0) as f64;
    let cost: Vec<Vec<f64>> = agree
        .iter()
        .map(|row| row.iter().map(|&a| max_agree - a as f64).collect())
        .collect();
    let assignment = kuhn_munkres_min(&cost);

    // invert the dense relabelings
    let mut pred_orig = vec![0usize; np];
    for (&orig, &dense) in predicted.iter().zip(&pred_dense) {
        pred_orig[dense] = orig;
    }
    let mut truth_orig = vec![0usize; nt];
    for (&orig, &dense) in truth.iter().zip(&truth_dense) {
        truth_orig[dense] = orig;
    }

    let mut map = BTreeMap::new();
    for (p, &t) in assignment.iter().enumerate() {
        if p < np && t < nt {
            map.insert(pred_orig[p], truth_orig[t]);
        }
    }
    Ok(map)
}

/// Fraction of samples whose mapped prediction matches the truth.
pub fn accuracy_under(
    assignment: &BTreeMap<usize, usize>,
    predicted: &[usize],
    truth: &[usize],
) -> Result<f64> {
    accuracy_under_subset(assignment, predicted, truth, None)
}

/// Same as [`accuracy_under`], restricted to the given sample indices.
pub fn accuracy_under_subset(
    assignment: &BTreeMap<usize, usize>,
    predicted: &[usize],
    truth: &[usize],
    subset: Option<&[usize]>,
) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "accuracy_under: {} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let indices: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..predicted.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::EmptyInput(
            "accuracy_under: empty evaluation subset".into(),
        ));
    }
    let correct = indices
        .iter()
        .filter(|&&i| assignment.get(&predicted[i]) == Some(&truth[i]))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Optimal-assignment clustering accuracy.
pub fn hungarian_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let assignment = hungarian_assignment(predicted, truth)?;
    accuracy_under(&assignment, predicted, truth)
}

/// Worst old-class accuracy drop. The first history entry is the initial
/// accuracy; with no later entries the result is 0.
pub fn forgetting(m_old_history: &[f64]) -> Result<f64> {
    let Some((&first, rest)) = m_old_history.split_first() else {
        return Err(Error::EmptyInput("forgetting".into()));
    };
    if rest.is_empty() {
        return Ok(0.0);
    }
    Ok(rest
        .iter()
        .map(|&m| first - m)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean new-class accuracy over the continual steps.
pub fn discovery(m_new_history: &[f64]) -> Result<f64> {
    if m_new_history.is_empty() {
        return Err(Error::EmptyInput("discovery".into()));
    }
    Ok(m_new_history.iter().sum::<f64>() / m_new_history.len() as f64)
}

/// Recall@K: for each sample, success if any of its K nearest neighbors
/// by cosine distance (self excluded) shares its label.
pub fn recall_at_k(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::EmptyInput(
            "recall_at_k: need at least 2 samples".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "recall_at_k: {n} embeddings vs {} labels",
            labels.len()
        )));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::InvalidConfig(format!(
                "recall_at_k: K = {k} invalid for {n} samples"
            )));
        }
    }

    // neighbor labels per query, sorted by descending similarity
    let neighbor_labels: Vec<Vec<usize>> = par::map_range(n, |i| {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine_sim(&embeddings[i], &embeddings[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        sims.into_iter().map(|(_, j)| labels[j]).collect()
    });

    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = neighbor_labels
            .iter()
            .enumerate()
            .filter(|(i, nb)| nb[..k].contains(&labels[*i]))
            .count();
        out.insert(k, hits as f64 / n as f64);
    }
    Ok(out)
}
