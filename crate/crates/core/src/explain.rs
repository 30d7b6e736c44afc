//! Instance-based explanations: training neighbors ranked by kernel weight.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DwacError, Result};
use crate::heads::{argmax, dwac_predict, kernel_weights, Classifier, EmbeddedTrainingSet};
use crate::linalg::Matrix;

/// How many neighbors an explanation lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    All,
    K(usize),
}

impl TopK {
    fn resolve(self, t: usize) -> Result<usize> {
        match self {
            TopK::All => Ok(t),
            TopK::K(0) => Err(invalid("k must be at least 1")),
            TopK::K(k) => Ok(k.min(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub index: usize,
    pub weight: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub predicted_label: usize,
    /// Descending weight; ties by ascending training index.
    pub entries: Vec<ExplanationEntry>,
    pub cumulative_weight: Vec<f64>,
    /// Smallest prefix whose class margin exceeds all kernel mass after it,
    /// or 0 if no listed prefix gets there.
    pub decisive_prefix: usize,
    /// Kernel mass of the whole training set.
    pub total_weight: f64,
}

impl Explanation {
    /// Class probabilities rebuilt from the listed entries only.
    pub fn probabilities(&self, num_classes: usize) -> Vec<f64> {
        let mut sums = vec![0.0; num_classes];
        for e in &self.entries {
            sums[e.label] += e.weight;
        }
        let total: f64 = sums.iter().sum();
        if total > 0.0 {
            sums.iter().map(|s| s / total).collect()
        } else {
            vec![1.0 / num_classes as f64; num_classes]
        }
    }

    pub fn to_json(&self, query_id: usize) -> serde_json::Value {
        serde_json::json!({
            "query_id": query_id,
            "predicted_label": self.predicted_label,
            "entries": self.entries,
            "decisive_prefix": self.decisive_prefix,
        })
    }
}

fn by_weight_desc(weights: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b))
}

/// Indices of the `k` heaviest weights in explanation order.
fn top_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    let cmp = by_weight_desc(weights);
    if k < idx.len() {
        idx.select_nth_unstable_by(k, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// `(leader, margin)` of the per-class mass seen so far.
fn leader_margin(mass: &[f64]) -> (usize, f64) {
    let lead = argmax(mass);
    let runner_up = mass
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != lead)
        .map(|(_, &m)| m)
        .fold(0.0, f64::max);
    (lead, mass[lead] - runner_up)
}

fn build(
    weights: &[f64],
    train: &EmbeddedTrainingSet,
    k: usize,
    predicted_label: usize,
    full_sums: &[f64],
) -> Explanation {
    let total_weight: f64 = full_sums.iter().sum();
    let order = top_indices(weights, k);
    let mut entries = Vec::with_capacity(order.len());
    let mut cumulative_weight = Vec::with_capacity(order.len());
    let mut mass = vec![0.0; train.num_classes()];
    let mut running = 0.0;
    let mut decisive_prefix = 0;
    for (pos, &i) in order.iter().enumerate() {
        let (w, y) = (weights[i], train.labels()[i]);
        entries.push(ExplanationEntry {
            index: i,
            weight: w,
            label: y,
        });
        running += w;
        cumulative_weight.push(running);
        mass[y] += w;
        if decisive_prefix == 0 {
            let (_, margin) = leader_margin(&mass);
            let remaining = (total_weight - running).max(0.0);
            if margin > remaining {
                decisive_prefix = pos + 1;
            }
        }
    }
    Explanation {
        predicted_label,
        entries,
        cumulative_weight,
        decisive_prefix,
        total_weight,
    }
}

fn reference(classifier: &Classifier) -> Result<&EmbeddedTrainingSet> {
    classifier
        .reference()
        .ok_or_else(|| DwacError::Incompatible("explanations need the dwac head".into()))
}

/// Explains the prediction for every row of `x`.
pub fn explain(classifier: &Classifier, x: &Matrix, k: TopK) -> Result<Vec<Explanation>> {
    let train = reference(classifier)?;
    let h = classifier.embed(x)?;
    explain_embedded(&h, train, k)
}

/// Explanations for query embeddings against an embedded training set.
pub fn explain_embedded(
    h: &Matrix,
    train: &EmbeddedTrainingSet,
    k: TopK,
) -> Result<Vec<Explanation>> {
    if train.is_empty() {
        return Err(DwacError::Empty("embedded training set"));
    }
    let k = k.resolve(train.len())?;
    let preds = dwac_predict(h, train)?;
    let mut out = Vec::with_capacity(h.rows());
    for (i, pred) in preds.iter().enumerate() {
        let w = kernel_weights(&h.row_range(i, i + 1), train.embeddings(), train.kernel())?;
        let sums = pred
            .weight_sums
            .as_deref()
            .expect("dwac predictions carry weight sums");
        out.push(build(w.data(), train, k, pred.predicted_label, sums));
    }
    Ok(out)
}

/// Fraction of rows whose argmax over the `k` nearest training instances
/// equals the full-model argmax, for each `k`.
pub fn agreement_at_k(
    classifier: &Classifier,
    x: &Matrix,
    k_list: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let train = reference(classifier)?;
    if k_list.contains(&0) {
        return Err(invalid("k values must be at least 1"));
    }
    if x.rows() == 0 {
        return Err(DwacError::Empty("agreement queries"));
    }
    let h = classifier.embed(x)?;
    let preds = dwac_predict(&h, train)?;
    let t = train.len();
    let max_k = k_list.iter().copied().max().unwrap_or(1).min(t);
    let mut agree = vec![0usize; k_list.len()];
    for (i, pred) in preds.iter().enumerate() {
        let w = kernel_weights(&h.row_range(i, i + 1), train.embeddings(), train.kernel())?;
        let order = top_indices(w.data(), max_k);
        // prefix class sums at each requested k
        let mut ks: Vec<(usize, usize)> = k_list
            .iter()
            .copied()
            .enumerate()
            .map(|(j, k)| (k, j))
            .collect();
        ks.sort_unstable();
        let mut mass = vec![0.0; train.num_classes()];
        let mut taken = 0;
        for (k, slot) in ks {
            let label = if k >= t {
                // no restriction: reuse the full sums so the answer is exact
                pred.predicted_label
            } else {
                while taken < k {
                    let idx = order[taken];
                    mass[train.labels()[idx]] += w.data()[idx];
                    taken += 1;
                }
                argmax(&mass)
            };
            if label == pred.predicted_label {
                agree[slot] += 1;
            }
        }
    }
    let n = preds.len() as f64;
    Ok(k_list
        .iter()
        .zip(agree)
        .map(|(&k, a)| (k, a as f64 / n))
        .collect())
}

/// One-row table: `dataset,k=1,k=5,…`.
pub fn agreement_csv(dataset: &str, rows: &[(usize, f64)]) -> String {
    let mut out = String::from("dataset");
    for (k, _) in rows {
        let _ = write!(out, ",k={k}");
    }
    let _ = write!(out, "\n{dataset}");
    for (_, a) in rows {
        let _ = write!(out, ",{a:?}");
    }
    out.push('\n');
    out
}
