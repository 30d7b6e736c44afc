//! Output heads.
//!
//! The softmax head normalizes `h` directly. The weighted averaging head
//! predicts class `k` with probability
//!
//! ```text
//! P(y = k | x) = Σ_i 1[y_i = k] w(h, h_i) / Σ_i w(h, h_i),   w(h, h') = exp(−‖h − h'‖² / 2σ)
//! ```
//!
//! where the sums run over the embedded proper training set. Training uses
//! the same form inside each minibatch, leaving the scored instance out.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, DwacError, Result};
use crate::linalg::{decimal, pairwise_sq_distances, Matrix};
use crate::net::EmbeddingModel;

/// Floor applied to probabilities before taking logs in the training loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Queries scored per block in [`dwac_predict`], bounding the distance matrix.
const QUERY_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Softmax,
    Dwac,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Dwac => "dwac",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = DwacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "dwac" => Ok(HeadKind::Dwac),
            other => Err(invalid(format!("unknown head `{other}`"))),
        }
    }
}

/// Gaussian kernel on squared Euclidean distance, `exp(−d² / 2σ)`.
///
/// The bandwidth is fixed at construction and never learned; the embedding is
/// trained to fit it. With the default `σ = 1/2` the weight is `exp(−d²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    #[serde(with = "decimal")]
    sigma: f64,
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self { sigma: 0.5 }
    }
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid(format!(
                "kernel sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn weight(&self, sq_dist: f64) -> f64 {
        (-sq_dist / (2.0 * self.sigma)).exp()
    }

    /// Log-weight; used where underflow of the weight itself must be avoided.
    #[inline]
    fn log_weight(&self, sq_dist: f64) -> f64 {
        -sq_dist / (2.0 * self.sigma)
    }
}

/// Kernel weight between every query row and every reference row.
pub fn kernel_weights(
    query: &Matrix,
    reference: &Matrix,
    kernel: GaussianKernel,
) -> Result<Matrix> {
    let d2 = pairwise_sq_distances(query, reference)?;
    Ok(d2.map(|d| kernel.weight(d)))
}

/// Embeddings and labels of the proper training set: everything the weighted
/// averaging head needs at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedTrainingSet {
    embeddings: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    kernel: GaussianKernel,
}

impl EmbeddedTrainingSet {
    pub fn new(
        embeddings: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        kernel: GaussianKernel,
    ) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(shape(
                "EmbeddedTrainingSet",
                format!(
                    "{} embeddings but {} labels",
                    embeddings.rows(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            num_classes,
            kernel,
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kernel(&self) -> GaussianKernel {
        self.kernel
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn h_dim(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub probs: Vec<f64>,
    pub predicted_label: usize,
    /// Unnormalized per-class kernel mass. Only the weighted averaging head
    /// produces these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_sums: Option<Vec<f64>>,
    /// The total kernel mass underflowed and `probs` fell back to uniform.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn result_from_weight_sums(sums: Vec<f64>) -> PredictionResult {
    let total: f64 = sums.iter().sum();
    let c = sums.len();
    let (probs, degenerate) = if total > 0.0 {
        (sums.iter().map(|s| s / total).collect::<Vec<_>>(), false)
    } else {
        (vec![1.0 / c as f64; c], true)
    };
    PredictionResult {
        predicted_label: argmax(&probs),
        probs,
        weight_sums: Some(sums),
        degenerate,
    }
}

/// Weighted averaging prediction of each query embedding against the full
/// training set.
pub fn dwac_predict(query: &Matrix, train: &EmbeddedTrainingSet) -> Result<Vec<PredictionResult>> {
    if train.is_empty() {
        return Err(DwacError::Empty("embedded training set"));
    }
    if query.cols() != train.h_dim() {
        return Err(shape(
            "dwac_predict",
            format!(
                "query h-dim {} vs training h-dim {}",
                query.cols(),
                train.h_dim()
            ),
        ));
    }
    let c = train.num_classes;
    let mut out = Vec::with_capacity(query.rows());
    let mut start = 0;
    while start < query.rows() {
        let end = (start + QUERY_BLOCK).min(query.rows());
        let block = query.row_range(start, end);
        let weights = kernel_weights(&block, &train.embeddings, train.kernel)?;
        for row in weights.row_iter() {
            let mut sums = vec![0.0; c];
            for (&w, &y) in row.iter().zip(&train.labels) {
                sums[y] += w;
            }
            out.push(result_from_weight_sums(sums));
        }
        start = end;
    }
    Ok(out)
}

/// Row-wise softmax of the logits, shifted by the row maximum.
pub fn softmax_predict(logits: &Matrix) -> Result<Vec<PredictionResult>> {
    if logits.cols() == 0 {
        return Err(shape("softmax_predict", "logits have no columns"));
    }
    Ok(logits
        .row_iter()
        .map(|row| {
            let probs = softmax(row);
            PredictionResult {
                predicted_label: argmax(&probs),
                probs,
                weight_sums: None,
                degenerate: false,
            }
        })
        .collect())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_labels(op: &'static str, h: &Matrix, labels: &[usize], num_classes: usize) -> Result<()> {
    if h.rows() != labels.len() {
        return Err(shape(
            op,
            format!("{} rows but {} labels", h.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Leave-one-out log loss inside a minibatch, and its gradient with respect
/// to the batch embeddings.
///
/// Each instance `j` is scored against the other `B − 1` batch members. The
/// probability of its true class is floored at [`PROB_FLOOR`] before the log,
/// so a batch where `j` has no same-class partner costs `−ln 1e-12` and
/// contributes no gradient.
pub fn dwac_batch_loss(
    h: &Matrix,
    labels: &[usize],
    num_classes: usize,
    kernel: GaussianKernel,
) -> Result<(f64, Matrix)> {
    let b = h.rows();
    if b < 2 {
        return Err(invalid(format!(
            "leave-one-out loss needs a batch of at least 2, got {b}"
        )));
    }
    check_labels("dwac_batch_loss", h, labels, num_classes)?;

    let d2 = pairwise_sq_distances(h, h)?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    // coeff[j][i]: dL/dD_ji, the loss gradient with respect to the squared
    // distance between j and i as seen from j's leave-one-out estimate
    let mut coeff = Matrix::zeros(b, b);
    let mut normalized = vec![0.0; b];
    for j in 0..b {
        // weights relative to the nearest partner; ratios are unchanged and
        // nothing underflows to 0/0
        let logw = |i: usize| kernel.log_weight(d2.get(j, i));
        let shift = (0..b)
            .filter(|&i| i != j)
            .map(logw)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut same = 0.0;
        for i in (0..b).filter(|&i| i != j) {
            let w = (logw(i) - shift).exp();
            normalized[i] = w;
            total += w;
            if labels[i] == labels[j] {
                same += w;
            }
        }
        let p = same / total;
        if p < PROB_FLOOR {
            loss -= PROB_FLOOR.ln();
            continue;
        }
        loss -= p.ln();
        // dL/dp = −1/(B p); dp/dw_i = (1[y_i = y_j] − p) / total;
        // dw_i/dD_ji = −w_i / 2σ
        let scale = inv_b / (p * 2.0 * kernel.sigma);
        for i in (0..b).filter(|&i| i != j) {
            let indicator = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            coeff.set(j, i, scale * (indicator - p) * normalized[i] / total);
        }
    }
    loss *= inv_b;

    // D_ji = ‖h_j − h_i‖², so dD_ji/dh_j = 2(h_j − h_i) = −dD_ji/dh_i
    let dim = h.cols();
    let mut grad = Matrix::zeros(b, dim);
    for j in 0..b {
        for i in 0..b {
            let g = coeff.get(j, i);
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                let diff = 2.0 * g * (h.get(j, k) - h.get(i, k));
                grad.row_mut(j)[k] += diff;
                grad.row_mut(i)[k] -= diff;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean log loss of the softmax head, with gradient `(softmax − onehot) / B`.
pub fn softmax_batch_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let b = logits.rows();
    if b == 0 {
        return Err(DwacError::Empty("softmax batch"));
    }
    check_labels("softmax_batch_loss", logits, labels, logits.cols())?;
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.data().len());
    for (row, &y) in logits.row_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += log_z - row[y];
        for (k, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let onehot = if k == y { 1.0 } else { 0.0 };
            grad.push((p - onehot) * inv_b);
        }
    }
    Ok((loss * inv_b, Matrix::from_raw(b, logits.cols(), grad)))
}

/// A trained embedding model together with what its head needs to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    model: EmbeddingModel,
    reference: Option<EmbeddedTrainingSet>,
    num_classes: usize,
}

impl Classifier {
    pub fn softmax(model: EmbeddingModel) -> Result<Self> {
        if model.head() != HeadKind::Softmax {
            return Err(DwacError::Incompatible(
                "model was not built for the softmax head".into(),
            ));
        }
        let num_classes = model.h_dim();
        Ok(Self {
            model,
            reference: None,
            num_classes,
        })
    }

    pub fn dwac(model: EmbeddingModel, reference: EmbeddedTrainingSet) -> Result<Self> {
        if model.head() != HeadKind::Dwac {
            return Err(DwacError::Incompatible(
                "model was not built for the dwac head".into(),
            ));
        }
        if reference.is_empty() {
            return Err(DwacError::Empty("embedded training set"));
        }
        if reference.h_dim() != model.h_dim() {
            return Err(shape(
                "Classifier::dwac",
                format!(
                    "reference h-dim {} vs model h-dim {}",
                    reference.h_dim(),
                    model.h_dim()
                ),
            ));
        }
        let num_classes = reference.num_classes();
        Ok(Self {
            model,
            reference: Some(reference),
            num_classes,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn head(&self) -> HeadKind {
        self.model.head()
    }

    pub fn reference(&self) -> Option<&EmbeddedTrainingSet> {
        self.reference.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.model.embed(x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<PredictionResult>> {
        let h = self.model.embed(x)?;
        self.predict_embedded(&h)
    }

    pub fn predict_embedded(&self, h: &Matrix) -> Result<Vec<PredictionResult>> {
        match &self.reference {
            Some(reference) => dwac_predict(h, reference),
            None => softmax_predict(h),
        }
    }
}
