//! Accuracy, calibration error, credibility histograms and out-of-domain
//! protocols.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalClassifier, NonconformityMeasure};
use crate::data::Dataset;
use crate::error::{invalid, shape, DwacError, Result};
use crate::heads::{HeadKind, PredictionResult};
use crate::linalg::Matrix;
use crate::rng::{shuffle_split, SeededRng};
use crate::trainer::{fit, DataSplits, TrainConfig};

/// Pairs per bin used for calibration error unless stated otherwise.
pub const DEFAULT_PAIRS_PER_BIN: usize = 100;

/// Equal-width histogram bins on `[0, 1]` for credibility plots.
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

pub fn accuracy(predictions: &[PredictionResult], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(shape(
            "accuracy",
            format!(
                "{} predictions but {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    if predictions.is_empty() {
        return Err(DwacError::Empty("accuracy input"));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.predicted_label == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Stacks prediction probabilities into an `n × c` matrix.
pub fn probability_matrix(predictions: &[PredictionResult]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = predictions.iter().map(|p| p.probs.as_slice()).collect();
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub empirical_frequency: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMae {
    pub bins: Vec<CalibrationBin>,
    pub mae: f64,
}

impl CalibrationMae {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mean_predicted,empirical_frequency,count\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{:?},{:?},{}",
                b.mean_predicted, b.empirical_frequency, b.count
            );
        }
        out
    }
}

/// Calibration MAE over equal-count bins of pooled `(probability, is true
/// class)` pairs.
///
/// All `n × c` pairs are sorted by predicted probability and cut into bins of
/// `per_bin` consecutive pairs; the last bin absorbs the remainder. Pairs with
/// exactly equal probability are indistinguishable to the binning, so each
/// carries the mean indicator of its tie group. That keeps the result
/// independent of instance order.
pub fn calibration_mae(probs: &Matrix, labels: &[usize], per_bin: usize) -> Result<CalibrationMae> {
    if probs.rows() != labels.len() {
        return Err(shape(
            "calibration_mae",
            format!("{} rows but {} labels", probs.rows(), labels.len()),
        ));
    }
    if per_bin < 10 {
        return Err(invalid(format!(
            "bins need at least 10 pairs, got {per_bin}"
        )));
    }
    if probs.rows() == 0 {
        return Err(DwacError::Empty("calibration_mae input"));
    }
    let c = probs.cols();
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(probs.rows() * c);
    for (row, &y) in probs.row_iter().zip(labels) {
        for (k, &p) in row.iter().enumerate() {
            pairs.push((p, if k == y { 1.0 } else { 0.0 }));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 == pairs[start].0 {
            end += 1;
        }
        if end - start > 1 {
            let mean = pairs[start..end].iter().map(|p| p.1).sum::<f64>() / (end - start) as f64;
            for p in &mut pairs[start..end] {
                p.1 = mean;
            }
        }
        start = end;
    }

    let n_bins = (pairs.len() / per_bin).max(1);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let lo = b * per_bin;
        let hi = if b + 1 == n_bins {
            pairs.len()
        } else {
            lo + per_bin
        };
        let slice = &pairs[lo..hi];
        let n = slice.len() as f64;
        bins.push(CalibrationBin {
            mean_predicted: slice.iter().map(|p| p.0).sum::<f64>() / n,
            empirical_frequency: slice.iter().map(|p| p.1).sum::<f64>() / n,
            count: slice.len(),
        });
    }
    let mae = bins
        .iter()
        .map(|b| (b.mean_predicted - b.empirical_frequency).abs())
        .sum::<f64>()
        / bins.len() as f64;
    Ok(CalibrationMae { bins, mae })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins on `[0, 1]`; the last bin includes 1.
    pub fn unit(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

/// Credibility of in-domain and out-of-domain instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub head: HeadKind,
    pub measure: NonconformityMeasure,
    pub in_domain: Vec<f64>,
    pub out_of_domain: Vec<f64>,
    pub in_domain_mean: f64,
    pub out_of_domain_mean: f64,
    pub in_domain_histogram: Histogram,
    pub out_of_domain_histogram: Histogram,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl OodReport {
    pub fn new(
        head: HeadKind,
        measure: NonconformityMeasure,
        in_domain: Vec<f64>,
        out_of_domain: Vec<f64>,
    ) -> Result<Self> {
        if in_domain
            .iter()
            .chain(&out_of_domain)
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(invalid("credibility values must lie in [0, 1]"));
        }
        Ok(Self {
            head,
            measure,
            in_domain_mean: mean(&in_domain),
            out_of_domain_mean: mean(&out_of_domain),
            in_domain_histogram: Histogram::unit(&in_domain, DEFAULT_HISTOGRAM_BINS),
            out_of_domain_histogram: Histogram::unit(&out_of_domain, DEFAULT_HISTOGRAM_BINS),
            in_domain,
            out_of_domain,
        })
    }

    /// `bin_lo,bin_hi,in_domain,out_of_domain` counts per histogram bin.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,in_domain,out_of_domain\n");
        let e = &self.in_domain_histogram.edges;
        for i in 0..self.in_domain_histogram.counts.len() {
            let _ = writeln!(
                out,
                "{:?},{:?},{},{}",
                e[i],
                e[i + 1],
                self.in_domain_histogram.counts[i],
                self.out_of_domain_histogram.counts[i]
            );
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "head": self.head,
            "measure": self.measure,
            "in_domain_mean": self.in_domain_mean,
            "out_of_domain_mean": self.out_of_domain_mean,
            "in_domain_count": self.in_domain.len(),
            "out_of_domain_count": self.out_of_domain.len(),
        })
    }
}

/// Largest gap between the empirical CDF of `values` and the uniform CDF at
/// the deciles `0.1, …, 0.9`.
pub fn decile_uniformity_gap(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    (1..10)
        .map(|d| {
            let q = d as f64 / 10.0;
            let below = values.iter().filter(|&&v| v <= q).count() as f64 / n;
            (below - q).abs()
        })
        .fold(0.0, f64::max)
}

/// In-domain splits after removing one class, plus the removed instances.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub splits: DataSplits,
    pub held_out: Dataset,
    /// `dense label → original label`.
    pub class_map: Vec<usize>,
}

/// Drops `held_class`, relabels the rest densely and splits it into proper
/// training, calibration and test sets.
pub fn holdout_class_split(
    dataset: &Dataset,
    held_class: usize,
    test_fraction: f64,
    calibration_fraction: f64,
    rng: &mut SeededRng,
) -> Result<HoldoutSplit> {
    if dataset.num_classes < 3 {
        return Err(invalid("holding out a class needs at least 3 classes"));
    }
    if held_class >= dataset.num_classes || !dataset.labels.contains(&held_class) {
        return Err(invalid(format!(
            "class {held_class} does not occur in the dataset"
        )));
    }
    let class_map: Vec<usize> = (0..dataset.num_classes)
        .filter(|&k| k != held_class)
        .collect();
    let dense = |y: usize| class_map.iter().position(|&k| k == y).expect("kept class");

    let (kept_idx, held_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.labels[i] != held_class);
    let mut kept = dataset.subset(&kept_idx);
    kept.labels = kept.labels.iter().map(|&y| dense(y)).collect();
    kept.num_classes = class_map.len();
    kept.class_names = class_map
        .iter()
        .map(|&k| dataset.class_names[k].clone())
        .collect();

    let held_out = dataset.subset(&held_idx);
    let parts = shuffle_split(kept.len(), &[1.0 - test_fraction, test_fraction], rng)?;
    let pool = kept.subset(&parts[0]);
    let splits = DataSplits::from_pool(&pool, kept.subset(&parts[1]), calibration_fraction, rng)?;
    Ok(HoldoutSplit {
        splits,
        held_out,
        class_map,
    })
}

/// Credibility report for one fitted conformal classifier.
pub fn credibility_report(
    model: &ConformalClassifier,
    in_domain: &Dataset,
    foreign: &Matrix,
) -> Result<OodReport> {
    let inside = model.credibilities(&in_domain.features)?;
    let outside = model.credibilities(foreign)?;
    OodReport::new(
        model.classifier.head(),
        model.calibration.measure(),
        inside,
        outside,
    )
}

/// Trains on every class but `held_class` and reports credibility of the
/// in-domain test set against the held-out class.
pub fn ood_holdout_class(
    dataset: &Dataset,
    held_class: usize,
    head: HeadKind,
    measure: NonconformityMeasure,
    config: &TrainConfig,
) -> Result<OodReport> {
    if !measure.supports(head) {
        return Err(DwacError::Incompatible(format!(
            "measure {measure} with the {head} head"
        )));
    }
    let mut rng = SeededRng::new(config.seed).child(2);
    let split = holdout_class_split(dataset, held_class, 0.1, 0.1, &mut rng)?;
    let fitted = fit(head, &split.splits, config)?;
    let cp = ConformalClassifier::new(fitted.classifier, &split.splits.calibration, measure)?;
    credibility_report(&cp, &split.splits.test, &split.held_out.features)
}

/// Credibility of a width-matched foreign dataset against in-domain data.
pub fn ood_cross_dataset(
    model: &ConformalClassifier,
    in_domain: &Dataset,
    foreign: &Dataset,
) -> Result<OodReport> {
    if foreign.is_empty() {
        return Err(DwacError::Empty("foreign dataset"));
    }
    if foreign.dim() != model.classifier.input_dim() {
        return Err(shape(
            "ood_cross_dataset",
            format!(
                "foreign data has {} features, model expects {}",
                foreign.dim(),
                model.classifier.input_dim()
            ),
        ));
    }
    credibility_report(model, in_domain, &foreign.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, make_blobs_at};

    fn pred(probs: Vec<f64>) -> PredictionResult {
        PredictionResult {
            predicted_label: crate::heads::argmax(&probs),
            probs,
            weight_sums: None,
            degenerate: false,
        }
    }

    #[test]
    fn accuracy_cases() {
        let p = vec![pred(vec![0.9, 0.1]), pred(vec![0.2, 0.8])];
        assert_eq!(accuracy(&p, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &[1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&p, &[0]).is_err());
    }

    #[test]
    fn random_guessing_is_half() {
        let mut rng = SeededRng::new(5);
        let n = 10_000;
        let preds: Vec<_> = (0..n)
            .map(|_| pred(vec![0.5 + rng.uniform() - 0.5, 0.5]))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| (rng.uniform() < 0.5) as usize).collect();
        let acc = accuracy(&preds, &labels).unwrap();
        assert!((acc - 0.5).abs() < 0.02, "{acc}");
    }

    #[test]
    fn perfectly_calibrated_bins() {
        // 100 instances at 0.5/0.5 with alternating labels
        let probs = Matrix::new(100, 2, vec![0.5; 200]).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let r = calibration_mae(&probs, &labels, 100).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.bin_count(), 2);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 200);
    }

    #[test]
    fn confident_and_correct_is_calibrated() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut data = vec![0.0; 180];
        for (i, &y) in labels.iter().enumerate() {
            data[i * 3 + y] = 1.0;
        }
        let r = calibration_mae(&Matrix::new(60, 3, data).unwrap(), &labels, 10).unwrap();
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn constant_overconfident_prediction() {
        // 0.7 for class A on data that is half A
        let probs = Matrix::new(200, 2, [0.7, 0.3].repeat(200)).unwrap();
        let labels: Vec<usize> = (0..200).map(|i| (i < 100) as usize).collect();
        let r = calibration_mae(&probs, &labels, 100).unwrap();
        for b in &r.bins {
            assert!(((b.mean_predicted - b.empirical_frequency).abs() - 0.2).abs() < 1e-12);
        }
        assert!((r.mae - 0.2).abs() < 1e-12);
    }

    #[test]
    fn too_few_pairs_fall_back_to_one_bin() {
        let probs = Matrix::new(3, 2, vec![0.9, 0.1, 0.8, 0.2, 0.4, 0.6]).unwrap();
        let r = calibration_mae(&probs, &[0, 0, 1], 100).unwrap();
        assert_eq!(r.bin_count(), 1);
        assert_eq!(r.bins[0].count, 6);
        assert!(calibration_mae(&probs, &[0, 0, 1], 5).is_err());
    }

    #[test]
    fn mae_is_order_invariant() {
        let mut rng = SeededRng::new(6);
        let n = 500;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            // quantized to force ties
            let p = (rng.uniform() * 10.0).floor() / 10.0;
            data.extend_from_slice(&[p, 1.0 - p]);
            labels.push((rng.uniform() < p) as usize ^ 1);
        }
        let probs = Matrix::new(n, 2, data).unwrap();
        let base = calibration_mae(&probs, &labels, 100).unwrap().mae;
        let perm = rng.permutation(n);
        let shuffled = calibration_mae(
            &probs.select_rows(&perm),
            &perm.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
            100,
        )
        .unwrap()
        .mae;
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn histogram_edges_and_counts() {
        let h = Histogram::unit(&[0.0, 0.04, 0.05, 0.5, 1.0], 20);
        assert_eq!(h.edges.len(), 21);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[19], 1);
    }

    #[test]
    fn uniformity_gap() {
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(decile_uniformity_gap(&even) < 0.002);
        assert!(decile_uniformity_gap(&[0.0; 10]) > 0.8);
    }

    #[test]
    fn holdout_split_relabels_densely() {
        let data = make_blobs(400, 4, 4, 5.0, &mut SeededRng::new(1)).unwrap();
        let split = holdout_class_split(&data, 1, 0.1, 0.1, &mut SeededRng::new(2)).unwrap();
        assert_eq!(split.class_map, vec![0, 2, 3]);
        assert_eq!(split.held_out.len(), 100);
        assert_eq!(split.splits.proper_train.num_classes, 3);
        assert!(split.splits.proper_train.labels.iter().all(|&y| y < 3));
        let total = split.splits.proper_train.len()
            + split.splits.calibration.len()
            + split.splits.test.len();
        assert_eq!(total, 300);
        assert!(holdout_class_split(&data, 7, 0.1, 0.1, &mut SeededRng::new(2)).is_err());
        let two = make_blobs(40, 2, 2, 5.0, &mut SeededRng::new(1)).unwrap();
        assert!(holdout_class_split(&two, 0, 0.1, 0.1, &mut SeededRng::new(2)).is_err());
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            max_epochs: 60,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn distant_blob_gets_low_weight_sum_credibility() {
        let centers = vec![
            vec![0.0, 0.0],
            vec![6.0, 0.0],
            vec![3.0, 5.0],
            vec![30.0, 30.0],
        ];
        let data = make_blobs_at(&centers, 800, 1.0, &mut SeededRng::new(4)).unwrap();
        let r = ood_holdout_class(
            &data,
            3,
            HeadKind::Dwac,
            NonconformityMeasure::NegWeightSum,
            &quick_config(5),
        )
        .unwrap();
        assert!(r.out_of_domain_mean < 0.1, "{}", r.out_of_domain_mean);
        assert!(r.out_of_domain_mean < r.in_domain_mean);
        assert_eq!(
            r.in_domain_histogram.counts.iter().sum::<usize>(),
            r.in_domain.len()
        );
        assert!(ood_holdout_class(
            &data,
            3,
            HeadKind::Softmax,
            NonconformityMeasure::NegWeightSum,
            &quick_config(5)
        )
        .is_err());
    }

    #[test]
    fn cross_dataset_protocol() {
        let mut rng = SeededRng::new(8);
        let data = make_blobs(600, 3, 3, 6.0, &mut rng).unwrap();
        let splits = DataSplits::three_way(&data, 0.2, 0.2, &mut rng).unwrap();
        let fitted = fit(HeadKind::Dwac, &splits, &quick_config(2)).unwrap();
        let cp = ConformalClassifier::new(
            fitted.classifier,
            &splits.calibration,
            NonconformityMeasure::NegWeightSum,
        )
        .unwrap();

        let same = ood_cross_dataset(&cp, &splits.test, &splits.test).unwrap();
        assert_eq!(same.in_domain, same.out_of_domain);

        let mut shifted = splits.test.clone();
        shifted.features = shifted.features.map(|v| v + 10.0);
        let r = ood_cross_dataset(&cp, &splits.test, &shifted).unwrap();
        assert!(r.out_of_domain_mean < r.in_domain_mean);

        assert!(ood_cross_dataset(&cp, &splits.test, &splits.test.subset(&[])).is_err());
        let narrow = Dataset::new(Matrix::zeros(2, 2), vec![0, 1], 3).unwrap();
        assert!(ood_cross_dataset(&cp, &splits.test, &narrow).is_err());

        // the report's credibilities are the conformal maxima
        let preds = cp.predict(&splits.test.features, &[]).unwrap();
        for (c, p) in r.in_domain.iter().zip(&preds) {
            assert_eq!(*c, p.p_values.iter().copied().fold(0.0, f64::max));
        }
    }
}
