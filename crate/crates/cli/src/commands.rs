use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use dwac::eval::{
    probability_matrix, Histogram, OodReport, DEFAULT_HISTOGRAM_BINS, DEFAULT_PAIRS_PER_BIN,
};
use dwac::explain::agreement_csv;
use dwac::{
    accuracy, agreement_at_k, calibrate, calibration_mae, coverage_csv, coverage_report, explain,
    fit, load_csv_with, ood_cross_dataset, ood_holdout_class, Classifier, ConformalClassifier,
    DataSplits, Dataset, HeadKind, ModelArtifact, NonconformityMeasure, TopK,
};

use crate::config::RunConfig;
use crate::output::Output;

/// Every (head, measure) pair the run asks for, split into usable ones and
/// ones the head cannot score.
fn combos(
    cfg: &RunConfig,
    heads: &[HeadKind],
) -> (Vec<(HeadKind, NonconformityMeasure)>, Vec<Value>) {
    let mut usable = Vec::new();
    let mut skipped = Vec::new();
    for &head in heads {
        for measure in cfg.measure.measures() {
            if measure.supports(head) {
                usable.push((head, measure));
            } else {
                skipped.push(json!({
                    "head": head,
                    "measure": measure,
                    "reason": format!("the {head} head has no kernel weight sums"),
                }));
            }
        }
    }
    (usable, skipped)
}

/// Trains each head at most once per command.
#[derive(Default)]
struct Fitted(Vec<(HeadKind, Classifier)>);

impl Fitted {
    fn get(
        &mut self,
        head: HeadKind,
        splits: &DataSplits,
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<Classifier> {
        if let Some((_, c)) = self.0.iter().find(|(h, _)| *h == head) {
            return Ok(c.clone());
        }
        let classifier = fit(head, splits, &cfg.train.with_seed(seed))?.classifier;
        self.0.push((head, classifier.clone()));
        Ok(classifier)
    }
}

fn artifact_for(
    classifier: &Classifier,
    splits: &DataSplits,
    out: &Output,
) -> Result<ModelArtifact> {
    let mut artifact = ModelArtifact::from_classifier(classifier);
    for measure in NonconformityMeasure::ALL {
        if measure.supports(classifier.head()) {
            artifact =
                artifact.with_calibration(calibrate(classifier, &splits.calibration, measure)?);
        }
    }
    artifact
        .preprocessor
        .clone_from(&splits.proper_train.preprocessor);
    artifact
        .class_names
        .clone_from(&splits.proper_train.class_names);
    artifact.provenance = out.provenance().clone();
    Ok(artifact)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let out = Output::new(out_dir, "train", cfg)?;
    let heads = cfg.head.heads();
    let mut trials = String::from("trial,seed,head,accuracy,calibration_mae,best_epoch,epochs\n");
    let mut scores: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); heads.len()];
    for trial in 0..cfg.trials {
        let seed = cfg.trial_seed(trial);
        let splits = cfg.splits(seed)?;
        for (slot, &head) in heads.iter().enumerate() {
            let fitted = fit(head, &splits, &cfg.train.with_seed(seed))?;
            let preds = fitted.classifier.predict(&splits.test.features)?;
            let acc = accuracy(&preds, &splits.test.labels)?;
            let mae = calibration_mae(
                &probability_matrix(&preds)?,
                &splits.test.labels,
                DEFAULT_PAIRS_PER_BIN,
            )?
            .mae;
            scores[slot].0.push(acc);
            scores[slot].1.push(mae);
            let best = fitted
                .history
                .best_epoch
                .map_or(String::new(), |e| e.to_string());
            writeln!(
                trials,
                "{trial},{seed},{head},{acc:?},{mae:?},{best},{}",
                fitted.history.epochs.len()
            )?;

            artifact_for(&fitted.classifier, &splits, &out)?
                .save(out.path(&format!("model_{head}_trial{trial}.json")))?;
            out.csv(
                &format!("history_{head}_trial{trial}.csv"),
                &fitted.history.to_csv(),
            )?;
            println!("trial {trial} {head}: accuracy {acc:.4}, calibration MAE {mae:.4}");
        }
    }
    let mut summary = String::from("head,trials,accuracy_mean,accuracy_std,mae_mean,mae_std\n");
    for (head, (accs, maes)) in heads.iter().zip(&scores) {
        let (am, asd) = mean_std(accs);
        let (mm, msd) = mean_std(maes);
        writeln!(
            summary,
            "{head},{},{am:?},{asd:?},{mm:?},{msd:?}",
            accs.len()
        )?;
    }
    out.csv("trials.csv", &trials)?;
    let path = out.csv("summary.csv", &summary)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model(model: Option<&Path>) -> Result<ModelArtifact> {
    let path = model.context("this command needs --model")?;
    ModelArtifact::load(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn predict(cfg: &RunConfig, model: Option<&Path>, out_dir: &Path) -> Result<()> {
    let out = Output::new(out_dir, "predict", cfg)?;
    let artifact = load_model(model)?;
    let classifier = artifact.to_classifier()?;
    let data = cfg.dataset_for(artifact.preprocessor.as_ref())?;
    let preds = classifier.predict(&data.features)?;
    let c = classifier.num_classes();
    let mut body = String::from("row,label,predicted_label");
    for k in 0..c {
        write!(body, ",prob_{k}")?;
    }
    body.push('\n');
    for (i, (p, y)) in preds.iter().zip(&data.labels).enumerate() {
        write!(body, "{i},{y},{}", p.predicted_label)?;
        for v in &p.probs {
            write!(body, ",{v:?}")?;
        }
        body.push('\n');
    }
    let path = out.csv("predictions.csv", &body)?;
    println!(
        "accuracy {:.4} on {} rows; wrote {}",
        accuracy(&preds, &data.labels)?,
        data.len(),
        path.display()
    );
    Ok(())
}

pub fn explain_cmd(cfg: &RunConfig, model: Option<&Path>, out_dir: &Path) -> Result<()> {
    let out = Output::new(out_dir, "explain", cfg)?;
    let artifact = load_model(model)?;
    if artifact.head != HeadKind::Dwac {
        bail!("explanations need a model with the dwac head");
    }
    let classifier = artifact.to_classifier()?;
    let data = cfg.dataset_for(artifact.preprocessor.as_ref())?;
    let explanations = explain(&classifier, &data.features, TopK::K(cfg.top_k))?;
    let listed: Vec<Value> = explanations
        .iter()
        .enumerate()
        .map(|(i, e)| e.to_json(i))
        .collect();
    out.json(
        "explanations.json",
        json!({ "top_k": cfg.top_k, "explanations": listed }),
    )?;
    let agreement = agreement_at_k(&classifier, &data.features, &cfg.k_list)?;
    let path = out.csv(
        "agreement.csv",
        &agreement_csv(&cfg.data.name(), &agreement),
    )?;
    for (k, a) in &agreement {
        println!("agreement at k={k}: {a:.4}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn histogram_csv(h: &Histogram) -> String {
    let mut body = String::from("bin_lo,bin_hi,count\n");
    for (i, count) in h.counts.iter().enumerate() {
        let _ = writeln!(body, "{:?},{:?},{count}", h.edges[i], h.edges[i + 1]);
    }
    body
}

fn conformal_outputs(
    out: &Output,
    cp: &ConformalClassifier,
    test: &Dataset,
    epsilons: &[f64],
) -> Result<Value> {
    let head = cp.classifier.head();
    let measure = cp.calibration.measure();
    let preds = cp.predict(&test.features, epsilons)?;
    let rows = coverage_report(&preds, &test.labels, epsilons)?;
    out.csv(
        &format!("coverage_{head}_{measure}.csv"),
        &coverage_csv(&rows),
    )?;
    let credibility: Vec<f64> = preds.iter().map(|p| p.credibility()).collect();
    let confidence: Vec<f64> = preds.iter().map(|p| p.confidence()).collect();
    out.csv(
        &format!("credibility_{head}_{measure}.csv"),
        &histogram_csv(&Histogram::unit(&credibility, DEFAULT_HISTOGRAM_BINS)),
    )?;
    let n = preds.len() as f64;
    println!(
        "{head}/{measure}: mean credibility {:.4}, mean confidence {:.4}",
        credibility.iter().sum::<f64>() / n,
        confidence.iter().sum::<f64>() / n
    );
    Ok(json!({
        "head": head,
        "measure": measure,
        "test_size": preds.len(),
        "mean_credibility": credibility.iter().sum::<f64>() / n,
        "mean_confidence": confidence.iter().sum::<f64>() / n,
        "coverage": rows,
    }))
}

pub fn conformal(cfg: &RunConfig, model: Option<&Path>, out_dir: &Path) -> Result<()> {
    let out = Output::new(out_dir, "conformal", cfg)?;
    let mut results = Vec::new();
    let skipped;
    if model.is_some() {
        let artifact = load_model(model)?;
        let test = cfg.dataset_for(artifact.preprocessor.as_ref())?;
        let (usable, skip) = combos(cfg, &[artifact.head]);
        skipped = skip;
        for (_, measure) in usable {
            results.push(conformal_outputs(
                &out,
                &artifact.to_conformal(measure)?,
                &test,
                &cfg.epsilon_grid,
            )?);
        }
    } else {
        let seed = cfg.trial_seed(0);
        let splits = cfg.splits(seed)?;
        let (usable, skip) = combos(cfg, &cfg.head.heads());
        skipped = skip;
        let mut fitted = Fitted::default();
        for (head, measure) in usable {
            let classifier = fitted.get(head, &splits, cfg, seed)?;
            let cp = ConformalClassifier::new(classifier, &splits.calibration, measure)?;
            results.push(conformal_outputs(
                &out,
                &cp,
                &splits.test,
                &cfg.epsilon_grid,
            )?);
        }
    }
    for s in &skipped {
        println!(
            "skipped {}/{}: {}",
            s["head"].as_str().unwrap_or(""),
            s["measure"].as_str().unwrap_or(""),
            s["reason"].as_str().unwrap_or("")
        );
    }
    let path = out.json(
        "conformal_summary.json",
        json!({ "results": results, "skipped": skipped }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_report(out: &Output, report: &OodReport) -> Result<Value> {
    out.csv(
        &format!("ood_{}_{}.csv", report.head, report.measure),
        &report.histogram_csv(),
    )?;
    println!(
        "{}/{}: mean credibility in-domain {:.4}, out-of-domain {:.4}",
        report.head, report.measure, report.in_domain_mean, report.out_of_domain_mean
    );
    Ok(report.summary_json())
}

pub fn ood(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let out = Output::new(out_dir, "ood", cfg)?;
    let (usable, skipped) = combos(cfg, &cfg.head.heads());
    let seed = cfg.trial_seed(0);
    let mut reports = Vec::new();
    let protocol = match (&cfg.ood.held_class, &cfg.ood.foreign) {
        (Some(held), None) => {
            let data = cfg.full_dataset()?;
            for &(head, measure) in &usable {
                let report =
                    ood_holdout_class(&data, *held, head, measure, &cfg.train.with_seed(seed))?;
                reports.push(write_report(&out, &report)?);
            }
            json!({ "kind": "held_out_class", "held_class": held })
        }
        (None, Some(foreign)) => {
            let splits = cfg.splits(seed)?;
            let pre = splits
                .proper_train
                .preprocessor
                .as_ref()
                .context("the cross-dataset protocol needs CSV data with a schema")?;
            let foreign_ds = load_csv_with(foreign, pre)
                .with_context(|| format!("loading foreign data {}", foreign.display()))?;
            let mut fitted = Fitted::default();
            for &(head, measure) in &usable {
                let classifier = fitted.get(head, &splits, cfg, seed)?;
                let cp = ConformalClassifier::new(classifier, &splits.calibration, measure)?;
                let report = ood_cross_dataset(&cp, &splits.test, &foreign_ds)?;
                reports.push(write_report(&out, &report)?);
            }
            json!({ "kind": "cross_dataset", "foreign": foreign })
        }
        (Some(_), Some(_)) => bail!("give either --held-class or --foreign, not both"),
        (None, None) => bail!("the ood command needs --held-class or --foreign"),
    };
    let path = out.json(
        "ood_summary.json",
        json!({ "protocol": protocol, "results": reports, "skipped": skipped }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
