use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classes::{IconClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::Prediction;

/// `(precision, recall, f1)` from raw counts; each ratio is 0 when its
/// denominator is 0.
pub fn precision_recall_f1(tp: i64, fp: i64, fn_: i64) -> Result<(f64, f64, f64)> {
    if tp < 0 || fp < 0 || fn_ < 0 {
        return Err(Error::InvalidArgument(format!("negative count in ({tp}, {fp}, {fn_})")));
    }
    let ratio = |a: i64, b: i64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    Ok((p, r, f1_score(p, r)))
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Non-interpolated average precision: items are ranked by descending score
/// (ties keep input order) and the precision at the rank of every positive
/// is averaged. `None` when there are no positives.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} truths",
            scores.len(),
            truths.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Class decided for a prediction at `threshold`: the arg-max class when its
/// score clears the threshold (first class on ties), otherwise none.
pub fn decide(pred: &Prediction, threshold: f64) -> Option<IconClass> {
    let top = pred.top_class();
    (pred.score(top) >= threshold).then_some(top)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Undefined when the class has no test images.
    pub ap: Option<f64>,
    pub n_test: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over the classes whose AP is defined.
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row labels: the ten class codes then "None" (unlabeled images).
    pub rows: Vec<String>,
    /// Column labels: the ten class codes then "None" (below threshold).
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Each non-empty column sums to 1.
    pub by_column: Vec<Vec<f64>>,
    /// Each non-empty row sums to 1.
    pub by_row: Vec<Vec<f64>>,
    pub empty_columns: Vec<String>,
    pub empty_rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<IconClass, ClassMetrics>,
    pub means: MeanMetrics,
    pub threshold: f64,
    pub n_test: usize,
    /// Auxiliary only; not meaningful under class imbalance.
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn labels() -> Vec<String> {
    IconClass::ALL
        .iter()
        .map(|c| c.code().to_string())
        .chain(std::iter::once("None".to_string()))
        .collect()
}

fn slot(c: Option<IconClass>) -> usize {
    c.map_or(N_CLASSES, IconClass::index)
}

/// Ground-truth × predicted counts over the ten classes plus None on both
/// sides, with column and row normalizations. Empty lines are listed and
/// left at zero.
pub fn confusion(preds: &[Prediction], truths: &[Option<IconClass>], threshold: f64) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let n = N_CLASSES + 1;
    let mut counts = vec![vec![0u64; n]; n];
    for (p, &t) in preds.iter().zip(truths) {
        counts[slot(t)][slot(decide(p, threshold))] += 1;
    }
    let names = labels();
    let mut by_column = vec![vec![0.0; n]; n];
    let mut empty_columns = Vec::new();
    for j in 0..n {
        let total: u64 = (0..n).map(|i| counts[i][j]).sum();
        if total == 0 {
            empty_columns.push(names[j].clone());
            continue;
        }
        for i in 0..n {
            by_column[i][j] = counts[i][j] as f64 / total as f64;
        }
    }
    let mut by_row = vec![vec![0.0; n]; n];
    let mut empty_rows = Vec::new();
    for i in 0..n {
        let total: u64 = counts[i].iter().sum();
        if total == 0 {
            empty_rows.push(names[i].clone());
            continue;
        }
        for j in 0..n {
            by_row[i][j] = counts[i][j] as f64 / total as f64;
        }
    }
    Ok(ConfusionMatrix {
        rows: names.clone(),
        columns: names,
        counts,
        by_column,
        by_row,
        empty_columns,
        empty_rows,
    })
}

/// Per-class precision, recall, F1 and AP with unweighted means. A `None`
/// truth marks an image without any of the ten classes. Items are ranked
/// in record-id order, so the report does not depend on input order.
pub fn evaluate(preds: &[Prediction], truths: &[Option<IconClass>], threshold: f64) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut items: Vec<(&Prediction, Option<IconClass>)> = preds.iter().zip(truths.iter().copied()).collect();
    items.sort_by(|a, b| a.0.record_id.cmp(&b.0.record_id));
    let sorted_preds: Vec<Prediction> = items.iter().map(|(p, _)| (*p).clone()).collect();
    let sorted_truths: Vec<Option<IconClass>> = items.iter().map(|(_, t)| *t).collect();
    let decided: Vec<Option<IconClass>> = items.iter().map(|(p, _)| decide(p, threshold)).collect();

    let mut per_class = BTreeMap::new();
    for class in IconClass::ALL {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&t, &d) in sorted_truths.iter().zip(&decided) {
            match (t == Some(class), d == Some(class)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (precision, recall, f1) = precision_recall_f1(tp as i64, fp as i64, fn_ as i64)?;
        let scores: Vec<f64> = items.iter().map(|(p, _)| p.score(class)).collect();
        let positives: Vec<bool> = sorted_truths.iter().map(|&t| t == Some(class)).collect();
        per_class.insert(
            class,
            ClassMetrics {
                precision,
                recall,
                f1,
                ap: average_precision(&scores, &positives)?,
                n_test: tp + fn_,
                tp,
                fp,
                fn_,
            },
        );
    }
    let k = N_CLASSES as f64;
    let aps: Vec<f64> = per_class.values().filter_map(|m| m.ap).collect();
    let means = MeanMetrics {
        precision: per_class.values().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.values().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.values().map(|m| m.f1).sum::<f64>() / k,
        ap: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
    };
    let correct = sorted_truths.iter().zip(&decided).filter(|(t, d)| t == d).count();
    Ok(MetricsReport {
        per_class,
        means,
        threshold,
        n_test: preds.len(),
        accuracy: correct as f64 / preds.len() as f64,
        confusion: confusion(&sorted_preds, &sorted_truths, threshold)?,
    })
}

/// Mean AP over the classes present in `truths`, ranking by each class's
/// score. `None` when `truths` is empty.
pub fn mean_average_precision(preds: &[Prediction], truths: &[IconClass]) -> Option<f64> {
    let mut aps = Vec::new();
    for class in IconClass::ALL {
        let scores: Vec<f64> = preds.iter().map(|p| p.score(class)).collect();
        let pos: Vec<bool> = truths.iter().map(|&t| t == class).collect();
        if let Ok(Some(ap)) = average_precision(&scores, &pos) {
            aps.push(ap);
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of predictions whose top-scoring class is the truth.
pub fn top1_accuracy(preds: &[Prediction], truths: &[IconClass]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(truths).filter(|(p, &t)| p.top_class() == t).count();
    hits as f64 / preds.len() as f64
}
