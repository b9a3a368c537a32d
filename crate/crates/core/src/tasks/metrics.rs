use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::pairs::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

fn check_len(predictions: &[bool], labels: &[bool]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is positive on either side.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    check_len(predictions, labels)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    check_len(predictions, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(predictions: &[bool], labels: &[bool]) -> Result<EvalReport> {
    Ok(EvalReport {
        f1: f1_score(predictions, labels)?,
        accuracy: accuracy(predictions, labels)?,
        n: labels.len(),
    })
}

/// F1 of the all-positive predictor when a fraction `q` is positive.
pub fn majority_f1(q: f64) -> f64 {
    2.0 * q / (1.0 + q)
}

/// Metrics of the constant all-positive predictor on `pairs`.
pub fn majority_baseline(pairs: &[Pair]) -> EvalReport {
    let labels: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let all = vec![true; labels.len()];
    evaluate(&all, &labels).expect("equal lengths")
}
