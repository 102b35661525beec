//! Classification metrics: accuracy and rank-statistic AUROC with
//! average-rank tie handling; dataset evaluation in eval mode.

use crate::data::RoiTimeSeries;
use crate::error::{Error, Result};
use crate::model::Model;
use rayon::prelude::*;

/// Fraction of samples whose argmax logit matches the label; logit ties
/// resolve to the lower class index.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} score rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (row, &label) in logits.iter().zip(labels) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Binary AUROC from positive-class scores via the rank statistic,
/// averaging ranks across tied scores.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != positive.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(
            "AUROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    // Average rank over each tie group, 1-based ranks.
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = rank
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUROC over per-class probability columns. Classes
/// absent from the labels are skipped; at least one class pair must be
/// scorable.
pub fn auroc_macro(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc_binary(&scores, &pos);
    }
    let mut total = 0.0;
    let mut counted = 0;
    for k in 0..num_classes {
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let npos = pos.iter().filter(|&&p| p).count();
        if npos == 0 || npos == labels.len() {
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        total += auroc_binary(&scores, &pos)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Contract(
            "AUROC needs at least two classes present".into(),
        ));
    }
    Ok(total / counted as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auroc: f64,
    pub n: usize,
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Accuracy and AUROC of a model over labeled series (full length, no
/// cropping, dropout off).
pub fn evaluate(model: &Model<f32>, data: &[RoiTimeSeries]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation dataset".into()));
    }
    let logits: Vec<Vec<f64>> = data
        .par_iter()
        .map(|s| {
            model
                .predict(&s.values)
                .map(|row| row.iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    for (i, &l) in labels.iter().enumerate() {
        if l >= model.cfg.num_classes {
            return Err(Error::Contract(format!(
                "sample {} has label {} but the model has {} classes",
                i, l, model.cfg.num_classes
            )));
        }
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax_row(r)).collect();
    Ok(EvalReport {
        accuracy: accuracy(&logits, &labels)?,
        auroc: auroc_macro(&probs, &labels, model.cfg.num_classes)?,
        n: data.len(),
    })
}
