//! Binary classification metrics at a fixed 0.5 threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auroc: f64,
    pub kappa: f64,
}

fn check(y_true: &[usize], y_score: &[f64]) -> Result<()> {
    if y_true.len() != y_score.len() {
        return Err(Error::Dimension(format!("{} labels vs {} scores", y_true.len(), y_score.len())));
    }
    if y_true.iter().any(|&y| y > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if let Some(s) = y_score.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Data(format!("score {s} outside [0,1]")));
    }
    Ok(())
}

pub fn predictions(y_score: &[f64]) -> Vec<usize> {
    y_score.iter().map(|&s| usize::from(s >= THRESHOLD)).collect()
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    hits as f64 / y_true.len() as f64
}

/// Cohen's kappa from the 2×2 confusion matrix, in integer counts so that
/// chance-level predictions give exactly zero.
pub fn kappa(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let mut c = [[0i64; 2]; 2];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        c[t.min(1)][p.min(1)] += 1;
    }
    let num = 2 * (c[1][1] * c[0][0] - c[0][1] * c[1][0]);
    let den = (c[1][1] + c[0][1]) * (c[0][1] + c[0][0]) + (c[1][1] + c[1][0]) * (c[1][0] + c[0][0]);
    if den == 0 {
        return if c[0][1] + c[1][0] == 0 { 1.0 } else { 0.0 };
    }
    num as f64 / den as f64
}

/// Mann-Whitney statistic with midranks; tied (positive, negative) pairs
/// count one half.
pub fn auroc(y_true: &[usize], y_score: &[f64]) -> Result<f64> {
    check(y_true, y_score)?;
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUROC undefined: only one class present".into()));
    }
    let mut order: Vec<usize> = (0..y_score.len()).collect();
    order.sort_by(|&a, &b| y_score[a].total_cmp(&y_score[b]));
    // Ranks are kept doubled so that midranks stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && y_score[order[j + 1]] == y_score[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&k| y_true[k] == 1).count() as u64;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn metrics(y_true: &[usize], y_score: &[f64]) -> Result<Metrics> {
    let auroc = auroc(y_true, y_score)?;
    let pred = predictions(y_score);
    Ok(Metrics { acc: accuracy(y_true, &pred), auroc, kappa: kappa(y_true, &pred) })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
