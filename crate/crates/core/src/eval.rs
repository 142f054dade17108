//! Confusion matrices and macro-averaged classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True instances of the class.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::shape(format!("class index {} outside 0..{classes}", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 (undefined ratios count as 0) and their
/// unweighted means.
pub fn macro_metrics(confusion: &[Vec<u64>]) -> Result<MetricsReport> {
    let c = confusion.len();
    if c == 0 {
        return Err(Error::shape("empty confusion matrix"));
    }
    if confusion.iter().any(|r| r.len() != c) {
        return Err(Error::shape("confusion matrix must be square"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = confusion[k][k];
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(MetricsReport {
        accuracy: ratio(trace, total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: confusion.to_vec(),
    })
}

/// Metrics straight from predictions and labels.
pub fn evaluate(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    macro_metrics(&confusion_matrix(pred, truth, classes)?)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned per-class table followed by macro and accuracy rows.
    pub fn to_text(&self, class_names: Option<&[String]>) -> String {
        let names: Vec<String> = (0..self.per_class.len())
            .map(|k| match class_names.and_then(|n| n.get(k)) {
                Some(name) => name.clone(),
                None => format!("class {k}"),
            })
            .collect();
        let width = names.iter().map(String::len).max().unwrap_or(0).max("accuracy".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}", "", "precision", "recall", "f1", "support");
        for (name, m) in names.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        let total: u64 = self.per_class.iter().map(|m| m.support).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1, total
        );
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>9.4}  {:>8}", "accuracy", "", "", self.accuracy, total);
        out
    }
}
