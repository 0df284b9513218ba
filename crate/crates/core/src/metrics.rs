//! Per-class precision, recall and F1 with macro averages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows whose true label includes this class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub rows: usize,
}

/// `2pr / (p + r)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl Metrics {
    /// One-vs-rest scores from binary `rows × classes` truth and prediction
    /// matrices. A ratio with a zero denominator is reported as 0.
    pub fn from_binary(truth: &Matrix, predicted: &Matrix, class_names: &[String]) -> Result<Self> {
        if truth.shape() != predicted.shape() || truth.cols() != class_names.len() {
            return Err(Error::shape(format!(
                "truth {:?}, predictions {:?}, {} class names",
                truth.shape(),
                predicted.shape(),
                class_names.len()
            )));
        }
        if truth.rows() == 0 {
            return Err(Error::config("cannot score an empty dataset"));
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut per_class = Vec::with_capacity(class_names.len());
        for (c, name) in class_names.iter().enumerate() {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for i in 0..truth.rows() {
                match (truth[(i, c)] == 1.0, predicted[(i, c)] == 1.0) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fneg);
            per_class.push(ClassMetrics {
                class: name.clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: tp + fneg,
            });
        }
        let k = per_class.len() as f64;
        Ok(Self {
            macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
            macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
            rows: truth.rows(),
            per_class,
        })
    }

    /// Multiclass scores from class indices.
    pub fn from_labels(truth: &[usize], predicted: &[usize], class_names: &[String]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let k = class_names.len();
        if truth.iter().chain(predicted).any(|&c| c >= k) {
            return Err(Error::config(format!("label outside {k} classes")));
        }
        let one_hot = |labels: &[usize]| {
            let mut m = Matrix::zeros(labels.len(), k);
            for (i, &c) in labels.iter().enumerate() {
                m[(i, c)] = 1.0;
            }
            m
        };
        Self::from_binary(&one_hot(truth), &one_hot(predicted), class_names)
    }

    /// Table with columns `class,precision,recall,f1,support` and a final
    /// `macro` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for m in &self.per_class {
            out.push_str(&format!("{},{},{},{},{}\n", m.class, m.precision, m.recall, m.f1, m.support));
        }
        let total: usize = self.per_class.iter().map(|m| m.support).sum();
        out.push_str(&format!("macro,{},{},{},{}\n", self.macro_precision, self.macro_recall, self.macro_f1, total));
        out
    }
}
