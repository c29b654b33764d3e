//! Classification metrics. They read predictions and labels only.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    F1Macro,
    None,
}

impl MetricKind {
    pub fn compute(self, predictions: &Tensor, labels: &[usize]) -> f64 {
        match self {
            MetricKind::Accuracy => accuracy(predictions, labels),
            MetricKind::F1Macro => f1_macro(predictions, labels),
            MetricKind::None => f64::NAN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1Macro => "f1-macro",
            MetricKind::None => "none",
        }
    }
}

fn argmax_rows(predictions: &Tensor) -> Vec<usize> {
    let k = predictions.row_len();
    predictions
        .data
        .chunks(k.max(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy(predictions: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(predictions);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Unweighted mean of per-class F1 over classes that occur in the labels
/// or the predictions.
pub fn f1_macro(predictions: &Tensor, labels: &[usize]) -> f64 {
    let k = predictions.row_len();
    let pred = argmax_rows(predictions);
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    for (&p, &l) in pred.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            if l < k {
                fneg[l] += 1;
            }
        }
    }
    let scores: Vec<f64> = (0..k)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let z = logits(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [0.1, 0.2]]);
        assert_eq!(accuracy(&z, &[0, 1, 1, 1]), 0.75);
    }

    #[test]
    fn f1_by_hand() {
        // preds 0,1,0,1 vs labels 0,1,1,1: class0 tp1 fp1 fn0 → 2/3; class1 tp2 fp0 fn1 → 4/5.
        let z = logits(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [0.1, 0.2]]);
        let f1 = f1_macro(&z, &[0, 1, 1, 1]);
        assert!((f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_ignore_logit_scale() {
        let z = logits(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]);
        let mut z2 = z.clone();
        for v in &mut z2.data {
            *v = 5.0 * *v - 3.0;
        }
        assert_eq!(accuracy(&z, &[0, 0, 1]), accuracy(&z2, &[0, 0, 1]));
        assert_eq!(f1_macro(&z, &[0, 0, 1]), f1_macro(&z2, &[0, 0, 1]));
    }
}
