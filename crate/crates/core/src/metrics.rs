//! Macro-F1 and confusion counts.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_evaluated: usize,
}

pub fn macro_f1(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("classes must be >= 1".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::InvalidArgument(format!(
                "label pair ({t}, {p}) outside [0, {classes})"
            )));
        }
        confusion[t][p] += 1;
    }
    let per_class_f1: Vec<f64> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    Ok(MetricsReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / classes as f64,
        per_class_f1,
        confusion,
        n_evaluated: y_true.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect() {
        let r = macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.n_evaluated, 4);
    }

    #[test]
    fn hand_example() {
        let r = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((r.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class_f1[1] - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - 0.733333).abs() < 1e-6);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn absent_class_scores_zero() {
        let r = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(r.per_class_f1[2], 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(macro_f1(&[2], &[0], 2).is_err());
    }
}
