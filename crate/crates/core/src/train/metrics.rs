use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != c) {
            return Err(Error::LengthMismatch(bad.len(), c));
        }
        Ok(Self { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.classes {
                return Err(Error::LabelOutOfRange { label: v, classes: self.classes });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|t| {
                let row = self.row(t);
                let sum: u64 = row.iter().sum();
                row.iter().map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 }).collect()
            })
            .collect()
    }

    /// CSV with a header of class names and one row per true class.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = names.join(",");
        s.push('\n');
        for t in 0..self.classes {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_normalized_csv(&self, names: &[&str]) -> String {
        let mut s = names.join(",");
        s.push('\n');
        for row in self.normalized() {
            let row: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accuracy is trace over total. Precision, recall and F1 are 0 wherever
/// their denominator is 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.classes();
    let total = cm.total();
    if c == 0 || total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut precision = Vec::with_capacity(c);
    let mut recall = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for k in 0..c {
        let tp = cm.get(k, k);
        let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
        let actual: u64 = cm.row(k).iter().sum();
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        tp_all += tp;
        fp_all += predicted - tp;
        fn_all += actual - tp;
    }
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        micro_precision: ratio(tp_all, tp_all + fp_all),
        micro_recall: ratio(tp_all, tp_all + fn_all),
        precision,
        recall,
        f1,
    })
}

impl MetricsReport {
    /// Plain-text summary with one line per class.
    pub fn summary(&self, names: &[&str]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy {:.6}", self.accuracy);
        let _ = writeln!(s, "macro_precision {:.6}", self.macro_precision);
        let _ = writeln!(s, "macro_recall {:.6}", self.macro_recall);
        let _ = writeln!(s, "macro_f1 {:.6}", self.macro_f1);
        for (i, name) in names.iter().enumerate() {
            let _ = writeln!(s, "{name} precision {:.6} recall {:.6} f1 {:.6}", self.precision[i], self.recall[i], self.f1[i]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally() {
        let cm = confusion_matrix(&[0, 1], &[1, 1], 2).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[vec![0, 0], vec![1, 1]]).unwrap());
        assert!(matches!(confusion_matrix(&[0], &[0, 1], 2), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(confusion_matrix(&[2], &[0], 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn perfect_diagonal() {
        let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.precision.iter().chain(&m.recall).chain(&m.f1).all(|&v| v == 1.0));
        assert!(cm.normalized().iter().enumerate().all(|(i, r)| r[i] == 1.0));
    }

    #[test]
    fn binary_hand_case() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 1], vec![2, 4]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        assert!((m.precision[0] - 5.0 / 7.0).abs() < 1e-12);
        assert!((m.recall[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.f1[0] - 10.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_zero() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 0], vec![0, 0]]).unwrap();
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.precision[1], m.recall[1], m.f1[1]), (0.0, 0.0, 0.0));
        assert!(matches!(compute_metrics(&ConfusionMatrix::new(3)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 2]]).unwrap();
        assert_eq!(cm.to_csv(&["a", "b"]), "a,b\n1,1\n0,2\n");
        assert_eq!(cm.to_normalized_csv(&["a", "b"]), "a,b\n0.500000,0.500000\n0.000000,1.000000\n");
    }
}
