use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Accuracy summary of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        EvalReport {
            accuracy: if truth.is_empty() {
                0.0
            } else {
                correct as f64 / truth.len() as f64
            },
            per_class_accuracy,
            confusion,
        }
    }

    pub fn confusion_text(&self) -> String {
        let mut out = String::new();
        for (c, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(
                out,
                "{c:>3} |{} | acc {:.4}",
                cells.join(""),
                self.per_class_accuracy[c]
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub eval: EvalReport,
    pub wce: f64,
    pub rr: f64,
    pub au: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_target: f64,
    pub lr_aux: f64,
    pub avg_high: f64,
    pub avg_low: f64,
    /// Labels changed at the end of this epoch.
    pub relabel_count: usize,
    /// Fraction of this epoch's changes that now match the hidden truth.
    pub relabel_precision: Option<f64>,
    /// Fraction of labels noisy at epoch start that were fixed this epoch.
    pub relabel_recall: Option<f64>,
    /// Stored-label noise rate after this epoch's corrections.
    pub noise_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
}

pub const METRICS_HEADER: &str = "epoch,accuracy,l_wce,l_rr,l_au,l_total,lambda1,lambda2,\
lr_target,lr_aux,avg_high,avg_low,relabel_count,relabel_precision,relabel_recall,\
noise_rate,per_class_accuracy,confusion";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

impl MetricsReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// One row per epoch. List-valued columns are space-separated; the
    /// confusion matrix is flattened row-major.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            let per_class: Vec<String> = m.eval.per_class_accuracy.iter().map(|v| format!("{v:?}")).collect();
            let confusion: Vec<String> = m.eval.confusion.iter().flatten().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{:?},{},{}",
                m.epoch,
                m.eval.accuracy,
                m.wce,
                m.rr,
                m.au,
                m.total,
                m.lambda1,
                m.lambda2,
                m.lr_target,
                m.lr_aux,
                m.avg_high,
                m.avg_low,
                m.relabel_count,
                opt(m.relabel_precision),
                opt(m.relabel_recall),
                m.noise_rate,
                per_class.join(" "),
                confusion.join(" "),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_trace_equals_accuracy() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0, 2];
        let r = EvalReport::from_predictions(&truth, &pred, 3);
        let trace: usize = (0..3).map(|c| r.confusion[c][c]).sum();
        assert_eq!(r.accuracy, trace as f64 / 7.0);
        let row_sums: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 2, 3]);
        assert_eq!(r.per_class_accuracy[0], 0.5);
    }
}
