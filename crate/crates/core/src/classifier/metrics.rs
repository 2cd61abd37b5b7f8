//! Confusion matrix and precision / recall / F1 summaries.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    /// Each row of `confusion` divided by its sum (all zeros for empty rows).
    pub confusion_row_normalized: Vec<Vec<f64>>,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub micro_f1: f64,
    /// Unweighted mean F1 over classes with nonzero support.
    pub macro_f1: f64,
    pub macro_excluded: Vec<String>,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl EvalReport {
    /// Report from `(true, predicted)` class-index pairs.
    pub fn from_pairs<I>(classes: Vec<String>, pairs: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let k = classes.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (t, p) in pairs {
            confusion[t][p] += 1;
        }
        Self::from_confusion(classes, confusion)
    }

    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<u64>>) -> Self {
        let k = classes.len();
        assert_eq!(confusion.len(), k);
        let total: u64 = confusion.iter().flatten().sum();
        let mut per_class = Vec::with_capacity(k);
        let (mut tp_sum, mut fp_sum, mut fn_sum) = (0u64, 0u64, 0u64);
        for c in 0..k {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            tp_sum += tp;
            fp_sum += predicted - tp;
            fn_sum += support - tp;
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support,
                predicted,
            });
        }
        let micro_p = ratio(tp_sum, tp_sum + fp_sum);
        let micro_r = ratio(tp_sum, tp_sum + fn_sum);
        let supported: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let macro_f1 = if supported.is_empty() {
            0.0
        } else {
            supported.iter().map(|m| m.f1).sum::<f64>() / supported.len() as f64
        };
        let macro_excluded = classes
            .iter()
            .zip(&per_class)
            .filter(|(_, m)| m.support == 0)
            .map(|(c, _)| c.clone())
            .collect();
        let confusion_row_normalized = confusion
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&v| ratio(v, s)).collect()
            })
            .collect();
        Self {
            classes,
            accuracy: ratio(tp_sum, total),
            micro_f1: f1(micro_p, micro_r),
            macro_f1,
            macro_excluded,
            per_class,
            confusion,
            confusion_row_normalized,
            total,
        }
    }

    /// Text rendering: summary, per-class table and raw confusion matrix.
    pub fn table(&self) -> String {
        let mut out = format!(
            "lines {}  accuracy {:.4}  micro F1 {:.4}  macro F1 {:.4}\n",
            self.total, self.accuracy, self.micro_f1, self.macro_f1
        );
        if !self.macro_excluded.is_empty() {
            out.push_str(&format!(
                "macro F1 excludes zero-support classes: {}\n",
                self.macro_excluded.join(", ")
            ));
        }
        out.push_str(&format!(
            "\n{:<40} {:>9} {:>9} {:>9} {:>9}\n",
            "Class", "P", "R", "F1", "Support"
        ));
        for (c, m) in self.classes.iter().zip(&self.per_class) {
            out.push_str(&format!(
                "{:<40} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
                c, m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str("\nconfusion (rows true, columns predicted)\n");
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>7}")).collect();
            out.push_str(&format!("{i:>2} {}\n", cells.join("")));
        }
        out
    }
}
