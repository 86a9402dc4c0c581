//! Confusion matrices and classification metrics.

use std::fmt::{self, Write as _};
use std::io::Read;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions but {truths} ground-truth labels")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("label {0:?} is not in the label list")]
    UnknownLabel(String),
    #[error("no samples")]
    Empty,
    #[error("label lists differ")]
    LabelMismatch,
    #[error("predictions file: {0}")]
    Csv(String),
}

/// Square count matrix indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.len() == labels.len() && counts.iter().all(|r| r.len() == labels.len()));
        ConfusionMatrix { labels, counts }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Cellwise sum; the label lists must match.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix, EvalError> {
        if self.labels != other.labels {
            return Err(EvalError::LabelMismatch);
        }
        let mut out = self.clone();
        for (ra, rb) in out.counts.iter_mut().zip(&other.counts) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Reorder labels: new label `i` is old label `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ConfusionMatrix {
        ConfusionMatrix {
            labels: perm.iter().map(|&p| self.labels[p].clone()).collect(),
            counts: perm
                .iter()
                .map(|&t| perm.iter().map(|&p| self.counts[t][p]).collect())
                .collect(),
        }
    }

    /// Aligned plain-text rendering, truth down the side.
    pub fn to_table(&self) -> String {
        let w = self
            .labels
            .iter()
            .map(String::len)
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(10);
        let mut s = format!("{:>w$}", "truth\\pred");
        for l in &self.labels {
            let _ = write!(s, " {l:>w$}");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            let _ = write!(s, "{l:>w$}");
            for c in row {
                let _ = write!(s, " {c:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Count `(truth, prediction)` pairs over `labels`.
pub fn confusion<S: AsRef<str>>(labels: &[S], preds: &[S], truths: &[S]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let labels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    let index = |s: &S| {
        labels
            .iter()
            .position(|l| l == s.as_ref())
            .ok_or_else(|| EvalError::UnknownLabel(s.as_ref().to_string()))
    };
    let mut cm = ConfusionMatrix::zeros(labels.clone());
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (index(p)?, index(t)?);
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub total: u64,
    pub top1_accuracy: f64,
    /// `None` where nothing was predicted as that class.
    pub per_class_precision: Vec<Option<f64>>,
    /// Mean over the defined precisions.
    pub macro_precision: f64,
    /// Sensitivity; `None` for classes absent from the ground truth.
    pub per_class_recall: Vec<Option<f64>>,
    pub undefined_precision: bool,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let precision: Vec<_> = (0..cm.len()).map(|c| ratio(cm.counts[c][c], cm.col_total(c))).collect();
    let recall = (0..cm.len()).map(|c| ratio(cm.counts[c][c], cm.row_total(c))).collect();
    let defined: Vec<f64> = precision.iter().flatten().copied().collect();
    Ok(Metrics {
        labels: cm.labels.clone(),
        total,
        top1_accuracy: cm.trace() as f64 / total as f64,
        macro_precision: defined.iter().sum::<f64>() / defined.len() as f64,
        undefined_precision: defined.len() < precision.len(),
        per_class_precision: precision,
        per_class_recall: recall,
    })
}

impl Metrics {
    pub fn to_table(&self) -> String {
        let pct = |v: &Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", v * 100.0));
        let w = self.labels.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$} {:>10} {:>10}\n", "class", "precision", "recall");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(
                s,
                "{l:<w$} {:>10} {:>10}",
                pct(&self.per_class_precision[i]),
                pct(&self.per_class_recall[i])
            );
        }
        let _ = writeln!(s, "top-1 accuracy {:.2}% over {} samples", self.top1_accuracy * 100.0, self.total);
        let _ = write!(s, "macro precision {:.2}%", self.macro_precision * 100.0);
        if self.undefined_precision {
            s.push_str(" (classes never predicted are excluded)");
        }
        s.push('\n');
        s
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[derive(Debug, Deserialize)]
struct PredRow {
    truth: String,
    pred: String,
}

/// Read a `truth,pred` CSV (with header) into `(truths, preds)`.
pub fn read_predictions(reader: impl Read) -> Result<(Vec<String>, Vec<String>), EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for row in rdr.deserialize::<PredRow>() {
        let row = row.map_err(|e| EvalError::Csv(e.to_string()))?;
        truths.push(row.truth);
        preds.push(row.pred);
    }
    Ok((truths, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let l = ["a", "b", "c"];
        let cm = confusion(&l, &["a", "c", "b", "a"], &["a", "c", "b", "a"]).unwrap();
        assert_eq!(cm.trace(), 4);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.top1_accuracy, 1.0);
        assert_eq!(m.macro_precision, 1.0);
    }

    #[test]
    fn single_off_diagonal() {
        let l = ["cardboard", "paper"];
        let cm = confusion(&l, &["cardboard"], &["paper"]).unwrap();
        assert_eq!(cm.counts, vec![vec![0, 0], vec![1, 0]]);
        let m = metrics(&cm).unwrap();
        assert!(m.undefined_precision);
        assert_eq!(m.per_class_precision[1], None);
    }

    #[test]
    fn errors() {
        let l = ["a"];
        assert!(matches!(confusion(&l, &["a"], &[]), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(confusion(&l, &["z"], &["a"]).unwrap_err(), EvalError::UnknownLabel("z".into()));
    }

    #[test]
    fn two_class_hand_values() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![vec![90, 10], vec![0, 100]]);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.per_class_recall[0], Some(0.9));
        assert_eq!(m.per_class_precision[0], Some(1.0));
    }

    #[test]
    fn predictions_csv() {
        let (t, p) = read_predictions("truth,pred\nglass,paper\nhand,hand\n".as_bytes()).unwrap();
        assert_eq!(t, ["glass", "hand"]);
        assert_eq!(p, ["paper", "hand"]);
    }

    #[test]
    fn table_mentions_every_label() {
        let cm = ConfusionMatrix::from_counts(names(3), vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 3]]);
        let t = cm.to_table();
        assert!(names(3).iter().all(|n| t.contains(n.as_str())));
        assert!(metrics(&cm).unwrap().to_table().contains("100.00%"));
    }
}
