//! Confusion matrix and the derived scores: Micro-F1 (pooled counts),
//! Macro-F1 (mean of per-class F1), per-class FDR (recall) and FPR.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `L × L` counts; row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// One-vs-rest counts for a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let l = counts.len();
        if l == 0 || counts.iter().any(|r| r.len() != l) {
            return Err(Error::InvalidArgument("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(num_classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let l = self.num_classes();
        if truth >= l || predicted >= l {
            return Err(Error::InvalidArgument(format!(
                "class pair ({truth}, {predicted}) outside 0..{l}"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_counts(&self, l: usize) -> ClassCounts {
        let tp = self.counts[l][l];
        let actual: u64 = self.counts[l].iter().sum();
        let predicted: u64 = self.counts.iter().map(|r| r[l]).sum();
        let (fn_, fp) = (actual - tp, predicted - tp);
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// `TP / (TP + FN)`; 0 for a class with no samples.
    pub fn fdr(&self, l: usize) -> f64 {
        let c = self.class_counts(l);
        ratio(c.tp, c.tp + c.fn_)
    }

    /// `FP / (FP + TN)`; 0 when every sample belongs to `l`.
    pub fn fpr(&self, l: usize) -> f64 {
        let c = self.class_counts(l);
        ratio(c.fp, c.fp + c.tn)
    }

    /// `2TP / (2TP + FP + FN)`; 0 for a class never present nor predicted.
    pub fn f1(&self, l: usize) -> f64 {
        let c = self.class_counts(l);
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
    }

    /// F1 of the pooled precision and recall.
    pub fn micro_f1(&self) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for l in 0..self.num_classes() {
            let c = self.class_counts(l);
            tp += c.tp;
            fp += c.fp;
            fn_ += c.fn_;
        }
        let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Unweighted mean of per-class F1 over all `L` classes.
    pub fn macro_f1(&self) -> f64 {
        let l = self.num_classes();
        (0..l).map(|c| self.f1(c)).sum::<f64>() / l as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub support: u64,
    #[serde(rename = "FDR")]
    pub fdr: f64,
    #[serde(rename = "FPR")]
    pub fpr: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

/// Scores derived from one confusion matrix, which is kept alongside them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub avg_fdr: f64,
    pub avg_fpr: f64,
    pub per_class: Vec<ClassReport>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::InvalidArgument("cannot score an empty evaluation set".into()));
        }
        let l = confusion.num_classes();
        let per_class: Vec<ClassReport> = (0..l)
            .map(|c| ClassReport {
                class: c,
                support: confusion.counts()[c].iter().sum(),
                fdr: confusion.fdr(c),
                fpr: confusion.fpr(c),
                f1: confusion.f1(c),
            })
            .collect();
        Ok(Self {
            samples: confusion.total(),
            micro_f1: confusion.micro_f1(),
            macro_f1: confusion.macro_f1(),
            avg_fdr: per_class.iter().map(|c| c.fdr).sum::<f64>() / l as f64,
            avg_fpr: per_class.iter().map(|c| c.fpr).sum::<f64>() / l as f64,
            per_class,
            confusion,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `class,FDR,FPR`, one row per class.
    pub fn write_class_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("class,FDR,FPR\n");
        for c in &self.per_class {
            text.push_str(&format!("{},{},{}\n", c.class, c.fdr, c.fpr));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
