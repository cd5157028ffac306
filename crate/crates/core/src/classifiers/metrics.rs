use serde::{Deserialize, Serialize};

/// Binary confusion counts with "infected" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        precision(self.tp, self.fp)
    }

    pub fn recall(&self) -> f64 {
        recall(self.tp, self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.tp, self.fp, self.fn_)
    }
}

/// tp / (tp + fp); 0 when nothing was predicted positive.
pub fn precision(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// tp / (tp + fn); 0 when there are no positives.
pub fn recall(tp: usize, fn_: usize) -> f64 {
    if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = precision(tp, fp);
    let r = recall(tp, fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// F1 of each fold, in fold order; empty for a single split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_f1: Vec<f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Self {
        EvalReport {
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            confusion,
            fold_f1: Vec::new(),
        }
    }

    /// Mean of the per-fold F1 scores, or the pooled F1 without folds.
    pub fn mean_fold_f1(&self) -> f64 {
        if self.fold_f1.is_empty() {
            self.f1
        } else {
            self.fold_f1.iter().sum::<f64>() / self.fold_f1.len() as f64
        }
    }
}
