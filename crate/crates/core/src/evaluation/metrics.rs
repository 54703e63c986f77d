use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::trajectory::BinaryLabel;

/// Image-level confusion counts; the positive class is "anomalous".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: BinaryLabel, predicted: BinaryLabel) {
        match (truth, predicted) {
            (BinaryLabel::Yes, BinaryLabel::Yes) => self.tp += 1,
            (BinaryLabel::Yes, BinaryLabel::No) => self.fn_ += 1,
            (BinaryLabel::No, BinaryLabel::No) => self.tn += 1,
            (BinaryLabel::No, BinaryLabel::Yes) => self.fp += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (BinaryLabel, BinaryLabel)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    /// Class-swapped counts (normal treated as positive).
    pub fn swapped(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fn_: self.fp,
            tn: self.tp,
            fp: self.fn_,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Result<f64, EvalError> {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    if pos == 0 || neg == 0 {
        return Err(EvalError::EmptyClass);
    }
    Ok((c.tp as f64 / pos as f64 + c.tn as f64 / neg as f64) / 2.0)
}

/// `tp / (tp + fn)`, or `None` without positives.
pub fn anomaly_recall(c: &ConfusionCounts) -> Option<f64> {
    let d = c.tp + c.fn_;
    (d > 0).then(|| c.tp as f64 / d as f64)
}

/// `2tp / (2tp + fp + fn)`, or `None` when the denominator is zero.
pub fn f1(c: &ConfusionCounts) -> Option<f64> {
    let d = 2 * c.tp + c.fp + c.fn_;
    (d > 0).then(|| 2.0 * c.tp as f64 / d as f64)
}
