use serde::{Deserialize, Serialize};

use crate::protomodel::Label;

/// Binary confusion counts for one positive class. An abstention is a
/// negative prediction here.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn from_predictions(labels: &[usize], preds: &[Label], positive: usize) -> Self {
        let mut c = Confusion::default();
        for (&y, p) in labels.iter().zip(preds) {
            let said_pos = p.class() == Some(positive);
            match (y == positive, said_pos) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// True-positive rate; 0 when there are no positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Label-only classification rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    /// Positive-class F1 for two classes, macro F1 otherwise.
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub abstain_fraction: f64,
    pub confusion: Confusion,
}

/// Abstentions never count as correct.
pub fn rates(labels: &[usize], preds: &[Label], positive: usize, num_classes: usize) -> Rates {
    assert_eq!(labels.len(), preds.len(), "one prediction per label");
    let n = labels.len();
    let correct = labels
        .iter()
        .zip(preds)
        .filter(|(&y, p)| p.class() == Some(y))
        .count();
    let abstained = preds.iter().filter(|p| p.is_abstain()).count();
    let confusion = Confusion::from_predictions(labels, preds, positive);
    let f1 = if num_classes > 2 {
        (0..num_classes)
            .map(|c| Confusion::from_predictions(labels, preds, c).f1())
            .sum::<f64>()
            / num_classes as f64
    } else {
        confusion.f1()
    };
    Rates {
        accuracy: ratio(correct, n),
        f1,
        sensitivity: confusion.sensitivity(),
        specificity: confusion.specificity(),
        abstain_fraction: ratio(abstained, n),
        confusion,
    }
}
