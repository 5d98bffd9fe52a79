//! Pixel-level evaluation: confusion counts and P / R / MIoU.

use crate::error::{Result, TensorError};
use crate::NUM_CLASSES;

/// 4x4 count table; rows index ground truth, columns the prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one count per pixel pair. Idempotent across batches: the
    /// union of accumulations equals one accumulation of the union.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(TensorError::invalid(
                "confusion_accumulate",
                format!("{} predictions vs {} labels", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= NUM_CLASSES || g as usize >= NUM_CLASSES {
                return Err(TensorError::invalid(
                    "confusion_accumulate",
                    format!("label id out of range 0..{NUM_CLASSES}: pred {p}, gt {g}"),
                ));
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, for merging evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Macro-averaged precision, recall, and mean IoU.
    ///
    /// A category absent from both prediction and truth contributes 1 to
    /// each average (an absent class was segmented perfectly); a
    /// denominator that is zero for any other reason contributes 0.
    pub fn metrics(&self) -> Result<Metrics> {
        if self.total() == 0 {
            return Err(TensorError::invalid("metrics", "empty confusion matrix"));
        }
        let mut m = Metrics::default();
        for c in 0..NUM_CLASSES {
            let tp = self.counts[c][c];
            let row: u64 = self.counts[c].iter().sum();
            let col: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum();
            let fp = col - tp;
            let fn_ = row - tp;
            let absent = row == 0 && col == 0;
            let ratio = |num: u64, den: u64| {
                if absent {
                    1.0
                } else if den == 0 {
                    0.0
                } else {
                    num as f64 / den as f64
                }
            };
            m.per_class_precision[c] = ratio(tp, tp + fp);
            m.per_class_recall[c] = ratio(tp, tp + fn_);
            m.per_class_iou[c] = ratio(tp, tp + fp + fn_);
        }
        let avg = |v: &[f64; NUM_CLASSES]| v.iter().sum::<f64>() / NUM_CLASSES as f64;
        m.precision = avg(&m.per_class_precision);
        m.recall = avg(&m.per_class_recall);
        m.miou = avg(&m.per_class_iou);
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub per_class_precision: [f64; NUM_CLASSES],
    pub per_class_recall: [f64; NUM_CLASSES],
    pub per_class_iou: [f64; NUM_CLASSES],
}

impl Metrics {
    /// Machine-readable `metric <name> <value>` lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("metric precision {:.6}", self.precision),
            format!("metric recall {:.6}", self.recall),
            format!("metric miou {:.6}", self.miou),
        ];
        for c in 0..NUM_CLASSES {
            out.push(format!("metric iou_{c} {:.6}", self.per_class_iou[c]));
        }
        out
    }
}
