//! Segmentation metrics: confusion matrix, per-class IoU, mean IoU.

use crate::error::{Error, Result};

/// A `k x k` confusion matrix; `counts[truth * k + prediction]`.
#[derive(Clone, Debug)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: u8, pred: u8) {
        self.counts[truth as usize * self.k + pred as usize] += 1;
    }

    pub fn add_slice(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dimension("confusion", &[truth.len()], &[pred.len()]));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        debug_assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class intersection over union; `None` when the union is empty
    /// (the class appears in neither labels nor predictions).
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.k;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fp: u64 = (0..k).filter(|&t| t != c).map(|t| self.counts[t * k + c]).sum();
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
                let union = tp + fp + fn_;
                if union == 0 {
                    None
                } else {
                    Some(tp as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes with nonempty union.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Evaluation output for one split.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub confusion: Confusion,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let miou = confusion.miou();
        let per_class = confusion.per_class_iou();
        Metrics {
            confusion,
            miou,
            per_class,
        }
    }
}
