//! Confusion matrices and intersection-over-union.

use crate::error::{Error, Result};
use crate::tensor::ClassMask;

/// `counts[truth * classes + pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// Adds the pixels of one prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &ClassMask, truth: &ClassMask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::DimensionMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        pred.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::DimensionMismatch(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(pred: &ClassMask, truth: &ClassMask, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class IoU `tp / (row + col - tp)`; classes with empty union are left
/// out of the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c);
            let union = cm.row_sum(c) + cm.col_sum(c) - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Degenerate("no class has a non-empty union".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MiouResult { per_class, mean })
}
