//! Overall accuracy, average accuracy and Cohen's kappa.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Square confusion matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_labels(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch { axis: "labels", expected: truth.len(), found: pred.len() });
        }
        let mut m = Self::new(n_classes);
        for (&p, &t) in pred.iter().zip(truth) {
            for label in [p, t] {
                if label >= n_classes {
                    return Err(Error::LabelOutOfRange { label, classes: n_classes });
                }
            }
            m.counts[t * n_classes + p] += 1;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[&[u64]]) -> Self {
        let n = rows.len();
        let mut m = Self::new(n);
        for (i, r) in rows.iter().enumerate() {
            m.counts[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks_exact(self.n_classes.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// OA / AA / Kappa for predicted vs. true class indices in `0..n_classes`.
///
/// Classes with no ground-truth samples are left out of AA (their recall is `None`).
pub fn metrics(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Empty("metrics input"));
    }
    let confusion = ConfusionMatrix::from_labels(pred, truth, n_classes)?;
    Ok(metrics_from_confusion(confusion))
}

pub fn metrics_from_confusion(confusion: ConfusionMatrix) -> Metrics {
    let n = confusion.n_classes();
    let total = confusion.total() as f64;
    let correct: u64 = (0..n).map(|c| confusion.get(c, c)).sum();
    let oa = correct as f64 / total;
    let per_class_recall: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let support = confusion.row_sum(c);
            (support > 0).then(|| confusion.get(c, c) as f64 / support as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let absent = n - present.len();
    if absent > 0 {
        log::warn!("{absent} class(es) absent from ground truth; excluded from AA");
    }
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let p_e: f64 =
        (0..n).map(|c| confusion.row_sum(c) as f64 * confusion.col_sum(c) as f64).sum::<f64>() / (total * total);
    let kappa = if (1.0 - p_e).abs() < f64::EPSILON {
        if correct as f64 == total {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - p_e) / (1.0 - p_e)
    };
    Metrics { oa, aa, kappa, per_class_recall, confusion }
}
