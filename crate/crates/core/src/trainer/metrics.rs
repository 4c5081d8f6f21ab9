//! Intersection over union.

use crate::tensor::IGNORE;

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class `TP / (TP + FP + FN)`; pixels whose ground truth is IGNORE are skipped.
pub fn miou(pred: &[i32], truth: &[i32], classes: usize) -> MiouReport {
    assert_eq!(pred.len(), truth.len(), "prediction and ground truth differ in size");
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == IGNORE {
            continue;
        }
        if p == t {
            tp[t as usize] += 1;
        } else {
            fn_[t as usize] += 1;
            if p != IGNORE {
                fp[p as usize] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MiouReport { per_class, mean }
}
