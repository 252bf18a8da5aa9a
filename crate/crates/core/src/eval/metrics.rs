//! Segmentation metrics: per-episode IoU and fold-level aggregation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::pipeline::{Mask, PipelineError};

/// Error raised during evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: prediction is {pred_h}x{pred_w}, ground truth {gt_h}x{gt_w}")]
    ShapeMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("invalid episode spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Foreground intersection and union pixel counts.
pub fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64), EvalError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(EvalError::ShapeMismatch {
            pred_h: pred.height(),
            pred_w: pred.width(),
            gt_h: gt.height(),
            gt_w: gt.width(),
        });
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p && g {
            intersection += 1;
        }
        if p || g {
            union += 1;
        }
    }
    Ok((intersection, union))
}

/// Foreground intersection over union. Two empty masks agree perfectly and
/// score 1.0.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    let (intersection, union) = overlap_counts(pred, gt)?;
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// Accumulates foreground pixel counts per class across a fold of episodes.
///
/// The fold score sums intersections and unions per class before dividing,
/// then averages over classes; it is not the mean of per-episode IoUs.
/// Classes whose accumulated union is zero are excluded from the average.
#[derive(Debug, Clone, Default)]
pub struct FoldAccumulator {
    per_class: BTreeMap<u32, (u64, u64)>,
    episodes: usize,
}

impl FoldAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one episode's prediction and returns that episode's own IoU.
    pub fn add_episode(&mut self, class_id: u32, pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
        let (intersection, union) = overlap_counts(pred, gt)?;
        self.add_counts(class_id, intersection, union);
        Ok(if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        })
    }

    /// Adds pre-computed counts for one episode.
    pub fn add_counts(&mut self, class_id: u32, intersection: u64, union: u64) {
        let entry = self.per_class.entry(class_id).or_insert((0, 0));
        entry.0 += intersection;
        entry.1 += union;
        self.episodes += 1;
    }

    pub fn merge(&mut self, other: &FoldAccumulator) {
        for (&class_id, &(i, u)) in &other.per_class {
            let entry = self.per_class.entry(class_id).or_insert((0, 0));
            entry.0 += i;
            entry.1 += u;
        }
        self.episodes += other.episodes;
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    /// Mean over classes of summed-intersection over summed-union. `None`
    /// when no class has any foreground in either prediction or truth.
    pub fn miou(&self) -> Option<f64> {
        let scores: Vec<f64> = self
            .per_class
            .values()
            .filter(|(_, union)| *union > 0)
            .map(|&(i, u)| i as f64 / u as f64)
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(height: usize, width: usize, fg: &[(usize, usize)]) -> Mask {
        let mut data = vec![false; height * width];
        for &(r, c) in fg {
            data[r * width + c] = true;
        }
        Mask::new(height, width, data).unwrap()
    }

    #[test]
    fn iou_counts_foreground_overlap() {
        let pred = mask_of(2, 3, &[(0, 0), (0, 1), (1, 2)]);
        let gt = mask_of(2, 3, &[(0, 1), (1, 2), (1, 0)]);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn empty_against_empty_is_perfect() {
        let a = mask_of(3, 3, &[]);
        let b = mask_of(3, 3, &[]);
        assert_eq!(iou(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn empty_against_nonempty_is_zero() {
        let a = mask_of(3, 3, &[]);
        let b = mask_of(3, 3, &[(1, 1)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&b, &a).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = mask_of(2, 2, &[]);
        let b = mask_of(2, 3, &[]);
        assert!(matches!(iou(&a, &b), Err(EvalError::ShapeMismatch { .. })));
    }

    #[test]
    fn fold_aggregation_sums_before_dividing() {
        let mut fold = FoldAccumulator::new();
        fold.add_counts(3, 1, 2);
        fold.add_counts(3, 3, 4);
        assert_eq!(fold.miou().unwrap(), 2.0 / 3.0);
        assert_ne!(fold.miou().unwrap(), 0.625);
        assert_eq!(fold.episodes(), 2);
        assert_eq!(fold.classes(), 1);
    }

    #[test]
    fn zero_union_classes_are_excluded() {
        let mut fold = FoldAccumulator::new();
        fold.add_counts(1, 0, 0);
        assert!(fold.miou().is_none());
        fold.add_counts(2, 1, 4);
        assert_eq!(fold.miou().unwrap(), 0.25);
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let mut a = FoldAccumulator::new();
        a.add_counts(1, 2, 4);
        a.add_counts(2, 1, 1);
        let mut b = FoldAccumulator::new();
        b.add_counts(1, 2, 4);
        b.add_counts(3, 0, 2);
        let mut merged = a.clone();
        merged.merge(&b);

        let mut sequential = FoldAccumulator::new();
        sequential.add_counts(1, 2, 4);
        sequential.add_counts(2, 1, 1);
        sequential.add_counts(1, 2, 4);
        sequential.add_counts(3, 0, 2);
        assert_eq!(merged.miou(), sequential.miou());
        assert_eq!(merged.episodes(), 4);
    }
}
