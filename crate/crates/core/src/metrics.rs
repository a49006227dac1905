//! Selection quality (mislabel detection) and dataset quality (agreement
//! with ground truth).
//!
//! Pixels whose ground truth is the ignore label never count. mIoU averages
//! over classes present in either map.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{pixel_index, ClassId, LabelMap, PixelRef};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label maps disagree: {0}")]
    ImageMismatch(String),
}

fn check_aligned(a: &LabelMap, b: &LabelMap) -> Result<(), MetricsError> {
    if a.image_id != b.image_id || a.width != b.width || a.height != b.height {
        return Err(MetricsError::ImageMismatch(format!(
            "{} ({}x{}) vs {} ({}x{})",
            a.image_id, a.width, a.height, b.image_id, b.width, b.height
        )));
    }
    Ok(())
}

/// Raw counts; merge these across images before deriving ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub selected: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
}

impl DetectionCounts {
    pub fn merge(&mut self, other: &Self) {
        self.selected += other.selected;
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    pub fn report(&self) -> DetectionReport {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.true_positives, self.true_positives + self.false_positives);
        let recall = ratio(self.true_positives, self.true_positives + self.false_negatives);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionReport {
            selected: self.selected,
            true_positives: self.true_positives,
            false_positives: self.false_positives,
            false_negatives: self.false_negatives,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub selected: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A selected pixel is a true positive iff its pseudo label differs from the
/// ground truth. Duplicates count once; ignore pixels are dropped.
pub fn detection_counts(
    selected: &[PixelRef],
    pseudo: &LabelMap,
    gt: &LabelMap,
    ignore: Option<ClassId>,
) -> Result<DetectionCounts, MetricsError> {
    check_aligned(pseudo, gt)?;
    let mut chosen = BTreeSet::new();
    for p in selected {
        if p.image_id != gt.image_id {
            return Err(MetricsError::ImageMismatch(format!(
                "selected pixel from {} for image {}",
                p.image_id, gt.image_id
            )));
        }
        let idx = pixel_index(p.x, p.y, gt.width, gt.height).map_err(|e| MetricsError::ImageMismatch(e.to_string()))?;
        chosen.insert(idx);
    }
    Ok(detection_counts_mask(&chosen, pseudo, gt, ignore))
}

pub(crate) fn detection_counts_mask(
    chosen: &BTreeSet<usize>,
    pseudo: &LabelMap,
    gt: &LabelMap,
    ignore: Option<ClassId>,
) -> DetectionCounts {
    let mut counts = DetectionCounts::default();
    for i in 0..gt.len() {
        let (p, g) = (pseudo.get(i), gt.get(i));
        if Some(g) == ignore || Some(p) == ignore {
            continue;
        }
        let mislabeled = p != g;
        match (chosen.contains(&i), mislabeled) {
            (true, true) => counts.true_positives += 1,
            (true, false) => counts.false_positives += 1,
            (false, true) => counts.false_negatives += 1,
            (false, false) => {}
        }
    }
    counts.selected = counts.true_positives + counts.false_positives;
    counts
}

pub fn detection_report(
    selected: &[PixelRef],
    pseudo: &LabelMap,
    gt: &LabelMap,
    ignore: Option<ClassId>,
) -> Result<DetectionReport, MetricsError> {
    Ok(detection_counts(selected, pseudo, gt, ignore)?.report())
}

/// `num_classes x num_classes` counts, indexed `[pred][gt]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    cells: Vec<u64>,
    /// Valid-gt pixels whose prediction is ignore or out of range.
    unpredicted: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            cells: vec![0; num_classes * num_classes],
            unpredicted: vec![0; num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: Option<ClassId>) -> Result<(), MetricsError> {
        check_aligned(pred, gt)?;
        let c = self.num_classes;
        for i in 0..gt.len() {
            let g = gt.get(i);
            if Some(g) == ignore || g.index() >= c {
                continue;
            }
            let p = pred.get(i);
            if Some(p) == ignore || p.index() >= c {
                self.unpredicted[g.index()] += 1;
            } else {
                self.cells[p.index() * c + g.index()] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IoUReport {
        let c = self.num_classes;
        let mut per_class_iou = BTreeMap::new();
        let mut correct = 0u64;
        let mut total = 0u64;
        for k in 0..c {
            let tp = self.cells[k * c + k];
            let pred_k: u64 = (0..c).map(|g| self.cells[k * c + g]).sum();
            let gt_k: u64 = (0..c).map(|p| self.cells[p * c + k]).sum::<u64>() + self.unpredicted[k];
            correct += tp;
            total += gt_k;
            let union = pred_k + gt_k - tp;
            if union > 0 {
                per_class_iou.insert(k as u16, tp as f64 / union as f64);
            }
        }
        let mean_iou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        IoUReport {
            per_class_iou,
            mean_iou,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// Classes absent from both maps have no entry.
    pub per_class_iou: BTreeMap<u16, f64>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

pub fn iou_report(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore: Option<ClassId>,
) -> Result<IoUReport, MetricsError> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm.report())
}

/// Count of corrections per target class.
pub fn corrected_class_histogram<'a>(corrections: impl IntoIterator<Item = &'a Option<u16>>) -> BTreeMap<u16, u64> {
    let mut hist = BTreeMap::new();
    for c in corrections.into_iter().flatten() {
        *hist.entry(*c).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelRole;
    use proptest::prelude::*;

    fn map(w: u32, data: Vec<u16>) -> LabelMap {
        let h = data.len() as u32 / w;
        LabelMap::new("img", LabelRole::Pseudo, w, h, data).unwrap()
    }

    fn px(i: u32, w: u32) -> PixelRef {
        PixelRef {
            image_id: "img".into(),
            x: i % w,
            y: i / w,
        }
    }

    #[test]
    fn detection_counting_example() {
        // 10 pixels, mislabeled at 0..5; select 0, 1, 7, 8
        let gt = map(10, vec![1; 10]);
        let pseudo = map(10, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let sel: Vec<_> = [0, 1, 7, 8].iter().map(|&i| px(i, 10)).collect();
        let r = detection_report(&sel, &pseudo, &gt, None).unwrap();
        assert_eq!(r.selected, 4);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.4);

        let all: Vec<_> = (0..5).map(|i| px(i, 10)).collect();
        let r = detection_report(&all, &pseudo, &gt, None).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let r = detection_report(&[], &pseudo, &gt, None).unwrap();
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }

    #[test]
    fn detection_rejects_mismatch() {
        let gt = map(2, vec![0, 0]);
        let other = LabelMap::new("other", LabelRole::Pseudo, 2, 1, vec![0, 0]).unwrap();
        assert!(detection_report(&[], &other, &gt, None).is_err());
        let stray = PixelRef {
            image_id: "other".into(),
            x: 0,
            y: 0,
        };
        assert!(detection_report(&[stray], &gt, &gt, None).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = map(2, vec![0, 1, 2, 1]);
        let r = iou_report(&a, &a, 3, None).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.pixel_accuracy, 1.0);

        let r = iou_report(&map(2, vec![0; 4]), &map(2, vec![1; 4]), 2, None).unwrap();
        assert_eq!(r.per_class_iou, BTreeMap::from([(0, 0.0), (1, 0.0)]));
        assert_eq!(r.mean_iou, 0.0);

        let r = iou_report(&a, &map(2, vec![0; 4]), 2, None);
        assert!(r.is_ok());
        assert!(iou_report(&a, &map(4, vec![0; 4]), 2, None).is_err());
    }

    #[test]
    fn ignore_positions_do_not_count() {
        let gt = map(4, vec![0, 1, 9, 9]);
        let r1 = iou_report(&map(4, vec![0, 1, 0, 1]), &gt, 2, Some(ClassId(9))).unwrap();
        let r2 = iou_report(&map(4, vec![0, 1, 1, 0]), &gt, 2, Some(ClassId(9))).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.mean_iou, 1.0);
    }

    #[test]
    fn histogram_examples() {
        let h = corrected_class_histogram(&[Some(1), Some(1), None, Some(2)]);
        assert_eq!(h, BTreeMap::from([(1, 2), (2, 1)]));
        assert!(corrected_class_histogram(&[None, None]).is_empty());
    }

    proptest! {
        #[test]
        fn self_iou_is_one(data in prop::collection::vec(0u16..4, 1..64)) {
            let a = map(1, data);
            prop_assert_eq!(iou_report(&a, &a, 4, None).unwrap().mean_iou, 1.0);
        }

        #[test]
        fn per_class_iou_symmetric(pairs in prop::collection::vec((0u16..3, 0u16..3), 1..64)) {
            let (p, g): (Vec<u16>, Vec<u16>) = pairs.into_iter().unzip();
            let (p, g) = (map(1, p), map(1, g));
            prop_assert_eq!(
                iou_report(&p, &g, 3, None).unwrap().per_class_iou,
                iou_report(&g, &p, 3, None).unwrap().per_class_iou
            );
        }

        #[test]
        fn precision_times_selected_is_tp(
            pairs in prop::collection::vec((0u16..3, 0u16..3, any::<bool>()), 1..64)
        ) {
            let n = pairs.len() as u32;
            let pseudo = map(n, pairs.iter().map(|t| t.0).collect());
            let gt = map(n, pairs.iter().map(|t| t.1).collect());
            let sel: Vec<_> = (0..n).filter(|&i| pairs[i as usize].2).map(|i| px(i, n)).collect();
            let r = detection_report(&sel, &pseudo, &gt, None).unwrap();
            prop_assert_eq!(r.true_positives + r.false_positives, r.selected);
            prop_assert!((r.precision * r.selected as f64 - r.true_positives as f64).abs() < 1e-9);
        }
    }
}
