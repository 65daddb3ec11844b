//! Mask-quality metrics: per-class intersection-over-union, precision, and
//! recall of an estimated mask against ground truth, plus their unweighted
//! class means.
//!
//! Ground-truth void pixels are skipped entirely (standard benchmark
//! convention). A void *prediction* simply fails to predict anything, so it
//! contributes a false negative wherever the ground truth has a class and
//! never a true or false positive. Tallies are mergeable, so per-image
//! accumulation can run in parallel with a final merge.

use crate::annotation::{PseudoMask, BACKGROUND, VOID};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionTally {
    num_classes: usize,
    true_pos: Vec<u64>,
    false_pos: Vec<u64>,
    false_neg: Vec<u64>,
}

impl ConfusionTally {
    pub fn new(num_classes: usize) -> Self {
        ConfusionTally {
            num_classes,
            true_pos: vec![0; num_classes],
            false_pos: vec![0; num_classes],
            false_neg: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self, class: usize) -> (u64, u64, u64) {
        (
            self.true_pos[class],
            self.false_pos[class],
            self.false_neg[class],
        )
    }

    /// Add one predicted/ground-truth mask pair to the tally.
    pub fn accumulate(&mut self, pred: &PseudoMask, gt: &PseudoMask) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::Shape(format!(
                "pred {}x{} vs gt {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == VOID {
                continue;
            }
            if usize::from(g) >= self.num_classes {
                return Err(Error::Data(format!("gt label {g} outside tally range")));
            }
            if p == VOID {
                self.false_neg[usize::from(g)] += 1;
                continue;
            }
            if usize::from(p) >= self.num_classes {
                return Err(Error::Data(format!("pred label {p} outside tally range")));
            }
            if p == g {
                self.true_pos[usize::from(p)] += 1;
            } else {
                self.false_pos[usize::from(p)] += 1;
                self.false_neg[usize::from(g)] += 1;
            }
        }
        Ok(())
    }

    /// Fold another tally into this one.
    pub fn merge(&mut self, other: &ConfusionTally) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::Shape("tally class counts differ".into()));
        }
        for c in 0..self.num_classes {
            self.true_pos[c] += other.true_pos[c];
            self.false_pos[c] += other.false_pos[c];
            self.false_neg[c] += other.false_neg[c];
        }
        Ok(())
    }
}

/// Scores for one class; `None` marks an undefined ratio (zero denominator),
/// which is excluded from the corresponding mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scores {
    pub per_class: Vec<ClassScore>,
    /// Whether the background class entered the means.
    pub include_background: bool,
    pub mean_iou: Option<f64>,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Score a tally. Means are unweighted over classes with defined ratios;
/// background (class 0) joins the means only when `include_background`.
pub fn score(tally: &ConfusionTally, include_background: bool) -> Scores {
    let per_class: Vec<ClassScore> = (0..tally.num_classes)
        .map(|c| {
            let (tp, fp, fn_) = tally.counts(c);
            ClassScore {
                class: c,
                iou: ratio(tp, tp + fp + fn_),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
            }
        })
        .collect();
    let start = if include_background {
        0
    } else {
        usize::from(BACKGROUND) + 1
    };
    Scores {
        mean_iou: mean_of(per_class.iter().skip(start).map(|s| s.iou)),
        mean_precision: mean_of(per_class.iter().skip(start).map(|s| s.precision)),
        mean_recall: mean_of(per_class.iter().skip(start).map(|s| s.recall)),
        include_background,
        per_class,
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:>7.4}", x),
        None => format!("{:>7}", "-"),
    }
}

impl Scores {
    /// Aligned plain-text table: one row per class, mean footer.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>7} {:>7} {:>7}\n",
            "class", "S_IoU", "S_prec", "S_rec"
        ));
        for s in &self.per_class {
            let name = class_names
                .get(s.class)
                .cloned()
                .unwrap_or_else(|| format!("class-{}", s.class));
            out.push_str(&format!(
                "{:<16} {} {} {}\n",
                name,
                fmt_cell(s.iou),
                fmt_cell(s.precision),
                fmt_cell(s.recall)
            ));
        }
        out.push_str(&format!(
            "{:<16} {} {} {}\n",
            "mean",
            fmt_cell(self.mean_iou),
            fmt_cell(self.mean_precision),
            fmt_cell(self.mean_recall)
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn mask(w: usize, h: usize, labels: Vec<u8>) -> PseudoMask {
        PseudoMask::new(w, h, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let gt = mask(2, 2, vec![0, 1, 1, 2]);
        let mut tally = ConfusionTally::new(3);
        tally.accumulate(&gt, &gt).unwrap();
        for c in 0..3 {
            let (_, fp, fn_) = tally.counts(c);
            assert_eq!((fp, fn_), (0, 0));
        }
        let s = score(&tally, true);
        for cs in &s.per_class {
            assert_eq!(cs.iou, Some(1.0));
            assert_eq!(cs.precision, Some(1.0));
            assert_eq!(cs.recall, Some(1.0));
        }
        assert_eq!(s.mean_iou, Some(1.0));
    }

    #[test]
    fn all_void_prediction_counts_only_false_negatives() {
        let gt = mask(2, 2, vec![1, 1, 2, 0]);
        let pred = mask(2, 2, vec![VOID; 4]);
        let mut tally = ConfusionTally::new(3);
        tally.accumulate(&pred, &gt).unwrap();
        assert_eq!(tally.counts(1), (0, 0, 2));
        assert_eq!(tally.counts(2), (0, 0, 1));
        assert_eq!(tally.counts(0), (0, 0, 1));
    }

    #[test]
    fn gt_void_pixels_are_skipped() {
        let gt = mask(2, 1, vec![VOID, 1]);
        let pred = mask(2, 1, vec![2, 1]);
        let mut tally = ConfusionTally::new(3);
        tally.accumulate(&pred, &gt).unwrap();
        assert_eq!(tally.counts(2), (0, 0, 0));
        assert_eq!(tally.counts(1), (1, 0, 0));
    }

    #[test]
    fn hand_counted_single_mismatch() {
        // 2x2: gt = [1,1,0,0], pred = [1,2,0,0].
        let gt = mask(2, 2, vec![1, 1, 0, 0]);
        let pred = mask(2, 2, vec![1, 2, 0, 0]);
        let mut tally = ConfusionTally::new(3);
        tally.accumulate(&pred, &gt).unwrap();
        assert_eq!(tally.counts(0), (2, 0, 0));
        assert_eq!(tally.counts(1), (1, 0, 1));
        assert_eq!(tally.counts(2), (0, 1, 0));
        let s = score(&tally, false);
        let c1 = &s.per_class[1];
        assert_eq!(c1.iou, Some(0.5));
        assert_eq!(c1.precision, Some(1.0));
        assert_eq!(c1.recall, Some(0.5));
        let c2 = &s.per_class[2];
        assert_eq!(c2.iou, Some(0.0));
        assert_eq!(c2.precision, Some(0.0));
        assert_eq!(c2.recall, None); // class 2 absent from gt
    }

    #[test]
    fn covering_gt_plus_equal_spurious_region_halves_precision() {
        // gt: two pixels of class 1; pred: those two plus two spurious.
        let gt = mask(4, 1, vec![1, 1, 0, 0]);
        let pred = mask(4, 1, vec![1, 1, 1, 1]);
        let mut tally = ConfusionTally::new(2);
        tally.accumulate(&pred, &gt).unwrap();
        let s = score(&tally, false);
        let c1 = &s.per_class[1];
        assert_eq!(c1.recall, Some(1.0));
        assert_eq!(c1.precision, Some(0.5));
        assert_eq!(c1.iou, Some(0.5));
    }

    #[test]
    fn iou_bounded_by_precision_and_recall() {
        let mut rng = rng_from(10);
        for _ in 0..1000 {
            let tp = rng.gen_range(0..100u64);
            let fp = rng.gen_range(0..100u64);
            let fn_ = rng.gen_range(0..100u64);
            if tp + fp == 0 || tp + fn_ == 0 {
                continue;
            }
            let iou = tp as f64 / (tp + fp + fn_) as f64;
            let prec = tp as f64 / (tp + fp) as f64;
            let rec = tp as f64 / (tp + fn_) as f64;
            assert!(iou <= prec.min(rec) + 1e-15);
        }
    }

    #[test]
    fn accumulation_order_and_merge_agree() {
        let mut rng = rng_from(11);
        let masks: Vec<(PseudoMask, PseudoMask)> = (0..6)
            .map(|_| {
                let labels = |rng: &mut rand_chacha::ChaCha8Rng| {
                    (0..9)
                        .map(|_| match rng.gen_range(0..4) {
                            0 => 0u8,
                            1 => 1,
                            2 => 2,
                            _ => VOID,
                        })
                        .collect::<Vec<u8>>()
                };
                (mask(3, 3, labels(&mut rng)), mask(3, 3, labels(&mut rng)))
            })
            .collect();

        // All at once, forward order.
        let mut all = ConfusionTally::new(3);
        for (p, g) in &masks {
            all.accumulate(p, g).unwrap();
        }
        // Reverse order.
        let mut rev = ConfusionTally::new(3);
        for (p, g) in masks.iter().rev() {
            rev.accumulate(p, g).unwrap();
        }
        // Split then merged.
        let mut left = ConfusionTally::new(3);
        let mut right = ConfusionTally::new(3);
        for (p, g) in &masks[..3] {
            left.accumulate(p, g).unwrap();
        }
        for (p, g) in &masks[3..] {
            right.accumulate(p, g).unwrap();
        }
        left.merge(&right).unwrap();
        for c in 0..3 {
            assert_eq!(all.counts(c), rev.counts(c));
            assert_eq!(all.counts(c), left.counts(c));
        }
    }

    #[test]
    fn zero_denominator_classes_are_excluded_from_means() {
        // Class 2 appears nowhere: it must not drag the means.
        let gt = mask(2, 1, vec![1, 0]);
        let pred = mask(2, 1, vec![1, 0]);
        let mut tally = ConfusionTally::new(3);
        tally.accumulate(&pred, &gt).unwrap();
        let s = score(&tally, false);
        assert_eq!(s.mean_iou, Some(1.0));
        assert_eq!(s.per_class[2].iou, None);
    }

    #[test]
    fn accumulate_rejects_extent_mismatch() {
        let a = mask(2, 1, vec![0, 0]);
        let b = mask(1, 2, vec![0, 0]);
        let mut tally = ConfusionTally::new(1);
        assert!(tally.accumulate(&a, &b).is_err());
    }

    #[test]
    fn text_table_has_per_class_rows_and_mean_footer() {
        let gt = mask(2, 1, vec![1, 0]);
        let mut tally = ConfusionTally::new(2);
        tally.accumulate(&gt, &gt).unwrap();
        let s = score(&tally, false);
        let names = vec!["background".to_string(), "thing".to_string()];
        let text = s.to_text(&names);
        assert!(text.contains("thing"));
        assert!(text.lines().last().unwrap().starts_with("mean"));
    }
}
