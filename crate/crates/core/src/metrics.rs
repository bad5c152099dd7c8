//! Threshold binarization, confusion counts and overlap metrics.
//!
//! Dataset figures are macro averages: the mean of per-image values.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `p ≥ threshold`, else `0`.
pub fn binarize<T: Scalar>(p: &[T], threshold: f64) -> Vec<u8> {
    let t = T::from_f64_lossy(threshold);
    p.iter().map(|&v| u8::from(v >= t)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Counts for a predicted mask against the truth; both must be 0/1.
pub fn confusion<T: Scalar>(mask: &[u8], y: &[T]) -> Result<ConfusionCounts> {
    if mask.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            lhs: vec![mask.len()],
            rhs: vec![y.len()],
        });
    }
    let mut c = ConfusionCounts::default();
    for (&m, &t) in mask.iter().zip(y) {
        let truth = if t == T::one() {
            true
        } else if t == T::zero() {
            false
        } else {
            return Err(Error::InvalidInput(format!("confusion: truth value {t} is not 0 or 1")));
        };
        match (m, truth) {
            (1, true) => c.tp += 1,
            (1, false) => c.fp += 1,
            (0, true) => c.fn_ += 1,
            (0, false) => c.tn += 1,
            (v, _) => return Err(Error::InvalidInput(format!("confusion: mask value {v} is not 0 or 1"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    pub rec: f64,
    pub pre: f64,
    /// A zero denominator was resolved by the empty-vs-empty rule.
    pub empty_convention: bool,
}

/// Dice `2TP/(2TP+FP+FN)`, IoU `TP/(TP+FP+FN)`, accuracy, recall and
/// precision. A zero denominator yields 1.0 when neither mask has any
/// positive pixel involved in that ratio and 0.0 otherwise.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut empty = false;
    let mut ratio = |num: f64, den: f64, other_positives: u64| {
        if den > 0.0 {
            num / den
        } else {
            empty = true;
            if c.tp == 0 && other_positives == 0 {
                1.0
            } else {
                0.0
            }
        }
    };
    Metrics {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_, 0),
        iou: ratio(tp, tp + fp + fn_, 0),
        acc: ratio(tp + tn, tp + tn + fp + fn_, 0),
        rec: ratio(tp, tp + fn_, c.fp),
        pre: ratio(tp, tp + fp, c.fn_),
        empty_convention: empty,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: String,
    pub threshold: f64,
    pub per_image: Vec<ImageMetrics>,
    /// Summed counts.
    pub total: ConfusionCounts,
    /// Mean of the per-image metrics.
    pub aggregate: Metrics,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidInput("metrics report over zero images".into()));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| per_image.iter().map(|m| f(&m.metrics)).sum::<f64>() / n;
        let aggregate = Metrics {
            dice: mean(|m| m.dice),
            iou: mean(|m| m.iou),
            acc: mean(|m| m.acc),
            rec: mean(|m| m.rec),
            pre: mean(|m| m.pre),
            empty_convention: per_image.iter().any(|m| m.metrics.empty_convention),
        };
        let total = per_image.iter().fold(ConfusionCounts::default(), |a, m| a + m.counts);
        Ok(Self {
            averaging: "macro".into(),
            threshold,
            per_image,
            total,
            aggregate,
        })
    }

    /// Scores probability maps against truth masks, one entry per image.
    pub fn evaluate<T: Scalar>(items: &[(String, Vec<T>, Vec<T>)], threshold: f64) -> Result<Self> {
        let per_image = items
            .iter()
            .map(|(id, prob, truth)| {
                let counts = confusion(&binarize(prob, threshold), truth)?;
                Ok(ImageMetrics {
                    id: id.clone(),
                    counts,
                    metrics: metrics(&counts),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(per_image, threshold)
    }

    /// One row per image and a final `mean_macro` row holding summed counts
    /// and averaged metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,tp,tn,fp,fn,dice,iou,acc,rec,pre\n");
        let mut row = |id: &str, c: &ConfusionCounts, m: &Metrics| {
            writeln!(
                s,
                "{id},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                c.tp, c.tn, c.fp, c.fn_, m.dice, m.iou, m.acc, m.rec, m.pre
            )
            .expect("writing to a String");
        };
        for im in &self.per_image {
            row(&im.id, &im.counts, &im.metrics);
        }
        row("mean_macro", &self.total, &self.aggregate);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_example() {
        // 4×4, truth has 4 foreground pixels; prediction hits 3 plus one background
        let y: Vec<f64> = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let m: Vec<u8> = vec![1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let c = confusion(&m, &y).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 1, 1, 11));
        let r = metrics(&c);
        assert_eq!((r.dice, r.iou, r.acc, r.rec, r.pre), (0.75, 0.6, 0.875, 0.75, 0.75));
        assert!(!r.empty_convention);
    }

    #[test]
    fn exact_match() {
        let y: Vec<f32> = (0..16).map(|i| (i < 4) as u8 as f32).collect();
        let c = confusion(&binarize(&y, 0.5), &y).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (4, 12, 0, 0));
        let r = metrics(&c);
        assert_eq!([r.dice, r.iou, r.acc, r.rec, r.pre], [1.0; 5]);
    }

    #[test]
    fn tie_goes_positive_and_binarize_is_idempotent() {
        assert_eq!(binarize(&[0.5f64, 0.2, 0.8], 0.5), [1, 0, 1]);
        let b = binarize(&[0.3f32, 0.5, 0.7], 0.5);
        let again: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        assert_eq!(binarize(&again, 0.5), b);
    }

    #[test]
    fn empty_conventions() {
        let both_empty = metrics(&ConfusionCounts {
            tn: 9,
            ..Default::default()
        });
        assert_eq!(
            [both_empty.dice, both_empty.iou, both_empty.rec, both_empty.pre],
            [1.0; 4]
        );
        assert!(both_empty.empty_convention);
        let missed = metrics(&ConfusionCounts {
            tn: 5,
            fn_: 4,
            ..Default::default()
        });
        assert_eq!((missed.dice, missed.rec, missed.pre), (0.0, 0.0, 0.0));
    }

    #[test]
    fn non_binary_inputs_rejected() {
        assert!(confusion(&[2], &[1.0f32]).is_err());
        assert!(confusion(&[1], &[0.5f32]).is_err());
        assert!(confusion(&[1, 0], &[1.0f32]).is_err());
    }

    #[test]
    fn report_rows_and_macro_mean() {
        let items = vec![
            ("a".to_string(), vec![0.9f32, 0.1], vec![1.0f32, 0.0]),
            ("b".to_string(), vec![0.1f32, 0.1], vec![1.0f32, 0.0]),
        ];
        let r = MetricsReport::evaluate(&items, 0.5).unwrap();
        assert_eq!(r.aggregate.dice, 0.5);
        assert_eq!(r.total.tp, 1);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        assert!(csv.lines().last().unwrap().starts_with("mean_macro,1,2,0,1,0.500000"));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, tn, fp, fn_)| ConfusionCounts { tp, tn, fp, fn_ })
    }

    proptest! {
        #[test]
        fn dice_iou_identity(c in counts()) {
            let m = metrics(&c);
            prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-9);
        }

        #[test]
        fn flipping_fp_to_tn_never_hurts(c in counts().prop_filter("needs a false positive", |c| c.fp > 0)) {
            let before = metrics(&c);
            let after = metrics(&ConfusionCounts { fp: c.fp - 1, tn: c.tn + 1, ..c });
            prop_assert!(after.pre >= before.pre);
            prop_assert!(after.acc >= before.acc);
            prop_assert!(after.iou >= before.iou);
            prop_assert!(after.dice >= before.dice);
        }

        #[test]
        fn values_in_unit_interval(c in counts()) {
            let m = metrics(&c);
            for v in [m.dice, m.iou, m.acc, m.rec, m.pre] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
