//! Association, tracking, pose and label-uncertainty metrics.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bbox_to_gaussian, normalized_wasserstein, project_quadric_to_bbox, BoundingBox,
    CameraIntrinsics, Pose,
};
use crate::graph::{LandmarkId, NormalizedConfidence, PriorGraph};

/// Predicted and true landmark per detection of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAssociations {
    pub frame_id: u64,
    /// `detection index -> predicted landmark`.
    pub predicted: BTreeMap<usize, LandmarkId>,
    /// `detection index -> true landmark`.
    pub truth: BTreeMap<usize, LandmarkId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameCounts {
    pub frame_id: u64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub per_frame: Vec<FrameCounts>,
}

impl AssociationCounts {
    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// A prediction is a true positive when it names the detection's true landmark.
/// A wrong prediction is both a false positive and a miss; a prediction for a
/// detection without ground truth is a false positive.
pub fn evaluate_associations(frames: &[FrameAssociations]) -> AssociationCounts {
    let mut total = AssociationCounts::default();
    for f in frames {
        let mut c = FrameCounts {
            frame_id: f.frame_id,
            ..FrameCounts::default()
        };
        for (det, pred) in &f.predicted {
            if f.truth.get(det) == Some(pred) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        c.fn_ = f.truth.len() - c.tp;
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        total.per_frame.push(c);
    }
    total
}

/// True landmark of each detection found by projecting the map under the true
/// pose: the visible landmark with the most similar box, if it overlaps enough.
pub fn truth_by_projection(
    prior: &PriorGraph,
    pose: &Pose,
    boxes: &[(usize, BoundingBox)],
    intrinsics: &CameraIntrinsics,
    scale: f64,
    iou_threshold: f64,
) -> BTreeMap<usize, LandmarkId> {
    let projected: Vec<(LandmarkId, BoundingBox)> = prior
        .nodes()
        .iter()
        .filter_map(|n| project_quadric_to_bbox(n.quadric(), pose, intrinsics, true).map(|b| (n.id, b)))
        .collect();
    let mut out = BTreeMap::new();
    for (det, bbox) in boxes {
        let g = bbox_to_gaussian(bbox);
        let best = projected
            .iter()
            .filter(|(_, b)| b.iou(bbox) >= iou_threshold)
            .map(|(id, b)| (*id, normalized_wasserstein(&bbox_to_gaussian(b), &g, scale)))
            .fold(None::<(LandmarkId, f64)>, |acc, (id, w)| match acc {
                Some((_, bw)) if bw >= w => acc,
                _ => Some((id, w)),
            });
        if let Some((id, _)) = best {
            out.insert(*det, id);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotaFrame {
    pub frame_id: u64,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub ids: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotaCounts {
    pub frames: Vec<MotaFrame>,
}

/// Per-frame misses, false positives and identity switches, in frame order.
/// An identity switch is charged when a true landmark is predicted as a
/// different map landmark than at the last frame it had a prediction.
pub fn mota_counts(frames: &[FrameAssociations]) -> MotaCounts {
    let mut last: BTreeMap<LandmarkId, LandmarkId> = BTreeMap::new();
    let mut out = MotaCounts::default();
    for f in frames {
        let mut m = MotaFrame {
            frame_id: f.frame_id,
            gt: f.truth.len(),
            ..MotaFrame::default()
        };
        for (det, pred) in &f.predicted {
            match f.truth.get(det) {
                Some(truth) => {
                    if truth != pred {
                        m.fp += 1;
                        m.fn_ += 1;
                    }
                    if let Some(prev) = last.insert(*truth, *pred) {
                        if prev != *pred {
                            m.ids += 1;
                        }
                    }
                }
                None => m.fp += 1,
            }
        }
        m.fn_ += f.truth.keys().filter(|d| !f.predicted.contains_key(d)).count();
        out.frames.push(m);
    }
    out
}

/// `1 - Σ(FN + FP + IDS) / Σ GT`; negative when errors outnumber ground truth.
pub fn mota(counts: &MotaCounts) -> Result<f64> {
    let gt: usize = counts.frames.iter().map(|f| f.gt).sum();
    if gt == 0 {
        return Err(Error::invalid("MOTA is undefined without ground-truth objects"));
    }
    let errors: usize = counts.frames.iter().map(|f| f.fn_ + f.fp + f.ids).sum();
    Ok(1.0 - errors as f64 / gt as f64)
}

pub fn translation_error(estimated: &Vector3<f64>, truth: &Vector3<f64>) -> f64 {
    (estimated - truth).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuccessMode {
    /// Over frames that produced a pose.
    Succ,
    /// Over all frames, failures included.
    All,
}

impl SuccessMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Succ => "succ",
            Self::All => "all",
        }
    }
}

/// Fraction in [0, 1] of frames whose error is within `threshold`. Each entry is
/// a frame's translation error, or `None` when localization failed. With
/// `strict`, an error equal to the threshold does not count.
pub fn success_rate(
    errors: &[Option<f64>],
    threshold: f64,
    mode: SuccessMode,
    strict: bool,
) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("success rate of an empty frame list"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("success threshold must be positive"));
    }
    let hits = errors
        .iter()
        .flatten()
        .filter(|&&e| if strict { e < threshold } else { e <= threshold })
        .count();
    let den = match mode {
        SuccessMode::Succ => errors.iter().flatten().count(),
        SuccessMode::All => errors.len(),
    };
    Ok(ratio(hits, den))
}

/// Mean error over frames that produced a pose.
pub fn mean_translation_error(errors: &[Option<f64>]) -> Option<f64> {
    let ok: Vec<f64> = errors.iter().flatten().copied().collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

/// Entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(confidences: &NormalizedConfidence) -> f64 {
    confidences
        .entries()
        .iter()
        .filter(|(_, c)| *c > 0.0)
        .map(|(_, c)| c * c.recip().ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_confidences;

    fn counts(tp: usize, fp: usize, fn_: usize) -> AssociationCounts {
        AssociationCounts {
            tp,
            fp,
            fn_,
            per_frame: vec![],
        }
    }

    #[test]
    fn prf_examples() {
        let perfect = counts(10, 0, 0);
        assert_eq!((perfect.precision(), perfect.recall(), perfect.f1()), (1.0, 1.0, 1.0));
        let c = counts(8, 2, 2);
        assert!((c.precision() - 0.8).abs() < 1e-15);
        assert!((c.recall() - 0.8).abs() < 1e-15);
        assert!((c.f1() - 0.8).abs() < 1e-15);
        let empty = counts(0, 0, 5);
        assert_eq!((empty.precision(), empty.recall(), empty.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wrong_prediction_is_fp_and_fn() {
        let f = FrameAssociations {
            frame_id: 0,
            predicted: [(0, 10), (1, 11), (2, 99)].into(),
            truth: [(0, 10), (1, 12), (3, 13)].into(),
        };
        let c = evaluate_associations(&[f]);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 2, 2));
    }

    #[test]
    fn mota_examples() {
        let zero = MotaCounts {
            frames: vec![MotaFrame {
                gt: 5,
                ..MotaFrame::default()
            }],
        };
        assert_eq!(mota(&zero).unwrap(), 1.0);
        let c = MotaCounts {
            frames: vec![MotaFrame {
                frame_id: 0,
                fn_: 5,
                fp: 3,
                ids: 2,
                gt: 100,
            }],
        };
        assert!((mota(&c).unwrap() - 0.9).abs() < 1e-15);
        let bad = MotaCounts {
            frames: vec![MotaFrame {
                frame_id: 0,
                fn_: 3,
                fp: 3,
                ids: 0,
                gt: 2,
            }],
        };
        assert!((mota(&bad).unwrap() + 2.0).abs() < 1e-15);
        assert!(mota(&MotaCounts::default()).is_err());
    }

    #[test]
    fn identity_switches() {
        let frame = |id, pred: LandmarkId| FrameAssociations {
            frame_id: id,
            predicted: [(0, pred)].into(),
            truth: [(0, 7)].into(),
        };
        let seq = [frame(0, 7), frame(1, 7), frame(2, 8), frame(3, 8), frame(4, 7)];
        let m = mota_counts(&seq);
        let ids: Vec<usize> = m.frames.iter().map(|f| f.ids).collect();
        assert_eq!(ids, vec![0, 0, 1, 0, 1]);
        // Frame without a prediction keeps the previous match.
        let gap = [
            frame(0, 7),
            FrameAssociations {
                frame_id: 1,
                predicted: BTreeMap::new(),
                truth: [(0, 7)].into(),
            },
            frame(2, 7),
        ];
        let m = mota_counts(&gap);
        assert_eq!(m.frames.iter().map(|f| f.ids).sum::<usize>(), 0);
        assert_eq!(m.frames[1].fn_, 1);
    }

    #[test]
    fn translation_examples() {
        let a = Vector3::new(0.0, 0.0, 0.0);
        let b = Vector3::new(3.0, 4.0, 0.0);
        assert_eq!(translation_error(&a, &a), 0.0);
        assert_eq!(translation_error(&a, &b), 5.0);
        assert_eq!(translation_error(&b, &a), 5.0);
    }

    #[test]
    fn success_rate_examples() {
        let all_ok = vec![Some(0.1); 5];
        assert_eq!(success_rate(&all_ok, 0.5, SuccessMode::Succ, false).unwrap(), 1.0);
        assert_eq!(success_rate(&all_ok, 0.5, SuccessMode::All, false).unwrap(), 1.0);

        let mut mixed = vec![Some(0.2); 8];
        mixed.extend([None, None]);
        assert_eq!(success_rate(&mixed, 0.5, SuccessMode::Succ, false).unwrap(), 1.0);
        assert!((success_rate(&mixed, 0.5, SuccessMode::All, false).unwrap() - 0.8).abs() < 1e-15);

        let edge = [Some(0.5)];
        assert_eq!(success_rate(&edge, 0.5, SuccessMode::Succ, false).unwrap(), 1.0);
        assert_eq!(success_rate(&edge, 0.5, SuccessMode::Succ, true).unwrap(), 0.0);
        assert!(success_rate(&[], 0.5, SuccessMode::Succ, false).is_err());
        assert_eq!(mean_translation_error(&[Some(1.0), None, Some(3.0)]), Some(2.0));
    }

    #[test]
    fn entropy_examples() {
        let one = normalize_confidences(&[("a", 1.0)], 5).unwrap();
        assert_eq!(shannon_entropy(&one), 0.0);
        let uniform =
            normalize_confidences(&[("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0), ("e", 1.0)], 5)
                .unwrap();
        assert!((shannon_entropy(&uniform) - 5f64.ln()).abs() < 1e-12);
        assert!((shannon_entropy(&uniform) - 1.6094).abs() < 1e-4);
        let half = normalize_confidences(&[("a", 0.5), ("b", 0.5)], 5).unwrap();
        assert!((shannon_entropy(&half) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
