//! Adaptive pseudo ground truth generation.
//!
//! Scores are min-max normalised per image-level class so a single threshold
//! works for confident and unconfident classes alike. Surviving boxes that are
//! mostly contained in another surviving box of the same class are discarded,
//! since such boxes tend to be object parts.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::geometry::{overlap_over_self, BBox, ScoredBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgtParams {
    pub score_threshold: f64,
    pub overlap_threshold: f64,
    /// Keep the best box of a class whose boxes were all removed by the
    /// overlap filter.
    pub fallback: bool,
}

impl Default for PgtParams {
    fn default() -> Self {
        PgtParams {
            score_threshold: 0.3,
            overlap_threshold: 0.85,
            fallback: true,
        }
    }
}

impl PgtParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::param(
                "score_threshold",
                format!("{} is outside [0, 1)", self.score_threshold),
            ));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::param(
                "overlap_threshold",
                format!("{} is outside (0, 1]", self.overlap_threshold),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgtBox {
    pub label: i64,
    pub bbox: BBox,
    pub normalized_score: f64,
    /// Set when the box was only kept by the empty-class fallback.
    pub fallback: bool,
}

/// Min-max normalisation; a constant list maps to all ones.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input("cannot normalise an empty score list".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![1.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| (s - lo) / span).collect())
}

/// Pseudo ground truth for one image.
///
/// Classes are visited in ascending label order; boxes whose label is not in
/// `image_labels` are ignored. Within a class the output is sorted by
/// descending normalised score.
pub fn adaptive_pgt(
    boxes: &[ScoredBox],
    image_labels: &[i64],
    params: &PgtParams,
) -> Result<Vec<PgtBox>> {
    params.validate()?;
    for b in boxes {
        b.bbox.validate()?;
    }
    let labels: BTreeSet<i64> = image_labels.iter().copied().collect();
    let mut out = Vec::new();
    for &label in &labels {
        let class: Vec<&ScoredBox> = boxes.iter().filter(|b| b.label == label).collect();
        if class.is_empty() {
            continue;
        }
        let scores: Vec<f64> = class.iter().map(|b| b.score).collect();
        let norm = normalize_scores(&scores)?;

        let kept: Vec<(BBox, f64)> = class
            .iter()
            .zip(&norm)
            .filter(|(_, &s)| s > params.score_threshold)
            .map(|(b, &s)| (b.bbox, s))
            .collect();

        let mut selected: Vec<PgtBox> = kept
            .iter()
            .enumerate()
            .filter(|(j, (bj, _))| {
                kept.iter()
                    .enumerate()
                    .filter(|(k, _)| k != j)
                    .all(|(_, (bk, _))| overlap_over_self(bj, bk) < params.overlap_threshold)
            })
            .map(|(_, &(bbox, s))| PgtBox {
                label,
                bbox,
                normalized_score: s,
                fallback: false,
            })
            .collect();

        if selected.is_empty() && params.fallback {
            // first maximum in input order
            let best = kept.iter().fold(None::<&(BBox, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
            if let Some(&(bbox, s)) = best {
                selected.push(PgtBox {
                    label,
                    bbox,
                    normalized_score: s,
                    fallback: true,
                });
            }
        }

        selected.sort_by(|a, b| b.normalized_score.total_cmp(&a.normalized_score));
        out.extend(selected);
    }
    Ok(out)
}

/// Baseline that keeps only the highest-scoring box of each image-level class.
pub fn top1_pgt(boxes: &[ScoredBox], image_labels: &[i64]) -> Result<Vec<PgtBox>> {
    for b in boxes {
        b.bbox.validate()?;
    }
    let labels: BTreeSet<i64> = image_labels.iter().copied().collect();
    let mut out = Vec::new();
    for &label in &labels {
        let best = boxes
            .iter()
            .filter(|b| b.label == label)
            .fold(None::<&ScoredBox>, |best, cand| match best {
                Some(b) if b.score >= cand.score => Some(b),
                _ => Some(cand),
            });
        if let Some(b) = best {
            out.push(PgtBox {
                label,
                bbox: b.bbox,
                normalized_score: 1.0,
                fallback: false,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(label: i64, x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
        ScoredBox {
            label,
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
            score,
        }
    }

    #[test]
    fn normalization_conventions() {
        let n = normalize_scores(&[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(n[0], 0.0);
        assert!((n[1] - 0.5).abs() < 1e-15);
        assert_eq!(n[2], 1.0);
        assert_eq!(normalize_scores(&[0.4]).unwrap(), vec![1.0]);
        assert_eq!(normalize_scores(&[2.0, 2.0, 2.0]).unwrap(), vec![1.0; 3]);
        assert!(normalize_scores(&[]).is_err());
    }

    #[test]
    fn lone_boxes_are_kept() {
        let boxes = [sb(1, 0.0, 0.0, 5.0, 5.0, 0.01), sb(4, 1.0, 1.0, 2.0, 2.0, 0.99)];
        let out = adaptive_pgt(&boxes, &[4, 1], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].label, out[1].label), (1, 4));
        assert!(out.iter().all(|b| b.normalized_score == 1.0 && !b.fallback));
    }

    #[test]
    fn low_normalised_score_is_dropped() {
        let boxes = [sb(2, 0.0, 0.0, 5.0, 5.0, 0.2), sb(2, 10.0, 10.0, 15.0, 15.0, 0.8)];
        let out = adaptive_pgt(&boxes, &[2], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, boxes[1].bbox);
    }

    #[test]
    fn two_overlapping_boxes_keep_the_stronger() {
        // normalised scores are [0, 1], so the weaker box already fails the score filter
        let boxes = [sb(3, 0.0, 0.0, 10.0, 10.0, 0.6), sb(3, 0.0, 0.0, 10.0, 9.0, 0.9)];
        let out = adaptive_pgt(&boxes, &[3], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, boxes[1].bbox);
        assert!(!out[0].fallback);
    }

    #[test]
    fn mutual_overlap_triggers_fallback() {
        let boxes = [
            sb(3, 0.0, 0.0, 10.0, 10.0, 0.6),
            sb(3, 0.0, 0.0, 10.0, 9.0, 0.9),
            sb(3, 50.0, 50.0, 50.0, 50.0, 0.0),
        ];
        let mut params = PgtParams::default();
        let out = adaptive_pgt(&boxes, &[3], &params).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].fallback);
        assert_eq!(out[0].bbox, boxes[1].bbox);
        assert_eq!(out[0].normalized_score, 1.0);

        params.fallback = false;
        assert!(adaptive_pgt(&boxes, &[3], &params).unwrap().is_empty());
    }

    #[test]
    fn class_survives_low_raw_scores() {
        let boxes = [sb(7, 0.0, 0.0, 4.0, 4.0, 0.001), sb(7, 20.0, 0.0, 24.0, 4.0, 0.002)];
        let out = adaptive_pgt(&boxes, &[7], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, boxes[1].bbox);
    }

    #[test]
    fn labels_outside_image_are_ignored() {
        let boxes = [sb(1, 0.0, 0.0, 4.0, 4.0, 0.5), sb(9, 0.0, 0.0, 4.0, 4.0, 0.5)];
        let out = adaptive_pgt(&boxes, &[1, 5], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].label, 1);
        assert!(adaptive_pgt(&[], &[1], &PgtParams::default()).unwrap().is_empty());
    }

    #[test]
    fn contained_part_is_removed() {
        let boxes = [
            sb(1, 0.0, 0.0, 100.0, 100.0, 0.9),
            sb(1, 10.0, 10.0, 30.0, 30.0, 0.8),
            sb(1, 200.0, 0.0, 210.0, 10.0, 0.1),
        ];
        let out = adaptive_pgt(&boxes, &[1], &PgtParams::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, boxes[0].bbox);
        assert_eq!(out[0].normalized_score, 1.0);
    }

    #[test]
    fn output_sorted_by_normalised_score() {
        let boxes = [
            sb(1, 0.0, 0.0, 10.0, 10.0, 0.5),
            sb(1, 20.0, 0.0, 30.0, 10.0, 0.9),
            sb(1, 40.0, 0.0, 50.0, 10.0, 0.7),
            sb(1, 60.0, 0.0, 70.0, 10.0, 0.1),
        ];
        let out = adaptive_pgt(&boxes, &[1], &PgtParams::default()).unwrap();
        let xs: Vec<f64> = out.iter().map(|b| b.bbox.x1).collect();
        assert_eq!(xs, vec![20.0, 40.0, 0.0]);
    }

    #[test]
    fn param_ranges() {
        let bad_o = PgtParams { overlap_threshold: 1.5, ..Default::default() };
        assert!(bad_o.validate().is_err());
        let bad_s = PgtParams { score_threshold: 1.0, ..Default::default() };
        assert!(bad_s.validate().is_err());
        assert!(PgtParams::default().validate().is_ok());
    }

    #[test]
    fn top1_baseline() {
        let boxes = [
            sb(1, 0.0, 0.0, 10.0, 10.0, 0.5),
            sb(1, 20.0, 0.0, 30.0, 10.0, 0.9),
            sb(2, 0.0, 0.0, 1.0, 1.0, 0.1),
        ];
        let out = top1_pgt(&boxes, &[1, 2, 3]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].bbox.x1, 20.0);
        assert_eq!(out[1].label, 2);
    }
}
