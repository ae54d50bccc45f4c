//! Box metrics (proposal recall, CorLoc, pseudo-label error rate) and the
//! proposal-feature similarity report.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::pgt::PgtBox;

/// Per-image collections keyed by image id; ordered for deterministic reports.
pub type ByImage<T> = BTreeMap<String, Vec<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub image_id: String,
    pub label: i64,
    pub bbox: BBox,
}

pub fn group_by_image(boxes: &[GtBox]) -> ByImage<GtBox> {
    let mut out: ByImage<GtBox> = BTreeMap::new();
    for b in boxes {
        out.entry(b.image_id.clone()).or_default().push(b.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub iou_threshold: f64,
    pub recall: f64,
    pub matched: usize,
    pub total_gt: usize,
    pub avg_proposals_per_image: f64,
}

fn check_threshold(field: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(field, format!("{t} is outside (0, 1]")))
    }
}

/// Fraction of ground-truth boxes covered by at least one proposal with
/// IoU ≥ `threshold`, pooled over all images. Labels are ignored.
///
/// Images that have ground truth but no proposals contribute unmatched boxes.
/// With no ground truth at all the recall is reported as 0.
pub fn recall_at_iou(
    proposals: &ByImage<BBox>,
    gt: &ByImage<BBox>,
    threshold: f64,
) -> Result<RecallReport> {
    check_threshold("iou_threshold", threshold)?;
    let mut total_gt = 0;
    let mut matched = 0;
    for (image, gts) in gt {
        let props = proposals.get(image).map(Vec::as_slice).unwrap_or(&[]);
        total_gt += gts.len();
        matched += gts
            .iter()
            .filter(|g| props.iter().any(|p| iou(p, g) >= threshold))
            .count();
    }
    let images: BTreeSet<&String> = proposals.keys().chain(gt.keys()).collect();
    let n_props: usize = proposals.values().map(Vec::len).sum();
    Ok(RecallReport {
        iou_threshold: threshold,
        recall: if total_gt == 0 { 0.0 } else { matched as f64 / total_gt as f64 },
        matched,
        total_gt,
        avg_proposals_per_image: if images.is_empty() {
            0.0
        } else {
            n_props as f64 / images.len() as f64
        },
    })
}

pub const CORLOC_IOU: f64 = 0.5;

/// Correct localisation rate, averaged per class and then over classes.
///
/// For every class present in an image's ground truth, the highest-scoring
/// detection of that class must reach IoU ≥ 0.5 with a ground-truth box of the
/// same class. Returns `None` when no image has any ground truth.
pub fn corloc(detections: &ByImage<ScoredBox>, gt: &ByImage<GtBox>) -> Option<f64> {
    let mut per_class: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for (image, gts) in gt {
        let dets = detections.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let present: BTreeSet<i64> = gts.iter().map(|g| g.label).collect();
        for label in present {
            let top = dets
                .iter()
                .filter(|d| d.label == label)
                .fold(None::<&ScoredBox>, |best, d| match best {
                    Some(b) if b.score >= d.score => Some(b),
                    _ => Some(d),
                });
            let hit = top.is_some_and(|d| {
                gts.iter()
                    .any(|g| g.label == label && iou(&d.bbox, &g.bbox) >= CORLOC_IOU)
            });
            let entry = per_class.entry(label).or_default();
            entry.0 += hit as usize;
            entry.1 += 1;
        }
    }
    if per_class.is_empty() {
        return None;
    }
    let sum: f64 = per_class
        .values()
        .map(|&(hit, n)| hit as f64 / n as f64)
        .sum();
    Some(sum / per_class.len() as f64)
}

/// A labelled box is a localisation error when no ground-truth box of the same
/// class reaches IoU ≥ `iou_threshold` with it.
pub fn is_localization_error(label: i64, bbox: &BBox, gt: &[GtBox], iou_threshold: f64) -> bool {
    !gt.iter()
        .any(|g| g.label == label && iou(bbox, &g.bbox) >= iou_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRateReport {
    pub iou_threshold: f64,
    pub errors: usize,
    pub total: usize,
    /// `None` when there are no pseudo labels.
    pub error_rate: Option<f64>,
}

pub fn pgt_error_rate(
    pgt: &ByImage<PgtBox>,
    gt: &ByImage<GtBox>,
    iou_threshold: f64,
) -> Result<ErrorRateReport> {
    check_threshold("iou_threshold", iou_threshold)?;
    let mut errors = 0;
    let mut total = 0;
    for (image, boxes) in pgt {
        let gts = gt.get(image).map(Vec::as_slice).unwrap_or(&[]);
        total += boxes.len();
        errors += boxes
            .iter()
            .filter(|b| is_localization_error(b.label, &b.bbox, gts, iou_threshold))
            .count();
    }
    Ok(ErrorRateReport {
        iou_threshold,
        errors,
        total,
        error_rate: (total > 0).then(|| errors as f64 / total as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub seed: u64,
    /// Row indices of the sampled feature vectors, ascending.
    pub indices: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    /// Mean over unordered off-diagonal pairs; `None` for a single sample.
    pub mean_off_diagonal: Option<f64>,
    /// Off-diagonal pair similarities over `[-1, 1]`.
    pub histogram: Vec<HistogramBin>,
}

pub const SIMILARITY_BINS: usize = 20;

/// Cosine similarity; 0 if either vector is all zeros.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise cosine similarity of `sample_size` rows drawn without replacement
/// from `features` (one feature vector per row) with a seeded generator.
pub fn feature_cosine_similarity(
    features: &Array2<f64>,
    sample_size: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    let (m, d) = features.dim();
    if m == 0 || d == 0 {
        return Err(Error::Input("empty feature set".into()));
    }
    if sample_size == 0 || sample_size > m {
        return Err(Error::param(
            "sample_size",
            format!("{sample_size} must be in 1..={m}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, m, sample_size).into_vec();
    indices.sort_unstable();

    let rows: Vec<_> = indices.iter().map(|&i| features.row(i)).collect();
    let n = rows.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut hist = vec![0usize; SIMILARITY_BINS];
    let mut sum = 0.0;
    for i in 0..n {
        let nonzero = rows[i].iter().any(|&v| v != 0.0);
        matrix[i][i] = if nonzero { 1.0 } else { 0.0 };
        for j in (i + 1)..n {
            let s = cosine_similarity(rows[i], rows[j]);
            matrix[i][j] = s;
            matrix[j][i] = s;
            sum += s;
            let b = (((s + 1.0) / 2.0 * SIMILARITY_BINS as f64).floor() as usize)
                .min(SIMILARITY_BINS - 1);
            hist[b] += 1;
        }
    }
    let pairs = n * (n - 1) / 2;
    let width = 2.0 / SIMILARITY_BINS as f64;
    Ok(SimilarityReport {
        seed,
        indices,
        matrix,
        mean_off_diagonal: (pairs > 0).then(|| sum / pairs as f64),
        histogram: hist
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                lower: -1.0 + i as f64 * width,
                upper: -1.0 + (i + 1) as f64 * width,
                count,
            })
            .collect(),
    })
}
