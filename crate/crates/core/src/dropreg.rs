//! Loss-based drop regularisation for RoIs and detection queries.
//!
//! A drop mask zeroes the loss contribution of samples whose losses are large
//! enough to suggest a noisy pseudo label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiLossRecord {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub is_positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryLossRecord {
    pub cls_loss: f64,
    pub box_loss: f64,
    pub iou_loss: f64,
    /// Matched to a pseudo ground truth instance.
    pub is_foreground: bool,
}

/// `true` keeps the sample (`d_i = 1`), `false` drops it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask(pub Vec<bool>);

impl DropMask {
    pub fn all_kept(n: usize) -> Self {
        DropMask(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&d| d).count()
    }

    pub fn as_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&d| d as u8).collect()
    }
}

/// Which queries the percentile rule may drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropScope {
    /// Foreground queries only; background queries are always kept.
    #[default]
    Things,
    /// Foreground and background queries, each against its own percentile.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropParams {
    pub tau_cls: f64,
    pub tau_reg: f64,
    /// Percentile in `(0, 100]` for the query rule.
    pub percentile: f64,
    pub lambda: f64,
}

impl Default for DropParams {
    fn default() -> Self {
        DropParams {
            tau_cls: 4.0,
            tau_reg: 1.0,
            percentile: 90.0,
            lambda: 1.0,
        }
    }
}

impl DropParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("tau_cls", self.tau_cls),
            ("tau_reg", self.tau_reg),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(field, format!("{v} must be a finite non-negative number")));
            }
        }
        check_percentile(self.percentile)
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::param("percentile", format!("{p} is outside (0, 100]")));
    }
    Ok(())
}

fn check_loss(field: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("{field} must be finite and non-negative, got {v}")))
    }
}

impl RoiLossRecord {
    pub fn validate(&self) -> Result<()> {
        check_loss("cls_loss", self.cls_loss)?;
        check_loss("reg_loss", self.reg_loss)
    }
}

impl QueryLossRecord {
    pub fn validate(&self) -> Result<()> {
        check_loss("cls_loss", self.cls_loss)?;
        check_loss("box_loss", self.box_loss)?;
        check_loss("iou_loss", self.iou_loss)
    }
}

/// Keeps a RoI iff both its classification and regression losses are at or
/// below their thresholds.
pub fn roi_drop_mask(records: &[RoiLossRecord], tau_cls: f64, tau_reg: f64) -> DropMask {
    DropMask(
        records
            .iter()
            .map(|r| r.cls_loss <= tau_cls && r.reg_loss <= tau_reg)
            .collect(),
    )
}

/// `Σ d_i l_cls + λ Σ p*_i d_i l_reg`.
pub fn roi_masked_loss(records: &[RoiLossRecord], mask: &DropMask, lambda: f64) -> Result<f64> {
    if mask.len() != records.len() {
        return Err(Error::LengthMismatch {
            expected: records.len(),
            found: mask.len(),
        });
    }
    let (cls, reg) = records
        .iter()
        .zip(&mask.0)
        .filter(|(_, &keep)| keep)
        .fold((0.0, 0.0), |(cls, reg), (r, _)| {
            let reg_term = if r.is_positive { r.reg_loss } else { 0.0 };
            (cls + r.cls_loss, reg + reg_term)
        });
    Ok(cls + lambda * reg)
}

fn min_max_ones(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Min-max normalises classification losses separately over the foreground and
/// the background queries of a batch. Constant groups normalise to 1.
pub fn batch_normalize_query_losses(records: &[QueryLossRecord]) -> Vec<f64> {
    let mut out = vec![0.0; records.len()];
    for fg in [true, false] {
        let idx: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].is_foreground == fg)
            .collect();
        let losses: Vec<f64> = idx.iter().map(|&i| records[i].cls_loss).collect();
        for (&i, v) in idx.iter().zip(min_max_ones(&losses)) {
            out[i] = v;
        }
    }
    out
}

/// Nearest-rank percentile: the `⌈p·n/100⌉`-th smallest value (1-indexed).
pub fn nearest_rank_percentile(values: &[f64], percentile: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile * n as f64) / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

/// Percentile drop mask over normalised classification losses.
///
/// A query in a droppable group is kept iff its normalised loss is at or below
/// the group's percentile loss. A group with no members is vacuous.
pub fn query_drop_mask(
    records: &[QueryLossRecord],
    normalized: &[f64],
    percentile: f64,
    scope: DropScope,
) -> Result<DropMask> {
    check_percentile(percentile)?;
    if normalized.len() != records.len() {
        return Err(Error::LengthMismatch {
            expected: records.len(),
            found: normalized.len(),
        });
    }
    let groups: &[bool] = match scope {
        DropScope::Things => &[true],
        DropScope::Both => &[true, false],
    };
    let mut mask = DropMask::all_kept(records.len());
    for &fg in groups {
        let members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].is_foreground == fg)
            .collect();
        let losses: Vec<f64> = members.iter().map(|&i| normalized[i]).collect();
        if let Some(threshold) = nearest_rank_percentile(&losses, percentile) {
            for &i in &members {
                mask.0[i] = normalized[i] <= threshold;
            }
        }
    }
    Ok(mask)
}

/// `Σ d_i [l_cls + p*_i l_box + p*_i l_iou]` with `p*_i` the foreground flag.
pub fn hungarian_masked_loss(records: &[QueryLossRecord], mask: &DropMask) -> Result<f64> {
    if mask.len() != records.len() {
        return Err(Error::LengthMismatch {
            expected: records.len(),
            found: mask.len(),
        });
    }
    Ok(records
        .iter()
        .zip(&mask.0)
        .filter(|(_, &keep)| keep)
        .map(|(r, _)| {
            if r.is_foreground {
                r.cls_loss + r.box_loss + r.iou_loss
            } else {
                r.cls_loss
            }
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub errors: usize,
    /// `None` for an empty bin.
    pub error_rate: Option<f64>,
}

/// Histogram of min-max normalised losses over `bins` equal intervals of
/// `[0, 1]` (the last one closed), with the error fraction of each bin.
pub fn loss_interval_stats(losses: &[f64], is_error: &[bool], bins: usize) -> Result<Vec<LossBin>> {
    if bins == 0 {
        return Err(Error::param("bins", "must be at least 1"));
    }
    if losses.len() != is_error.len() {
        return Err(Error::LengthMismatch {
            expected: losses.len(),
            found: is_error.len(),
        });
    }
    if let Some(v) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite loss {v}")));
    }
    let mut counts = vec![(0usize, 0usize); bins];
    for (v, &err) in min_max_ones(losses).into_iter().zip(is_error) {
        let b = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[b].0 += 1;
        counts[b].1 += err as usize;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, (count, errors))| LossBin {
            lower: i as f64 / bins as f64,
            upper: (i + 1) as f64 / bins as f64,
            count,
            errors,
            error_rate: (count > 0).then(|| errors as f64 / count as f64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roi(cls: f64, reg: f64, pos: bool) -> RoiLossRecord {
        RoiLossRecord { cls_loss: cls, reg_loss: reg, is_positive: pos }
    }

    fn query(cls: f64, fg: bool) -> QueryLossRecord {
        QueryLossRecord { cls_loss: cls, box_loss: 2.0, iou_loss: 3.0, is_foreground: fg }
    }

    #[test]
    fn roi_mask_examples() {
        let recs = [roi(0.0, 0.0, true), roi(5.0, 0.1, true), roi(4.0, 1.0, false)];
        assert_eq!(roi_drop_mask(&recs, 4.0, 1.0).0, vec![true, false, true]);
    }

    #[test]
    fn roi_loss_examples() {
        let pos = [roi(2.0, 3.0, true)];
        assert_eq!(roi_masked_loss(&pos, &DropMask(vec![false]), 1.0).unwrap(), 0.0);
        assert_eq!(roi_masked_loss(&pos, &DropMask(vec![true]), 1.0).unwrap(), 5.0);
        assert_eq!(roi_masked_loss(&pos, &DropMask(vec![true]), 0.5).unwrap(), 3.5);
        let neg = [roi(2.0, 3.0, false)];
        assert_eq!(roi_masked_loss(&neg, &DropMask(vec![true]), 1.0).unwrap(), 2.0);
        assert!(roi_masked_loss(&neg, &DropMask(vec![]), 1.0).is_err());
    }

    #[test]
    fn per_group_normalization() {
        let recs = [query(1.0, true), query(2.0, false), query(3.0, true), query(2.0, false)];
        assert_eq!(batch_normalize_query_losses(&recs), vec![0.0, 1.0, 1.0, 1.0]);

        let singles = [query(0.3, true), query(7.0, false)];
        assert_eq!(batch_normalize_query_losses(&singles), vec![1.0, 1.0]);

        let fg_only = [query(1.0, true), query(5.0, true)];
        assert_eq!(batch_normalize_query_losses(&fg_only), vec![0.0, 1.0]);
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
        assert_eq!(nearest_rank_percentile(&v, 90.0), Some(v[8]));
        assert_eq!(nearest_rank_percentile(&v, 100.0), Some(v[9]));
        assert_eq!(nearest_rank_percentile(&v, 0.1), Some(v[0]));
        assert_eq!(nearest_rank_percentile(&[], 50.0), None);
    }

    #[test]
    fn query_mask_drops_top_decile() {
        let recs: Vec<_> = (0..10).map(|i| query(0.05 + 0.1 * i as f64, true)).collect();
        let norm: Vec<f64> = recs.iter().map(|r| r.cls_loss).collect();
        let mask = query_drop_mask(&recs, &norm, 90.0, DropScope::Things).unwrap();
        assert_eq!(mask.kept(), 9);
        assert!(!mask.0[9]);
        let all = query_drop_mask(&recs, &norm, 100.0, DropScope::Things).unwrap();
        assert_eq!(all.kept(), 10);
    }

    #[test]
    fn background_never_dropped_for_things_scope() {
        let recs: Vec<_> = (0..5).map(|i| query(i as f64, false)).collect();
        let norm = batch_normalize_query_losses(&recs);
        let mask = query_drop_mask(&recs, &norm, 10.0, DropScope::Things).unwrap();
        assert_eq!(mask.kept(), 5);
        let both = query_drop_mask(&recs, &norm, 10.0, DropScope::Both).unwrap();
        assert_eq!(both.kept(), 1);
    }

    #[test]
    fn query_mask_param_errors() {
        let recs = [query(1.0, true)];
        assert!(query_drop_mask(&recs, &[1.0], 0.0, DropScope::Things).is_err());
        assert!(query_drop_mask(&recs, &[1.0], 101.0, DropScope::Things).is_err());
        assert!(query_drop_mask(&recs, &[], 90.0, DropScope::Things).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let fg = [QueryLossRecord { cls_loss: 1.0, box_loss: 2.0, iou_loss: 3.0, is_foreground: true }];
        assert_eq!(hungarian_masked_loss(&fg, &DropMask(vec![false])).unwrap(), 0.0);
        assert_eq!(hungarian_masked_loss(&fg, &DropMask(vec![true])).unwrap(), 6.0);
        let bg = [QueryLossRecord { is_foreground: false, ..fg[0] }];
        assert_eq!(hungarian_masked_loss(&bg, &DropMask(vec![true])).unwrap(), 1.0);
        assert!(hungarian_masked_loss(&bg, &DropMask(vec![true, true])).is_err());
    }

    #[test]
    fn interval_stats() {
        let bins = loss_interval_stats(&[0.0, 1.0], &[false, true], 2).unwrap();
        assert_eq!((bins[0].count, bins[0].error_rate), (1, Some(0.0)));
        assert_eq!((bins[1].count, bins[1].error_rate), (1, Some(1.0)));

        let flat = loss_interval_stats(&[3.0; 4], &[false; 4], 5).unwrap();
        assert_eq!(flat[4].count, 4);
        assert_eq!(flat[0].error_rate, None);
        assert_eq!(flat.iter().map(|b| b.count).sum::<usize>(), 4);

        assert!(loss_interval_stats(&[1.0], &[], 2).is_err());
        assert!(loss_interval_stats(&[1.0], &[true], 0).is_err());
    }

    #[test]
    fn params_defaults_and_ranges() {
        let d = DropParams::default();
        assert_eq!((d.tau_cls, d.tau_reg, d.percentile, d.lambda), (4.0, 1.0, 90.0, 1.0));
        assert!(d.validate().is_ok());
        assert!(DropParams { percentile: 0.0, ..d }.validate().is_err());
        assert!(DropParams { tau_cls: -1.0, ..d }.validate().is_err());
    }
}
