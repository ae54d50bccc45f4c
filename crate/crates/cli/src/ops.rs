//! Per-image operations shared by the single-file commands and the manifest runner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use weaklabel_core::activation::{ActivationStack, SourceKind};
use weaklabel_core::dropreg::{
    batch_normalize_query_losses, hungarian_masked_loss, nearest_rank_percentile,
    query_drop_mask, roi_drop_mask, roi_masked_loss, DropParams, DropScope, LossBin,
};
use weaklabel_core::evaluation::{is_localization_error, GtBox};
use weaklabel_core::geometry::{BBox, ScoredBox};
use weaklabel_core::io::{read_json, BoxRecord, LossRecord, PgtRecord};
use weaklabel_core::peaks::{extract_peaks, PeakParams, PeakPoint};
use weaklabel_core::pgt::{adaptive_pgt, top1_pgt, PgtBox};
use weaklabel_core::prompts::{
    assemble_prompts, cluster_instance_prompts, dense_grid, image_prompts_from_peaks, GridParams,
    PromptKind, PromptPoint,
};
use weaklabel_core::tensor::Tensor;

use crate::config::{LossField, RunConfig};

/// Loads a tensor as a map stack, optionally re-viewing it as `(-1, N, N)`.
pub fn load_stack(path: &Path, source: SourceKind, grid_n: Option<usize>) -> Result<ActivationStack> {
    let tensor = Tensor::read(path)?;
    let stack = match grid_n {
        Some(n) => {
            let flat = tensor.data.iter().map(|&v| v as f64).collect();
            ActivationStack::from_flat(flat, n, source)?
        }
        None => ActivationStack::from_tensor(&tensor, source)?,
    };
    Ok(stack)
}

/// Resizes to the image (when given), normalises each map and extracts peaks.
pub fn peaks_from_stacks(
    stacks: &[ActivationStack],
    image_size: Option<(usize, usize)>,
    params: &PeakParams,
) -> Result<Vec<PeakPoint>> {
    if stacks.is_empty() {
        return Ok(Vec::new());
    }
    let prepared = stacks
        .iter()
        .map(|s| {
            let resized = match image_size {
                Some((w, h)) => s.resize_to_image(w, h)?,
                None => s.clone(),
            };
            Ok(resized.normalized())
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = ActivationStack::concat(&prepared)?;
    Ok(extract_peaks(&stack, params))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePeaks {
    /// From cross-attention maps.
    pub instance: Vec<PeakPoint>,
    /// From coarse and fine CAMs, in that map order.
    pub semantic: Vec<PeakPoint>,
}

pub fn peaks_for_image(
    tensors: &BTreeMap<SourceKind, PathBuf>,
    grid_n: Option<usize>,
    image_size: (usize, usize),
    params: &PeakParams,
) -> Result<ImagePeaks> {
    if tensors.is_empty() {
        bail!("no activation tensors given");
    }
    let load = |kinds: &[SourceKind]| -> Result<Vec<ActivationStack>> {
        kinds
            .iter()
            .filter_map(|k| tensors.get(k).map(|p| (k, p)))
            .map(|(k, p)| {
                load_stack(p, *k, grid_n).with_context(|| format!("tensors.{}", k.as_str()))
            })
            .collect()
    };
    let instance = load(&[SourceKind::CrossAttention])?;
    let semantic = load(&[SourceKind::CoarseCam, SourceKind::FineCam])?;
    Ok(ImagePeaks {
        instance: peaks_from_stacks(&instance, Some(image_size), params)?,
        semantic: peaks_from_stacks(&semantic, Some(image_size), params)?,
    })
}

/// Dense grid, clustered instance peaks and semantic peaks for one image.
pub fn prompts_for_image(
    peaks: &ImagePeaks,
    map_size: (usize, usize),
    image_size: (usize, usize),
    grid: GridParams,
    cluster_radius: f64,
) -> Result<Vec<PromptPoint>> {
    let spatial = dense_grid(image_size.0, image_size.1, grid)?;
    let instance = image_prompts_from_peaks(&peaks.instance, PromptKind::Instance, map_size, image_size)
        .context("instance peaks")?;
    let instance = cluster_instance_prompts(&instance, cluster_radius)?;
    let semantic = image_prompts_from_peaks(&peaks.semantic, PromptKind::Semantic, map_size, image_size)
        .context("semantic peaks")?;
    Ok(assemble_prompts(&spatial, &instance, &semantic))
}

/// Stand-in for the external segmenter: every prompt becomes a square box of
/// side `box_size` around it, clipped to the image, scored with the prompt
/// value and repeated for each image label (label 0 without labels).
pub fn mock_sam(
    prompts: &[PromptPoint],
    labels: &[i64],
    box_size: f64,
    image_size: (usize, usize),
) -> Vec<ScoredBox> {
    let default_label = [0];
    let labels = if labels.is_empty() { &default_label[..] } else { labels };
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    labels
        .iter()
        .flat_map(|&label| {
            prompts.iter().map(move |p| ScoredBox {
                label,
                bbox: BBox::centered(p.x, p.y, box_size, w, h),
                score: p.value,
            })
        })
        .collect()
}

pub fn read_box_records(path: &Path) -> Result<Vec<BoxRecord>> {
    Ok(read_json(path)?)
}

pub fn read_scored_boxes(path: &Path) -> Result<Vec<ScoredBox>> {
    read_box_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.scored().with_context(|| format!("{}[{i}]", path.display())))
        .collect()
}

pub fn read_plain_boxes(path: &Path) -> Result<Vec<BBox>> {
    read_box_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.bbox().with_context(|| format!("{}[{i}]", path.display())))
        .collect()
}

/// Ground truth; ids in the file are replaced by `image_id` when given.
pub fn read_gt(path: &Path, image_id: Option<&str>) -> Result<Vec<GtBox>> {
    read_box_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut g = r.gt("").with_context(|| format!("{}[{i}]", path.display()))?;
            if let Some(id) = image_id {
                g.image_id = id.to_string();
            }
            Ok(g)
        })
        .collect()
}

pub fn read_pgt(path: &Path) -> Result<Vec<(Option<String>, PgtBox)>> {
    let records: Vec<PgtRecord> = read_json(path)?;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let b = r.to_pgt().with_context(|| format!("{}[{i}]", path.display()))?;
            Ok((r.image_id.clone(), b))
        })
        .collect()
}

pub fn pgt_for_image(boxes: &[ScoredBox], labels: &[i64], config: &RunConfig) -> Result<Vec<PgtBox>> {
    Ok(if config.top1 {
        top1_pgt(boxes, labels)?
    } else {
        adaptive_pgt(boxes, labels, &config.pgt)?
    })
}

pub fn read_loss_records(path: &Path) -> Result<Vec<LossRecord>> {
    Ok(read_json(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiDropReport {
    pub total: usize,
    pub kept: usize,
    pub tau_cls: f64,
    pub tau_reg: f64,
    pub lambda: f64,
    pub loss: f64,
    pub unmasked_loss: f64,
    pub mask: Vec<u8>,
}

pub fn roi_drop_report(records: &[LossRecord], params: &DropParams) -> Result<RoiDropReport> {
    let rois = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_roi().with_context(|| format!("records[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let mask = roi_drop_mask(&rois, params.tau_cls, params.tau_reg);
    let all = weaklabel_core::DropMask::all_kept(rois.len());
    Ok(RoiDropReport {
        total: rois.len(),
        kept: mask.kept(),
        tau_cls: params.tau_cls,
        tau_reg: params.tau_reg,
        lambda: params.lambda,
        loss: roi_masked_loss(&rois, &mask, params.lambda)?,
        unmasked_loss: roi_masked_loss(&rois, &all, params.lambda)?,
        mask: mask.as_bits(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDropReport {
    pub total: usize,
    pub foreground: usize,
    pub kept: usize,
    pub percentile: f64,
    pub scope: DropScope,
    /// Foreground percentile loss; `None` without foreground queries.
    pub foreground_threshold: Option<f64>,
    pub loss: f64,
    pub unmasked_loss: f64,
    pub normalized_cls: Vec<f64>,
    pub mask: Vec<u8>,
}

pub fn query_drop_report(records: &[LossRecord], percentile: f64, scope: DropScope) -> Result<QueryDropReport> {
    let queries = records
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_query().with_context(|| format!("records[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let normalized = batch_normalize_query_losses(&queries);
    let mask = query_drop_mask(&queries, &normalized, percentile, scope)?;
    let fg: Vec<f64> = queries
        .iter()
        .zip(&normalized)
        .filter(|(q, _)| q.is_foreground)
        .map(|(_, &v)| v)
        .collect();
    let all = weaklabel_core::DropMask::all_kept(queries.len());
    Ok(QueryDropReport {
        total: queries.len(),
        foreground: fg.len(),
        kept: mask.kept(),
        percentile,
        scope,
        foreground_threshold: nearest_rank_percentile(&fg, percentile),
        loss: hungarian_masked_loss(&queries, &mask)?,
        unmasked_loss: hungarian_masked_loss(&queries, &all)?,
        normalized_cls: normalized,
        mask: mask.as_bits(),
    })
}

pub fn loss_values(records: &[LossRecord], field: LossField) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| match field {
            LossField::Cls => Ok(r.cls_loss),
            LossField::Reg => r
                .reg_loss
                .with_context(|| format!("records[{i}] has no reg_loss")),
        })
        .collect()
}

/// Error flag of each record: its explicit `is_error`, otherwise whether its
/// box misses every same-class ground-truth box at `iou_threshold`.
pub fn error_flags(records: &[LossRecord], gt: Option<&[GtBox]>, iou_threshold: f64) -> Result<Vec<bool>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if let Some(e) = r.is_error {
                return Ok(e);
            }
            let gt = gt.with_context(|| format!("records[{i}] has no is_error flag and no ground truth was given"))?;
            let (label, bbox) = r
                .labeled_box()
                .with_context(|| format!("records[{i}]"))?
                .with_context(|| format!("records[{i}] has neither is_error nor a labelled box"))?;
            let image_gt: Vec<GtBox> = match &r.image_id {
                Some(id) => gt.iter().filter(|g| &g.image_id == id).cloned().collect(),
                None => gt.to_vec(),
            };
            Ok(is_localization_error(label, &bbox, &image_gt, iou_threshold))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStatsReport {
    pub field: LossField,
    pub total: usize,
    pub errors: usize,
    pub bins: Vec<LossBin>,
}

pub fn read_features(path: &Path) -> Result<Array2<f64>> {
    let t = Tensor::read(path)?;
    if t.dims.len() != 2 {
        bail!("features must be a rank-2 tensor (vectors x dims), got {:?}", t.dims);
    }
    let data = t.data.iter().map(|&v| v as f64).collect();
    Ok(Array2::from_shape_vec((t.dims[0], t.dims[1]), data)?)
}
