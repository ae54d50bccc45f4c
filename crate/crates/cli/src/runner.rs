//! Manifest-driven batch execution of one pipeline stage.
//!
//! Each stage writes per-image files to `<out-dir>/<stage>/` and a
//! `summary.json` next to them. Aggregating stages also write `report.json`.
//! Later stages pick up earlier outputs from the same output directory when
//! the manifest does not name an input explicitly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use weaklabel_core::dropreg::loss_interval_stats;
use weaklabel_core::evaluation::{
    corloc, feature_cosine_similarity, pgt_error_rate, recall_at_iou, ByImage, GtBox,
};
use weaklabel_core::geometry::{BBox, ScoredBox};
use weaklabel_core::io::{read_json, write_json, BoxRecord, PgtRecord};
use weaklabel_core::peaks::PeakPoint;
use weaklabel_core::pgt::PgtBox;

use crate::config::RunConfig;
use crate::manifest::{Manifest, ManifestEntry};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Peaks,
    Prompts,
    Pgt,
    DropmaskRoi,
    DropmaskQuery,
    EvalRecall,
    EvalCorloc,
    EvalPgt,
    LossStats,
    Sim,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Peaks,
        Stage::Prompts,
        Stage::Pgt,
        Stage::DropmaskRoi,
        Stage::DropmaskQuery,
        Stage::EvalRecall,
        Stage::EvalCorloc,
        Stage::EvalPgt,
        Stage::LossStats,
        Stage::Sim,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Peaks => "peaks",
            Stage::Prompts => "prompts",
            Stage::Pgt => "pgt",
            Stage::DropmaskRoi => "dropmask-roi",
            Stage::DropmaskQuery => "dropmask-query",
            Stage::EvalRecall => "eval-recall",
            Stage::EvalCorloc => "eval-corloc",
            Stage::EvalPgt => "eval-pgt",
            Stage::LossStats => "loss-stats",
            Stage::Sim => "sim",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| anyhow!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// After the prompts stage, also write mock segmenter boxes to `sam/`.
    pub mock_sam: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryStatus {
    pub image_id: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stage: String,
    pub config: Value,
    pub total: usize,
    pub failed: usize,
    pub entries: Vec<EntryStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Value>,
}

impl Summary {
    pub fn success(&self) -> bool {
        self.failed == 0
    }
}

/// Inputs kept from each image for stages that aggregate over the batch.
enum Pooled {
    None,
    Recall(Vec<BBox>, Vec<BBox>),
    Corloc(Vec<ScoredBox>, Vec<GtBox>),
    ErrorRate(Vec<PgtBox>, Vec<GtBox>),
    Losses(Vec<f64>, Vec<bool>),
}

struct EntryOutput {
    outputs: Vec<PathBuf>,
    metrics: Option<Value>,
    pooled: Pooled,
}

impl EntryOutput {
    fn files(outputs: Vec<PathBuf>, metrics: Value) -> Self {
        EntryOutput {
            outputs,
            metrics: Some(metrics),
            pooled: Pooled::None,
        }
    }

    fn pooled(pooled: Pooled) -> Self {
        EntryOutput {
            outputs: Vec::new(),
            metrics: None,
            pooled,
        }
    }
}

struct Ctx<'a> {
    out_dir: &'a Path,
    config: &'a RunConfig,
    options: RunOptions,
}

impl Ctx<'_> {
    fn stage_file(&self, stage: &str, image_id: &str, suffix: &str) -> PathBuf {
        self.out_dir.join(stage).join(format!("{image_id}{suffix}.json"))
    }

    /// The manifest path when given, otherwise an earlier stage's output.
    fn input(&self, explicit: &Option<PathBuf>, stage: &str, image_id: &str, suffix: &str) -> PathBuf {
        explicit
            .clone()
            .unwrap_or_else(|| self.stage_file(stage, image_id, suffix))
    }
}

fn required<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| anyhow!("manifest field `{field}` is required for this stage"))
}

fn run_entry(stage: Stage, entry: &ManifestEntry, ctx: &Ctx<'_>) -> Result<EntryOutput> {
    let id = entry.image_id.as_str();
    let size = (entry.image_width, entry.image_height);
    let cfg = ctx.config;
    match stage {
        Stage::Peaks => {
            let peaks = ops::peaks_for_image(&entry.tensors, cfg.grid_n, size, &cfg.peaks)?;
            let inst = ctx.stage_file("peaks", id, ".instance");
            let sem = ctx.stage_file("peaks", id, ".semantic");
            write_json(&inst, &peaks.instance)?;
            write_json(&sem, &peaks.semantic)?;
            Ok(EntryOutput::files(
                vec![inst, sem],
                json!({"instance": peaks.instance.len(), "semantic": peaks.semantic.len()}),
            ))
        }
        Stage::Prompts => {
            let inst_path = ctx.input(&entry.peaks_instance, "peaks", id, ".instance");
            let sem_path = ctx.input(&entry.peaks_semantic, "peaks", id, ".semantic");
            let peaks = ops::ImagePeaks {
                instance: read_json::<Vec<PeakPoint>>(&inst_path).context("peaks_instance")?,
                semantic: read_json::<Vec<PeakPoint>>(&sem_path).context("peaks_semantic")?,
            };
            let prompts = ops::prompts_for_image(&peaks, size, size, cfg.grid, cfg.cluster_radius)?;
            let path = ctx.stage_file("prompts", id, "");
            write_json(&path, &prompts)?;
            let mut outputs = vec![path];
            if ctx.options.mock_sam {
                let labels = entry.labels.as_deref().unwrap_or(&[]);
                let boxes = ops::mock_sam(&prompts, labels, cfg.mock_box_size, size);
                let records: Vec<BoxRecord> = boxes.iter().map(BoxRecord::from_scored).collect();
                let sam = ctx.stage_file("sam", id, "");
                write_json(&sam, &records)?;
                outputs.push(sam);
            }
            Ok(EntryOutput::files(outputs, json!({"prompts": prompts.len()})))
        }
        Stage::Pgt => {
            let labels = entry
                .labels
                .as_deref()
                .ok_or_else(|| anyhow!("manifest field `labels` is required for this stage"))?;
            let boxes_path = ctx.input(&entry.boxes, "sam", id, "");
            let boxes = ops::read_scored_boxes(&boxes_path).context("boxes")?;
            let pgt = ops::pgt_for_image(&boxes, labels, cfg)?;
            let records: Vec<PgtRecord> = pgt.iter().map(PgtRecord::from).collect();
            let path = ctx.stage_file("pgt", id, "");
            write_json(&path, &records)?;
            let fallback = pgt.iter().filter(|b| b.fallback).count();
            Ok(EntryOutput::files(
                vec![path],
                json!({"input_boxes": boxes.len(), "pgt": pgt.len(), "fallback": fallback}),
            ))
        }
        Stage::DropmaskRoi => {
            let records = ops::read_loss_records(required("records", &entry.records)?).context("records")?;
            let report = ops::roi_drop_report(&records, &cfg.drop)?;
            let path = ctx.stage_file("dropmask-roi", id, "");
            write_json(&path, &report)?;
            Ok(EntryOutput::files(
                vec![path],
                json!({"total": report.total, "kept": report.kept, "loss": report.loss}),
            ))
        }
        Stage::DropmaskQuery => {
            let records = ops::read_loss_records(required("records", &entry.records)?).context("records")?;
            let report = ops::query_drop_report(&records, cfg.drop.percentile, cfg.scope)?;
            let path = ctx.stage_file("dropmask-query", id, "");
            write_json(&path, &report)?;
            Ok(EntryOutput::files(
                vec![path],
                json!({"total": report.total, "kept": report.kept, "loss": report.loss}),
            ))
        }
        Stage::EvalRecall => {
            let props_path = ctx.input(&entry.proposals, "sam", id, "");
            let props = ops::read_plain_boxes(&props_path).context("proposals")?;
            let gt = ops::read_plain_boxes(required("gt", &entry.gt)?).context("gt")?;
            Ok(EntryOutput::pooled(Pooled::Recall(props, gt)))
        }
        Stage::EvalCorloc => {
            let dets_path = entry
                .detections
                .clone()
                .or_else(|| entry.boxes.clone())
                .unwrap_or_else(|| ctx.stage_file("sam", id, ""));
            let dets = ops::read_scored_boxes(&dets_path).context("detections")?;
            let gt = ops::read_gt(required("gt", &entry.gt)?, Some(id)).context("gt")?;
            Ok(EntryOutput::pooled(Pooled::Corloc(dets, gt)))
        }
        Stage::EvalPgt => {
            let pgt_path = ctx.input(&entry.pgt, "pgt", id, "");
            let pgt = ops::read_pgt(&pgt_path)
                .context("pgt")?
                .into_iter()
                .map(|(_, b)| b)
                .collect();
            let gt = ops::read_gt(required("gt", &entry.gt)?, Some(id)).context("gt")?;
            Ok(EntryOutput::pooled(Pooled::ErrorRate(pgt, gt)))
        }
        Stage::LossStats => {
            let records = ops::read_loss_records(required("records", &entry.records)?).context("records")?;
            let gt = match &entry.gt {
                Some(p) => Some(ops::read_gt(p, Some(id)).context("gt")?),
                None => None,
            };
            // records of one image are matched against that image's ground truth
            let records: Vec<_> = records
                .into_iter()
                .map(|mut r| {
                    r.image_id = Some(id.to_string());
                    r
                })
                .collect();
            let losses = ops::loss_values(&records, cfg.field)?;
            let errors = ops::error_flags(&records, gt.as_deref(), cfg.error_iou)?;
            Ok(EntryOutput::pooled(Pooled::Losses(losses, errors)))
        }
        Stage::Sim => {
            let features = ops::read_features(required("features", &entry.features)?).context("features")?;
            let n = features.nrows();
            let sample = if cfg.sample > n {
                warn!("{id}: sampling all {n} feature vectors (requested {})", cfg.sample);
                n
            } else {
                cfg.sample
            };
            let report = feature_cosine_similarity(&features, sample, cfg.seed)?;
            let path = ctx.stage_file("sim", id, "");
            write_json(&path, &report)?;
            Ok(EntryOutput::files(
                vec![path],
                json!({"sampled": sample, "mean_off_diagonal": report.mean_off_diagonal}),
            ))
        }
    }
}

fn aggregate(stage: Stage, pooled: Vec<(&str, Pooled)>, config: &RunConfig) -> Result<Option<Value>> {
    let value = match stage {
        Stage::EvalRecall => {
            let mut props: ByImage<BBox> = ByImage::new();
            let mut gt: ByImage<BBox> = ByImage::new();
            for (id, p) in pooled {
                if let Pooled::Recall(p, g) = p {
                    props.insert(id.to_string(), p);
                    gt.insert(id.to_string(), g);
                }
            }
            let reports = config
                .recall_iou
                .iter()
                .map(|&t| recall_at_iou(&props, &gt, t))
                .collect::<weaklabel_core::Result<Vec<_>>>()?;
            json!({ "recall": reports })
        }
        Stage::EvalCorloc => {
            let mut dets: ByImage<ScoredBox> = ByImage::new();
            let mut gt: ByImage<GtBox> = ByImage::new();
            for (id, p) in pooled {
                if let Pooled::Corloc(d, g) = p {
                    dets.insert(id.to_string(), d);
                    gt.insert(id.to_string(), g);
                }
            }
            json!({ "corloc": corloc(&dets, &gt), "images": gt.len() })
        }
        Stage::EvalPgt => {
            let mut pgt: ByImage<PgtBox> = ByImage::new();
            let mut gt: ByImage<GtBox> = ByImage::new();
            for (id, p) in pooled {
                if let Pooled::ErrorRate(b, g) = p {
                    pgt.insert(id.to_string(), b);
                    gt.insert(id.to_string(), g);
                }
            }
            serde_json::to_value(pgt_error_rate(&pgt, &gt, config.error_iou)?)?
        }
        Stage::LossStats => {
            let mut losses = Vec::new();
            let mut errors = Vec::new();
            for (_, p) in pooled {
                if let Pooled::Losses(l, e) = p {
                    losses.extend(l);
                    errors.extend(e);
                }
            }
            if losses.is_empty() {
                Value::Null
            } else {
                let bins = loss_interval_stats(&losses, &errors, config.bins)?;
                serde_json::to_value(ops::LossStatsReport {
                    field: config.field,
                    total: losses.len(),
                    errors: errors.iter().filter(|&&e| e).count(),
                    bins,
                })?
            }
        }
        _ => return Ok(None),
    };
    Ok(Some(value))
}

fn relative(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Runs `stage` for every manifest entry with `config.workers` threads.
///
/// Entries fail independently; the summary (and `report.json` for
/// aggregating stages) is written under `<out_dir>/<stage>/`.
pub fn run_stage(
    stage: Stage,
    manifest: &Manifest,
    config: &RunConfig,
    out_dir: &Path,
    options: RunOptions,
) -> Result<Summary> {
    let ctx = Ctx {
        out_dir,
        config,
        options,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;
    let results: Vec<Result<EntryOutput>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| run_entry(stage, e, &ctx))
            .collect()
    });

    let mut entries = Vec::with_capacity(results.len());
    let mut pooled = Vec::new();
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(out) => {
                info!("{stage}: {} ok", entry.image_id);
                entries.push(EntryStatus {
                    image_id: entry.image_id.clone(),
                    status: "ok".into(),
                    error: None,
                    outputs: out.outputs.iter().map(|p| relative(p, out_dir)).collect(),
                    metrics: out.metrics,
                });
                pooled.push((entry.image_id.as_str(), out.pooled));
            }
            Err(e) => {
                warn!("{stage}: {} failed: {e:#}", entry.image_id);
                entries.push(EntryStatus {
                    image_id: entry.image_id.clone(),
                    status: "failed".into(),
                    error: Some(format!("{}: {e:#}", entry.image_id)),
                    outputs: Vec::new(),
                    metrics: None,
                });
            }
        }
    }

    let stage_dir = out_dir.join(stage.name());
    let aggregate = aggregate(stage, pooled, config)?;
    if let Some(report) = &aggregate {
        write_json(stage_dir.join("report.json"), report)?;
    }
    let failed = entries.iter().filter(|e| e.status != "ok").count();
    let summary = Summary {
        stage: stage.name().to_string(),
        config: config.settings_json(),
        total: entries.len(),
        failed,
        entries,
        aggregate,
    };
    write_json(stage_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
