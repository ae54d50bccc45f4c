use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};

use weaklabel::config::{read_config_file, validate_config, ConfigError, RunConfig};
use weaklabel::manifest::Manifest;
use weaklabel::ops;
use weaklabel::runner::{run_stage, RunOptions, Stage};
use weaklabel_core::activation::SourceKind;
use weaklabel_core::evaluation::{
    corloc, feature_cosine_similarity, group_by_image, pgt_error_rate, recall_at_iou, ByImage,
};
use weaklabel_core::geometry::{BBox, ScoredBox};
use weaklabel_core::io::{read_json, to_json_string, BoxRecord, PgtRecord};
use weaklabel_core::peaks::PeakPoint;
use weaklabel_core::pgt::PgtBox;

#[derive(Parser)]
#[command(name = "weaklabel", version, about = "Weakly supervised pseudo-label pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Batch mode: run the stage for every entry of a manifest.
#[derive(Args, Default)]
struct Batch {
    /// Manifest JSON listing one entry per image.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Flat JSON object of settings; flags take priority.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root for batch mode.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Images processed in parallel.
    #[arg(long)]
    workers: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Peak points of activation maps.
    Peaks {
        #[arg(long)]
        tensor: Option<PathBuf>,
        #[arg(long, value_parser = parse_source, default_value = "cross_attention")]
        source: SourceKind,
        /// Re-view the tensor as (-1, N, N) maps.
        #[arg(long)]
        grid_n: Option<u64>,
        #[arg(long, requires = "image_h")]
        image_w: Option<usize>,
        #[arg(long, requires = "image_w")]
        image_h: Option<usize>,
        #[arg(long)]
        kernel: Option<u64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Point prompts from a dense grid and peak files.
    Prompts {
        #[arg(long)]
        peaks_semantic: Option<PathBuf>,
        #[arg(long)]
        peaks_instance: Option<PathBuf>,
        #[arg(long)]
        grid_s: Option<u64>,
        #[arg(long)]
        image_w: Option<usize>,
        #[arg(long)]
        image_h: Option<usize>,
        /// Size of the maps the peaks come from; defaults to the image size.
        #[arg(long, requires = "map_h")]
        map_w: Option<usize>,
        #[arg(long, requires = "map_w")]
        map_h: Option<usize>,
        #[arg(long)]
        cluster_radius: Option<f64>,
        /// Image labels used by the mock segmenter.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<i64>,
        #[arg(long)]
        mock_box_size: Option<f64>,
        /// Write one mock segmenter box per prompt to this file.
        #[arg(long)]
        mock_sam_out: Option<PathBuf>,
        /// In batch mode, also write mock segmenter boxes to `sam/`.
        #[arg(long)]
        mock_sam: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Adaptive pseudo ground truth from scored boxes.
    Pgt {
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Vec<i64>,
        #[arg(long)]
        tau_s: Option<f64>,
        #[arg(long)]
        tau_o: Option<f64>,
        #[arg(long)]
        no_fallback: bool,
        /// Keep only the top-scoring box per class.
        #[arg(long)]
        top1: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Two-stage detector drop mask.
    DropmaskRoi {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        tau_cls: Option<f64>,
        #[arg(long)]
        tau_reg: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Query-based detector drop mask.
    DropmaskQuery {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Error rate per loss interval.
    LossStats {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        bins: Option<u64>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Class-agnostic proposal recall.
    EvalRecall {
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        iou: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Correct localisation rate.
    EvalCorloc {
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Localisation error rate of pseudo ground truth.
    EvalPgt {
        #[arg(long)]
        pgt: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Cosine similarity of sampled feature vectors.
    Sim {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        sample: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
}

fn parse_source(s: &str) -> Result<SourceKind, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| "expected cross_attention, coarse_cam or fine_cam".to_string())
}

/// Flag values that take part in configuration resolution.
#[derive(Default)]
struct Flags(Map<String, Value>);

impl Flags {
    fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("plain data"));
        }
        self
    }

    fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        self.set(key, on.then_some(true))
    }
}

enum Failure {
    Usage(String),
    Config(Vec<ConfigError>),
    Run(anyhow::Error),
    Entries(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<weaklabel_core::Error> for Failure {
    fn from(e: weaklabel_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn resolve(batch: &Batch, flags: &mut Flags) -> Result<RunConfig, Failure> {
    flags.set("workers", batch.workers);
    let file = match &batch.config {
        Some(p) => read_config_file(p).map_err(Failure::Config)?,
        None => Map::new(),
    };
    validate_config(&file, &flags.0).map_err(Failure::Config)
}

fn need<'a, T>(name: &str, value: &'a Option<T>) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("--{name} is required without --manifest")))
}

fn emit<T: Serialize + ?Sized>(out: &Option<PathBuf>, value: &T) -> Result<(), Failure> {
    match out {
        Some(p) => weaklabel_core::io::write_json(p, value)?,
        None => std::io::stdout()
            .write_all(to_json_string(value).as_bytes())
            .context("writing to stdout")?,
    }
    Ok(())
}

fn run_batch(stage: Stage, batch: &Batch, config: &RunConfig, options: RunOptions) -> Result<(), Failure> {
    let manifest_path = batch.manifest.as_ref().expect("checked by caller");
    let out_dir = batch
        .out_dir
        .as_ref()
        .ok_or_else(|| Failure::Usage("--out-dir is required with --manifest".into()))?;
    let manifest = Manifest::load(manifest_path)?;
    info!("{stage}: {} entries, {} workers", manifest.entries.len(), config.workers);
    let summary = run_stage(stage, &manifest, config, out_dir, options)?;
    eprintln!(
        "{stage}: {} ok, {} failed ({})",
        summary.total - summary.failed,
        summary.failed,
        out_dir.join(stage.name()).join("summary.json").display()
    );
    if summary.success() {
        Ok(())
    } else {
        Err(Failure::Entries(summary.failed))
    }
}

/// Records grouped by their `image_id` (missing ids share the empty id).
fn grouped_boxes(path: &Path) -> Result<ByImage<BoxRecord>> {
    let mut out = ByImage::new();
    for r in ops::read_box_records(path)? {
        out.entry(r.image_id.clone().unwrap_or_default())
            .or_insert_with(Vec::new)
            .push(r);
    }
    Ok(out)
}

fn plain_by_image(path: &Path) -> Result<ByImage<BBox>> {
    grouped_boxes(path)?
        .into_iter()
        .map(|(id, rs)| Ok((id, rs.iter().map(|r| r.bbox()).collect::<weaklabel_core::Result<_>>()?)))
        .collect()
}

fn scored_by_image(path: &Path) -> Result<ByImage<ScoredBox>> {
    grouped_boxes(path)?
        .into_iter()
        .map(|(id, rs)| Ok((id, rs.iter().map(|r| r.scored()).collect::<weaklabel_core::Result<_>>()?)))
        .collect()
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Peaks { tensor, source, grid_n, image_w, image_h, kernel, tau, out, batch } => {
            let mut flags = Flags::default();
            flags.set("grid-n", grid_n).set("kernel", kernel).set("tau", tau);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::Peaks, &batch, &config, RunOptions::default());
            }
            let stack = ops::load_stack(need("tensor", &tensor)?, source, config.grid_n)?;
            let size = image_w.zip(image_h);
            let peaks = ops::peaks_from_stacks(&[stack], size, &config.peaks)?;
            emit(&out, &peaks)
        }
        Command::Prompts {
            peaks_semantic,
            peaks_instance,
            grid_s,
            image_w,
            image_h,
            map_w,
            map_h,
            cluster_radius,
            labels,
            mock_box_size,
            mock_sam_out,
            mock_sam,
            out,
            batch,
        } => {
            let mut flags = Flags::default();
            flags
                .set("grid-s", grid_s)
                .set("cluster-radius", cluster_radius)
                .set("mock-box-size", mock_box_size);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::Prompts, &batch, &config, RunOptions { mock_sam });
            }
            let image = (*need("image-w", &image_w)?, *need("image-h", &image_h)?);
            let map = map_w.zip(map_h).unwrap_or(image);
            let load = |p: &Option<PathBuf>| -> Result<Vec<PeakPoint>> {
                p.as_ref().map_or(Ok(Vec::new()), |p| Ok(read_json(p)?))
            };
            let peaks = ops::ImagePeaks {
                instance: load(&peaks_instance).context("--peaks-instance")?,
                semantic: load(&peaks_semantic).context("--peaks-semantic")?,
            };
            let prompts = ops::prompts_for_image(&peaks, map, image, config.grid, config.cluster_radius)?;
            if let Some(path) = &mock_sam_out {
                let boxes = ops::mock_sam(&prompts, &labels, config.mock_box_size, image);
                let records: Vec<BoxRecord> = boxes.iter().map(BoxRecord::from_scored).collect();
                weaklabel_core::io::write_json(path, &records)?;
            }
            emit(&out, &prompts)
        }
        Command::Pgt { boxes, labels, tau_s, tau_o, no_fallback, top1, out, batch } => {
            let mut flags = Flags::default();
            flags
                .set("tau-s", tau_s)
                .set("tau-o", tau_o)
                .switch("no-fallback", no_fallback)
                .switch("top1", top1);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::Pgt, &batch, &config, RunOptions::default());
            }
            let grouped = scored_by_image(need("boxes", &boxes)?)?;
            let mut records = Vec::new();
            for (id, group) in &grouped {
                for b in ops::pgt_for_image(group, &labels, &config)? {
                    let mut r = PgtRecord::from(&b);
                    r.image_id = (!id.is_empty()).then(|| id.clone());
                    records.push(r);
                }
            }
            emit(&out, &records)
        }
        Command::DropmaskRoi { records, tau_cls, tau_reg, lambda, out, batch } => {
            let mut flags = Flags::default();
            flags.set("tau-cls", tau_cls).set("tau-reg", tau_reg).set("lambda", lambda);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::DropmaskRoi, &batch, &config, RunOptions::default());
            }
            let records = ops::read_loss_records(need("records", &records)?)?;
            emit(&out, &ops::roi_drop_report(&records, &config.drop)?)
        }
        Command::DropmaskQuery { records, percentile, scope, out, batch } => {
            let mut flags = Flags::default();
            flags.set("percentile", percentile).set("scope", scope);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::DropmaskQuery, &batch, &config, RunOptions::default());
            }
            let records = ops::read_loss_records(need("records", &records)?)?;
            emit(&out, &ops::query_drop_report(&records, config.drop.percentile, config.scope)?)
        }
        Command::LossStats { records, field, bins, gt, iou_thresh, out, batch } => {
            let mut flags = Flags::default();
            flags.set("field", field).set("bins", bins).set("error-iou", iou_thresh);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::LossStats, &batch, &config, RunOptions::default());
            }
            let records = ops::read_loss_records(need("records", &records)?)?;
            let gt = gt.as_deref().map(|p| ops::read_gt(p, None)).transpose()?;
            let losses = ops::loss_values(&records, config.field)?;
            let errors = ops::error_flags(&records, gt.as_deref(), config.error_iou)?;
            if losses.is_empty() {
                return Err(Failure::Run(anyhow!("no loss records")));
            }
            let bins = weaklabel_core::dropreg::loss_interval_stats(&losses, &errors, config.bins)?;
            emit(
                &out,
                &ops::LossStatsReport {
                    field: config.field,
                    total: losses.len(),
                    errors: errors.iter().filter(|&&e| e).count(),
                    bins,
                },
            )
        }
        Command::EvalRecall { proposals, gt, iou, out, batch } => {
            let mut flags = Flags::default();
            flags.set("recall-iou", (!iou.is_empty()).then_some(iou));
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::EvalRecall, &batch, &config, RunOptions::default());
            }
            let props = plain_by_image(need("proposals", &proposals)?)?;
            let gt = plain_by_image(need("gt", &gt)?)?;
            let reports = config
                .recall_iou
                .iter()
                .map(|&t| recall_at_iou(&props, &gt, t))
                .collect::<weaklabel_core::Result<Vec<_>>>()?;
            emit(&out, &json!({ "recall": reports }))
        }
        Command::EvalCorloc { dets, gt, out, batch } => {
            let config = resolve(&batch, &mut Flags::default())?;
            if batch.manifest.is_some() {
                return run_batch(Stage::EvalCorloc, &batch, &config, RunOptions::default());
            }
            let dets = scored_by_image(need("dets", &dets)?)?;
            let gt = group_by_image(&ops::read_gt(need("gt", &gt)?, None)?);
            emit(&out, &json!({ "corloc": corloc(&dets, &gt), "images": gt.len() }))
        }
        Command::EvalPgt { pgt, gt, iou, out, batch } => {
            let mut flags = Flags::default();
            flags.set("error-iou", iou);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::EvalPgt, &batch, &config, RunOptions::default());
            }
            let mut by_image: ByImage<PgtBox> = ByImage::new();
            for (id, b) in ops::read_pgt(need("pgt", &pgt)?)? {
                by_image.entry(id.unwrap_or_default()).or_default().push(b);
            }
            let gt = group_by_image(&ops::read_gt(need("gt", &gt)?, None)?);
            emit(&out, &pgt_error_rate(&by_image, &gt, config.error_iou)?)
        }
        Command::Sim { features, sample, seed, out, batch } => {
            let mut flags = Flags::default();
            flags.set("sample", sample).set("seed", seed);
            let config = resolve(&batch, &mut flags)?;
            if batch.manifest.is_some() {
                return run_batch(Stage::Sim, &batch, &config, RunOptions::default());
            }
            let features = ops::read_features(need("features", &features)?)?;
            if config.sample > features.nrows() {
                return Err(Failure::Usage(format!(
                    "--sample {} exceeds the {} available feature vectors",
                    config.sample,
                    features.nrows()
                )));
            }
            emit(&out, &feature_cosine_similarity(&features, config.sample, config.seed)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WEAKLABEL_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Config(errors)) => {
            eprintln!("error: invalid configuration");
            for e in errors {
                eprintln!("  {e}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Entries(n)) => {
            eprintln!("error: {n} entries failed");
            ExitCode::from(1)
        }
    }
}
