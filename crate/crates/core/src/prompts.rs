//! Point prompts for a promptable segmenter: a dense grid of patch centres,
//! clustered cross-attention peaks and CAM peaks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peaks::PeakPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Spatial,
    Instance,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub kind: PromptKind,
    pub value: f64,
}

/// Coordinates closer than this on both axes count as the same prompt.
pub const DEDUP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridParams {
    pub side: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams { side: 32 }
    }
}

/// Centres of an `S × S` patch grid, row by row.
pub fn dense_grid(image_width: usize, image_height: usize, grid: GridParams) -> Result<Vec<PromptPoint>> {
    if image_width == 0 || image_height == 0 {
        return Err(Error::param("image_size", "width and height must be positive"));
    }
    if grid.side == 0 {
        return Err(Error::param("grid_s", "must be at least 1"));
    }
    let s = grid.side as f64;
    let (w, h) = (image_width as f64, image_height as f64);
    let mut out = Vec::with_capacity(grid.side * grid.side);
    for i in 0..grid.side {
        for j in 0..grid.side {
            out.push(PromptPoint {
                x: (j as f64 + 0.5) * w / s,
                y: (i as f64 + 0.5) * h / s,
                kind: PromptKind::Spatial,
                value: 0.0,
            });
        }
    }
    Ok(out)
}

fn cluster_order(a: &PromptPoint, b: &PromptPoint) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then_with(|| a.y.total_cmp(&b.y))
        .then_with(|| a.x.total_cmp(&b.x))
}

/// Greedy radius clustering: visit points by descending value and keep a
/// point only if it is farther than `radius` from every point kept so far.
pub fn cluster_instance_prompts(points: &[PromptPoint], radius: f64) -> Result<Vec<PromptPoint>> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::param("cluster_radius", "must be positive"));
    }
    if let Some(p) = points.iter().find(|p| p.kind != PromptKind::Instance) {
        return Err(Error::Input(format!(
            "only instance prompts are clustered, got a {:?} prompt",
            p.kind
        )));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(cluster_order);
    let radius_sq = radius * radius;
    let mut kept: Vec<PromptPoint> = Vec::new();
    for p in sorted {
        let far = kept.iter().all(|q| {
            let (dx, dy) = (p.x - q.x, p.y - q.y);
            dx * dx + dy * dy > radius_sq
        });
        if far {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// `spatial ++ semantic ++ instance`, dropping later points that repeat an
/// earlier coordinate.
pub fn assemble_prompts(
    spatial: &[PromptPoint],
    instance_clustered: &[PromptPoint],
    semantic: &[PromptPoint],
) -> Vec<PromptPoint> {
    let mut out: Vec<PromptPoint> = Vec::with_capacity(spatial.len() + semantic.len() + instance_clustered.len());
    for p in spatial.iter().chain(semantic).chain(instance_clustered) {
        let dup = out
            .iter()
            .any(|q| (q.x - p.x).abs() <= DEDUP_EPS && (q.y - p.y).abs() <= DEDUP_EPS);
        if !dup {
            out.push(*p);
        }
    }
    out
}

/// Maps a peak from map pixels to image pixels, returning `(x, y)`.
///
/// Identity when the map already has image resolution, otherwise align-corners
/// scaling `x = col * (W - 1) / (w - 1)`.
pub fn map_peak_to_image(
    peak: &PeakPoint,
    map_size: (usize, usize),
    image_size: (usize, usize),
) -> Result<(f64, f64)> {
    let (map_w, map_h) = map_size;
    let (img_w, img_h) = image_size;
    if peak.col >= map_w || peak.row >= map_h {
        return Err(Error::Input(format!(
            "peak ({}, {}) outside {map_w}x{map_h} map",
            peak.row, peak.col
        )));
    }
    let axis = |pos: usize, src: usize, dst: usize| -> Result<f64> {
        if src == dst {
            Ok(pos as f64)
        } else if src == 1 {
            Err(Error::Shape(format!(
                "cannot scale a single-cell map axis to {dst} pixels"
            )))
        } else {
            Ok(pos as f64 * (dst - 1) as f64 / (src - 1) as f64)
        }
    };
    Ok((axis(peak.col, map_w, img_w)?, axis(peak.row, map_h, img_h)?))
}

/// Peaks of a `map_size` grid as prompts in image pixels.
pub fn image_prompts_from_peaks(
    peaks: &[PeakPoint],
    kind: PromptKind,
    map_size: (usize, usize),
    image_size: (usize, usize),
) -> Result<Vec<PromptPoint>> {
    let mut prompts = crate::peaks::peaks_to_prompts(peaks, kind)?;
    for (prompt, peak) in prompts.iter_mut().zip(peaks) {
        let (x, y) = map_peak_to_image(peak, map_size, image_size)?;
        prompt.x = x;
        prompt.y = y;
    }
    Ok(prompts)
}
