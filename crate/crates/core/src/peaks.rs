//! Peak point extraction from activation maps.
//!
//! Each map is cut into non-overlapping `k × k` tiles and the argmax of every
//! tile becomes a candidate. Candidates are ranked by value, those below the
//! activation threshold are discarded, and a greedy pass removes any candidate
//! lying within `k / 2` (Euclidean) of a stronger surviving candidate from the
//! same map.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationStack;
use crate::error::{Error, Result};
use crate::prompts::{PromptKind, PromptPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakPoint {
    pub map_index: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakParams {
    /// Pooling tile side and twice the suppression radius, in pixels.
    pub kernel_size: usize,
    pub activation_threshold: f64,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams {
            kernel_size: 128,
            activation_threshold: 0.9,
        }
    }
}

impl PeakParams {
    pub fn new(kernel_size: usize, activation_threshold: f64) -> Result<Self> {
        let p = PeakParams {
            kernel_size,
            activation_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 {
            return Err(Error::param("kernel_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.activation_threshold) {
            return Err(Error::param(
                "activation_threshold",
                format!("{} is outside [0, 1]", self.activation_threshold),
            ));
        }
        Ok(())
    }

    pub fn suppression_radius(&self) -> f64 {
        self.kernel_size as f64 / 2.0
    }
}

/// Argmax of every `k × k` tile of every map. Edge tiles are truncated and
/// ties go to the smallest row-major index inside the tile.
pub fn pool_candidates(stack: &ActivationStack, k: usize) -> Vec<PeakPoint> {
    let k = k.max(1);
    let (h, w) = (stack.height(), stack.width());
    let mut out = Vec::with_capacity(stack.len() * h.div_ceil(k) * w.div_ceil(k));
    for map_index in 0..stack.len() {
        let map = stack.map(map_index);
        for tile_row in (0..h).step_by(k) {
            for tile_col in (0..w).step_by(k) {
                let mut best = PeakPoint {
                    map_index,
                    row: tile_row,
                    col: tile_col,
                    value: map[[tile_row, tile_col]],
                };
                for row in tile_row..(tile_row + k).min(h) {
                    for col in tile_col..(tile_col + k).min(w) {
                        let v = map[[row, col]];
                        if v > best.value {
                            best = PeakPoint {
                                map_index,
                                row,
                                col,
                                value: v,
                            };
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Descending by value, then ascending `(map_index, row, col)`.
pub fn peak_order(a: &PeakPoint, b: &PeakPoint) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then_with(|| (a.map_index, a.row, a.col).cmp(&(b.map_index, b.row, b.col)))
}

pub fn extract_peaks(stack: &ActivationStack, params: &PeakParams) -> Vec<PeakPoint> {
    let mut candidates = pool_candidates(stack, params.kernel_size);
    candidates.sort_by(peak_order);

    let radius = params.suppression_radius();
    let radius_sq = radius * radius;
    let mut kept_by_map: Vec<Vec<(usize, usize)>> = vec![Vec::new(); stack.len()];
    let mut out = Vec::new();
    for p in candidates {
        // sorted descending, so nothing after this clears the threshold either
        if p.value < params.activation_threshold {
            break;
        }
        let kept = &mut kept_by_map[p.map_index];
        let near = kept.iter().any(|&(r, c)| {
            let dr = r as f64 - p.row as f64;
            let dc = c as f64 - p.col as f64;
            dr * dr + dc * dc <= radius_sq
        });
        if !near {
            kept.push((p.row, p.col));
            out.push(p);
        }
    }
    out
}

/// Tags peaks as instance- or semantic-aware prompts at their grid coordinates.
pub fn peaks_to_prompts(peaks: &[PeakPoint], kind: PromptKind) -> Result<Vec<PromptPoint>> {
    if kind == PromptKind::Spatial {
        return Err(Error::Input(
            "peaks can only become instance or semantic prompts".into(),
        ));
    }
    Ok(peaks
        .iter()
        .map(|p| PromptPoint {
            x: p.col as f64,
            y: p.row as f64,
            kind,
            value: p.value,
        })
        .collect())
}
