//! Activation map stacks: cross-attention maps and CAMs reshaped to `M × H × W`.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a stack of maps came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    CrossAttention,
    CoarseCam,
    FineCam,
}

impl SourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::CrossAttention => "cross_attention",
            SourceKind::CoarseCam => "coarse_cam",
            SourceKind::FineCam => "fine_cam",
        }
    }
}

/// `M` real-valued maps sharing one `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    maps: Array3<f64>,
    source: SourceKind,
    categories: Option<Vec<i64>>,
}

impl ActivationStack {
    /// Wraps an `M × H × W` array, checking that every value is finite.
    pub fn from_array(maps: Array3<f64>, source: SourceKind) -> Result<Self> {
        let (m, h, w) = maps.dim();
        if m == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty stack {m}x{h}x{w}")));
        }
        if let Some(i) = maps.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite activation at element {i}")));
        }
        Ok(ActivationStack {
            maps,
            source,
            categories: None,
        })
    }

    /// Treats the last two tensor dimensions as the map grid and folds all
    /// leading dimensions into the map count.
    pub fn from_tensor(tensor: &Tensor, source: SourceKind) -> Result<Self> {
        let rank = tensor.dims.len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 dimensions to form maps, got {:?}",
                tensor.dims
            )));
        }
        let h = tensor.dims[rank - 2];
        let w = tensor.dims[rank - 1];
        let m = tensor.numel() / (h * w);
        let data = tensor.data.iter().map(|&v| v as f64).collect();
        let maps = Array3::from_shape_vec((m, h, w), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_array(maps, source)
    }

    pub fn load(path: impl AsRef<Path>, source: SourceKind) -> Result<Self> {
        Self::from_tensor(&Tensor::read(path)?, source)
    }

    /// Views a flat row-major payload as `(-1, n, n)`.
    pub fn from_flat(values: Vec<f64>, n: usize, source: SourceKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("grid_n", "must be positive"));
        }
        let cell = n * n;
        if values.is_empty() || !values.len().is_multiple_of(cell) {
            return Err(Error::Shape(format!(
                "{} elements cannot be viewed as maps of {n}x{n}",
                values.len()
            )));
        }
        let m = values.len() / cell;
        let maps = Array3::from_shape_vec((m, n, n), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_array(maps, source)
    }

    /// Re-views the whole payload as `N × N` maps, keeping row-major order.
    pub fn reshape_to_maps(&self, n: usize) -> Result<Self> {
        let mut out = Self::from_flat(self.flatten(), n, self.source)?;
        if let Some(cats) = &self.categories {
            if cats.len() == out.len() {
                out.categories = Some(cats.clone());
            }
        }
        Ok(out)
    }

    /// Attaches one category id per map.
    pub fn with_categories(mut self, categories: Vec<i64>) -> Result<Self> {
        if categories.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: categories.len(),
            });
        }
        self.categories = Some(categories);
        Ok(self)
    }

    /// Stacks several same-sized stacks into one; the first stack's source tag is kept.
    pub fn concat(stacks: &[ActivationStack]) -> Result<Self> {
        let first = stacks
            .first()
            .ok_or_else(|| Error::Input("no stacks to concatenate".into()))?;
        let views: Vec<_> = stacks.iter().map(|s| s.maps.view()).collect();
        let maps = ndarray::concatenate(Axis(0), &views).map_err(|_| {
            Error::Shape("stacks to concatenate have different map sizes".into())
        })?;
        Ok(ActivationStack {
            maps,
            source: first.source,
            categories: None,
        })
    }

    pub fn len(&self) -> usize {
        self.maps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.maps.dim().1
    }

    pub fn width(&self) -> usize {
        self.maps.dim().2
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    pub fn categories(&self) -> Option<&[i64]> {
        self.categories.as_deref()
    }

    pub fn map(&self, index: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(Axis(0), index)
    }

    pub fn maps(&self) -> &Array3<f64> {
        &self.maps
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.maps.iter().copied().collect()
    }

    /// Bilinear resize of every map to `image_height × image_width`
    /// (align-corners sampling).
    pub fn resize_to_image(&self, image_width: usize, image_height: usize) -> Result<Self> {
        if image_width == 0 {
            return Err(Error::param("image_width", "must be positive"));
        }
        if image_height == 0 {
            return Err(Error::param("image_height", "must be positive"));
        }
        if image_width == self.width() && image_height == self.height() {
            return Ok(self.clone());
        }
        let mut out = Array3::zeros((self.len(), image_height, image_width));
        for (i, mut dst) in out.outer_iter_mut().enumerate() {
            dst.assign(&resize_bilinear(self.map(i), image_width, image_height));
        }
        Ok(ActivationStack {
            maps: out,
            source: self.source,
            categories: self.categories.clone(),
        })
    }

    /// Min-max normalises every map independently into `[0, 1]`.
    pub fn normalized(&self) -> Self {
        let mut maps = self.maps.clone();
        for mut m in maps.outer_iter_mut() {
            let owned = normalize_map(m.view());
            m.assign(&owned);
        }
        ActivationStack {
            maps,
            source: self.source,
            categories: self.categories.clone(),
        }
    }
}

/// `(v - min) / (max - min)`; a constant map becomes all zeros.
pub fn normalize_map(map: ArrayView2<'_, f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Align-corners sample positions of `dst` output cells over `src` input cells.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn resize_bilinear(src: ArrayView2<'_, f64>, width: usize, height: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows = sample_positions(h, height);
    let cols = sample_positions(w, width);
    let mut out = Array2::zeros((height, width));
    for (r, &(y0, y1, ty)) in rows.iter().enumerate() {
        let top = src.slice(s![y0, ..]);
        let bottom = src.slice(s![y1, ..]);
        for (c, &(x0, x1, tx)) in cols.iter().enumerate() {
            let upper = lerp(top[x0], top[x1], tx);
            let lower = lerp(bottom[x0], bottom[x1], tx);
            out[[r, c]] = lerp(upper, lower, ty);
        }
    }
    out
}
