//! JSON file schemas and helpers.
//!
//! Every JSON file is written pretty-printed with a trailing newline so that
//! identical values always produce identical bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dropreg::{QueryLossRecord, RoiLossRecord};
use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::geometry::{BBox, ScoredBox};
use crate::pgt::PgtBox;

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON serialisation of plain data");
    s.push('\n');
    s
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, to_json_string(value)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `{image_id?, label, x1, y1, x2, y2, score?}`. Ground truth omits `score`;
/// class-agnostic proposals may omit `label` (read as 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default)]
    pub label: i64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }

    pub fn scored(&self) -> Result<ScoredBox> {
        let score = self
            .score
            .ok_or_else(|| Error::Input(format!("box {self:?} has no score")))?;
        if !score.is_finite() {
            return Err(Error::Input(format!("box {self:?} has a non-finite score")));
        }
        Ok(ScoredBox {
            label: self.label,
            bbox: self.bbox()?,
            score,
        })
    }

    /// Ground-truth box; `default_image` applies when the record has no id.
    pub fn gt(&self, default_image: &str) -> Result<GtBox> {
        Ok(GtBox {
            image_id: self.image_id.clone().unwrap_or_else(|| default_image.to_string()),
            label: self.label,
            bbox: self.bbox()?,
        })
    }

    pub fn from_scored(b: &ScoredBox) -> Self {
        BoxRecord {
            image_id: None,
            label: b.label,
            x1: b.bbox.x1,
            y1: b.bbox.y1,
            x2: b.bbox.x2,
            y2: b.bbox.y2,
            score: Some(b.score),
        }
    }

    pub fn from_gt(b: &GtBox) -> Self {
        BoxRecord {
            image_id: Some(b.image_id.clone()),
            label: b.label,
            x1: b.bbox.x1,
            y1: b.bbox.y1,
            x2: b.bbox.x2,
            y2: b.bbox.y2,
            score: None,
        }
    }
}

/// `{image_id?, label, x1, y1, x2, y2, normalized_score, fallback}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgtRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub label: i64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub normalized_score: f64,
    pub fallback: bool,
}

impl From<&PgtBox> for PgtRecord {
    fn from(b: &PgtBox) -> Self {
        PgtRecord {
            image_id: None,
            label: b.label,
            x1: b.bbox.x1,
            y1: b.bbox.y1,
            x2: b.bbox.x2,
            y2: b.bbox.y2,
            normalized_score: b.normalized_score,
            fallback: b.fallback,
        }
    }
}

impl PgtRecord {
    pub fn to_pgt(&self) -> Result<PgtBox> {
        Ok(PgtBox {
            label: self.label,
            bbox: BBox::new(self.x1, self.y1, self.x2, self.y2)?,
            normalized_score: self.normalized_score,
            fallback: self.fallback,
        })
    }
}

/// One per-sample loss record as exported by a training run.
///
/// RoI records carry `reg_loss`/`is_positive`, query records carry
/// `box_loss`/`iou_loss`/`is_foreground`. For loss statistics a record may
/// carry an explicit `is_error` flag, or the label and box of the pseudo label
/// it was trained against.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub cls_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_positive: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_foreground: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_error: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y2: Option<f64>,
}

impl LossRecord {
    /// Missing `reg_loss` reads as 0 and missing `is_positive` as negative.
    pub fn to_roi(&self) -> Result<RoiLossRecord> {
        let r = RoiLossRecord {
            cls_loss: self.cls_loss,
            reg_loss: self.reg_loss.unwrap_or(0.0),
            is_positive: self.is_positive.unwrap_or(false),
        };
        r.validate()?;
        Ok(r)
    }

    /// Missing box/IoU losses read as 0; `is_foreground` is required.
    pub fn to_query(&self) -> Result<QueryLossRecord> {
        let is_foreground = self
            .is_foreground
            .or(self.is_positive)
            .ok_or_else(|| Error::Input("query record needs `is_foreground`".into()))?;
        let q = QueryLossRecord {
            cls_loss: self.cls_loss,
            box_loss: self.box_loss.unwrap_or(0.0),
            iou_loss: self.iou_loss.unwrap_or(0.0),
            is_foreground,
        };
        q.validate()?;
        Ok(q)
    }

    /// Label and box of the associated pseudo label, if all present.
    pub fn labeled_box(&self) -> Result<Option<(i64, BBox)>> {
        match (self.label, self.x1, self.y1, self.x2, self.y2) {
            (Some(l), Some(x1), Some(y1), Some(x2), Some(y2)) => {
                Ok(Some((l, BBox::new(x1, y1, x2, y2)?)))
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_schema_field_order() {
        let r = BoxRecord {
            image_id: None,
            label: 3,
            x1: 0.0,
            y1: 1.0,
            x2: 2.5,
            y2: 4.0,
            score: Some(0.5),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"label":3,"x1":0.0,"y1":1.0,"x2":2.5,"y2":4.0,"score":0.5}"#);
        let gt: BoxRecord = serde_json::from_str(r#"{"label":1,"x1":0,"y1":0,"x2":1,"y2":1}"#).unwrap();
        assert_eq!(gt.score, None);
        assert!(gt.scored().is_err());
        assert!(!serde_json::to_string(&gt).unwrap().contains("score"));
    }

    #[test]
    fn loss_record_conversions() {
        let r: LossRecord = serde_json::from_str(r#"{"cls_loss":1.5,"is_foreground":true,"box_loss":0.5}"#).unwrap();
        let q = r.to_query().unwrap();
        assert_eq!((q.cls_loss, q.box_loss, q.iou_loss, q.is_foreground), (1.5, 0.5, 0.0, true));
        let roi = r.to_roi().unwrap();
        assert!(!roi.is_positive);

        let bare: LossRecord = serde_json::from_str(r#"{"cls_loss":1.0}"#).unwrap();
        assert!(bare.to_query().is_err());
        let neg: LossRecord = serde_json::from_str(r#"{"cls_loss":-1.0}"#).unwrap();
        assert!(neg.to_roi().is_err());
        assert_eq!(bare.labeled_box().unwrap(), None);
    }

    #[test]
    fn write_creates_parent_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.json");
        write_json(&path, &vec![1, 2]).unwrap();
        let back: Vec<i32> = read_json(&path).unwrap();
        assert_eq!(back, vec![1, 2]);
        assert!(std::fs::read_to_string(&path).unwrap().ends_with('\n'));
    }
}
