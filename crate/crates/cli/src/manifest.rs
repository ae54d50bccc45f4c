//! Batch manifests: one entry per image with the paths of its offline inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use weaklabel_core::activation::SourceKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_width: usize,
    pub image_height: usize,
    /// Activation tensors (WLT1) by source.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<SourceKind, PathBuf>,
    /// Image-level class labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peaks_instance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peaks_semantic: Option<PathBuf>,
    /// Scored, labelled detector boxes used for pseudo ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<PathBuf>,
    /// Class-agnostic proposals for recall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<PathBuf>,
    /// Scored detections for CorLoc.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pgt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    /// Per-sample loss records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
    /// Proposal features, a rank-2 WLT1 tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl ManifestEntry {
    pub fn new(image_id: impl Into<String>, image_width: usize, image_height: usize) -> Self {
        ManifestEntry {
            image_id: image_id.into(),
            image_width,
            image_height,
            tensors: BTreeMap::new(),
            labels: None,
            peaks_instance: None,
            peaks_semantic: None,
            boxes: None,
            proposals: None,
            detections: None,
            pgt: None,
            gt: None,
            records: None,
            features: None,
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        self.tensors.values_mut().chain(
            [
                &mut self.peaks_instance,
                &mut self.peaks_semantic,
                &mut self.boxes,
                &mut self.proposals,
                &mut self.detections,
                &mut self.pgt,
                &mut self.gt,
                &mut self.records,
                &mut self.features,
            ]
            .into_iter()
            .flatten(),
        )
    }
}

impl Manifest {
    /// Loads and validates a manifest; relative paths are taken relative to
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        for entry in &mut manifest.entries {
            for p in entry.paths_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut problems = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let id = &e.image_id;
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                problems.push(format!("entries[{i}].image_id: {id:?} is not usable as a file name"));
            }
            if !seen.insert(id) {
                problems.push(format!("entries[{i}].image_id: duplicate id {id:?}"));
            }
            if e.image_width == 0 || e.image_height == 0 {
                problems.push(format!("entries[{i}] ({id}): image size must be positive"));
            }
        }
        if !problems.is_empty() {
            bail!("invalid manifest:\n  {}", problems.join("\n  "));
        }
        Ok(())
    }
}
