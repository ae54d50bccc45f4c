//! Run configuration: defaults, an optional flat JSON config file and command
//! line flags, merged in that order of increasing priority.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use weaklabel_core::dropreg::{DropParams, DropScope};
use weaklabel_core::peaks::PeakParams;
use weaklabel_core::pgt::PgtParams;
use weaklabel_core::prompts::GridParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Default,
    ConfigFile,
    Flag,
}

/// Which loss a loss-statistics run bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossField {
    Cls,
    Reg,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setting {
    pub value: Value,
    pub source: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub peaks: PeakParams,
    /// Re-view tensors as `(-1, N, N)` before resizing; `None` uses the
    /// trailing tensor dimensions.
    pub grid_n: Option<usize>,
    pub grid: GridParams,
    pub cluster_radius: f64,
    pub pgt: PgtParams,
    pub top1: bool,
    pub drop: DropParams,
    pub scope: DropScope,
    pub recall_iou: Vec<f64>,
    pub error_iou: f64,
    pub bins: usize,
    pub field: LossField,
    pub sample: usize,
    pub seed: u64,
    pub mock_box_size: f64,
    pub workers: usize,
    /// Resolved value and origin of every key.
    pub settings: BTreeMap<String, Setting>,
}

pub const KEYS: &[&str] = &[
    "kernel",
    "tau",
    "grid-n",
    "grid-s",
    "cluster-radius",
    "tau-s",
    "tau-o",
    "no-fallback",
    "top1",
    "tau-cls",
    "tau-reg",
    "lambda",
    "percentile",
    "scope",
    "recall-iou",
    "error-iou",
    "bins",
    "field",
    "sample",
    "seed",
    "mock-box-size",
    "workers",
];

impl Default for RunConfig {
    fn default() -> Self {
        validate_config(&Map::new(), &Map::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn settings_json(&self) -> Value {
        serde_json::to_value(&self.settings).expect("plain data")
    }
}

struct Resolver<'a> {
    file: &'a Map<String, Value>,
    flags: &'a Map<String, Value>,
    errors: Vec<ConfigError>,
    settings: BTreeMap<String, Setting>,
}

impl Resolver<'_> {
    fn raw(&self, key: &str) -> Option<(Value, Provenance)> {
        if let Some(v) = self.flags.get(key).filter(|v| !v.is_null()) {
            Some((v.clone(), Provenance::Flag))
        } else {
            self.file
                .get(key)
                .filter(|v| !v.is_null())
                .map(|v| (v.clone(), Provenance::ConfigFile))
        }
    }

    fn fail(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(ConfigError {
            field: key.to_string(),
            message: message.into(),
        });
    }

    fn record(&mut self, key: &str, value: Value, source: Provenance) {
        self.settings.insert(key.to_string(), Setting { value, source });
    }

    /// Resolves `key` with `parse`, falling back to `default` on absence or error.
    fn get<T: Clone + Serialize>(
        &mut self,
        key: &str,
        default: T,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> T {
        match self.raw(key) {
            None => {
                self.record(key, serde_json::to_value(&default).unwrap(), Provenance::Default);
                default
            }
            Some((v, source)) => match parse(&v) {
                Ok(t) => {
                    self.record(key, serde_json::to_value(&t).unwrap(), source);
                    t
                }
                Err(msg) => {
                    self.fail(key, msg);
                    default
                }
            },
        }
    }

    fn real(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        self.get(key, default, |v| {
            let x = v.as_f64().ok_or_else(|| format!("expected a number, got {v}"))?;
            if x.is_finite() && ok(x) {
                Ok(x)
            } else {
                Err(format!("{x} is out of range (expected {range})"))
            }
        })
    }

    fn count(&mut self, key: &str, default: u64, min: u64) -> u64 {
        self.get(key, default, |v| {
            let x = v
                .as_u64()
                .ok_or_else(|| format!("expected a non-negative integer, got {v}"))?;
            if x >= min {
                Ok(x)
            } else {
                Err(format!("{x} is out of range (expected >= {min})"))
            }
        })
    }

    fn flag(&mut self, key: &str) -> bool {
        self.get(key, false, |v| v.as_bool().ok_or_else(|| format!("expected a boolean, got {v}")))
    }
}

/// Merges defaults, config-file values and flag values, collecting every
/// problem instead of stopping at the first.
pub fn validate_config(
    file: &Map<String, Value>,
    flags: &Map<String, Value>,
) -> Result<RunConfig, Vec<ConfigError>> {
    let mut r = Resolver {
        file,
        flags,
        errors: Vec::new(),
        settings: BTreeMap::new(),
    };
    for key in file.keys() {
        if !KEYS.contains(&key.as_str()) {
            r.fail(key, "unknown configuration key");
        }
    }

    let defaults_peaks = PeakParams::default();
    let kernel = r.count("kernel", defaults_peaks.kernel_size as u64, 1) as usize;
    let tau = r.real("tau", defaults_peaks.activation_threshold, |x| (0.0..=1.0).contains(&x), "[0, 1]");
    let grid_n = match r.raw("grid-n") {
        None => {
            r.record("grid-n", Value::Null, Provenance::Default);
            None
        }
        Some(_) => Some(r.count("grid-n", 1, 1) as usize),
    };
    let grid_s = r.count("grid-s", GridParams::default().side as u64, 1) as usize;
    let cluster_radius = r.real("cluster-radius", kernel as f64 / 2.0, |x| x > 0.0, "> 0");

    let dp = PgtParams::default();
    let tau_s = r.real("tau-s", dp.score_threshold, |x| (0.0..1.0).contains(&x), "[0, 1)");
    let tau_o = r.real("tau-o", dp.overlap_threshold, |x| x > 0.0 && x <= 1.0, "(0, 1]");
    let no_fallback = r.flag("no-fallback");
    let top1 = r.flag("top1");

    let dd = DropParams::default();
    let tau_cls = r.real("tau-cls", dd.tau_cls, |x| x >= 0.0, ">= 0");
    let tau_reg = r.real("tau-reg", dd.tau_reg, |x| x >= 0.0, ">= 0");
    let lambda = r.real("lambda", dd.lambda, |x| x >= 0.0, ">= 0");
    let percentile = r.real("percentile", dd.percentile, |x| x > 0.0 && x <= 100.0, "(0, 100]");
    let scope = r.get("scope", DropScope::Things, |v| match v.as_str() {
        Some("things") => Ok(DropScope::Things),
        Some("both") => Ok(DropScope::Both),
        _ => Err(format!("expected \"things\" or \"both\", got {v}")),
    });

    let recall_iou = r.get("recall-iou", vec![0.5, 0.75, 0.9], |v| {
        let items = v.as_array().ok_or_else(|| format!("expected a list of numbers, got {v}"))?;
        if items.is_empty() {
            return Err("at least one threshold is required".into());
        }
        items
            .iter()
            .map(|t| match t.as_f64() {
                Some(x) if x > 0.0 && x <= 1.0 => Ok(x),
                _ => Err(format!("threshold {t} is out of range (expected (0, 1])")),
            })
            .collect()
    });
    let error_iou = r.real("error-iou", 0.7, |x| x > 0.0 && x <= 1.0, "(0, 1]");
    let bins = r.count("bins", 20, 1) as usize;
    let field = r.get("field", LossField::Cls, |v| match v.as_str() {
        Some("cls") => Ok(LossField::Cls),
        Some("reg") => Ok(LossField::Reg),
        _ => Err(format!("expected \"cls\" or \"reg\", got {v}")),
    });
    let sample = r.count("sample", 200, 1) as usize;
    let seed = r.count("seed", 0, 0);
    let mock_box_size = r.real("mock-box-size", 32.0, |x| x > 0.0, "> 0");
    let workers = r.count("workers", 1, 1) as usize;

    if !r.errors.is_empty() {
        return Err(r.errors);
    }
    Ok(RunConfig {
        peaks: PeakParams {
            kernel_size: kernel,
            activation_threshold: tau,
        },
        grid_n,
        grid: GridParams { side: grid_s },
        cluster_radius,
        pgt: PgtParams {
            score_threshold: tau_s,
            overlap_threshold: tau_o,
            fallback: !no_fallback,
        },
        top1,
        drop: DropParams {
            tau_cls,
            tau_reg,
            percentile,
            lambda,
        },
        scope,
        recall_iou,
        error_iou,
        bins,
        field,
        sample,
        seed,
        mock_box_size,
        workers,
        settings: r.settings,
    })
}

/// Reads a flat JSON object config file.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, Vec<ConfigError>> {
    let err = |message: String| {
        vec![ConfigError {
            field: path.display().to_string(),
            message,
        }]
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    match serde_json::from_str::<Value>(&text).map_err(|e| err(e.to_string()))? {
        Value::Object(map) => Ok(map),
        other => Err(err(format!("expected a JSON object, got {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = validate_config(&Map::new(), &Map::new()).unwrap();
        assert_eq!(c.peaks, PeakParams { kernel_size: 128, activation_threshold: 0.9 });
        assert_eq!(c.grid.side, 32);
        assert_eq!(c.cluster_radius, 64.0);
        assert_eq!((c.pgt.score_threshold, c.pgt.overlap_threshold, c.pgt.fallback), (0.3, 0.85, true));
        assert_eq!((c.drop.tau_cls, c.drop.tau_reg, c.drop.percentile, c.drop.lambda), (4.0, 1.0, 90.0, 1.0));
        assert_eq!(c.scope, DropScope::Things);
        assert_eq!(c.recall_iou, vec![0.5, 0.75, 0.9]);
        assert!(c.settings.values().all(|s| s.source == Provenance::Default));
        assert_eq!(c.settings.len(), KEYS.len());
    }

    #[test]
    fn out_of_range_overlap_threshold() {
        let errs = validate_config(&obj(json!({"tau-o": 1.5})), &Map::new()).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "tau-o");
    }

    #[test]
    fn errors_are_collected() {
        let file = obj(json!({"tau": 2.0, "kernel": 0, "scope": "all", "bogus": 1}));
        let errs = validate_config(&file, &obj(json!({"percentile": 0.0}))).unwrap_err();
        let mut fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        fields.sort();
        assert_eq!(fields, vec!["bogus", "kernel", "percentile", "scope", "tau"]);
    }

    #[test]
    fn flag_overrides_file() {
        let c = validate_config(&obj(json!({"tau-s": 0.5, "kernel": 64})), &obj(json!({"tau-s": 0.2}))).unwrap();
        assert_eq!(c.pgt.score_threshold, 0.2);
        assert_eq!(c.settings["tau-s"].source, Provenance::Flag);
        assert_eq!(c.settings["kernel"].source, Provenance::ConfigFile);
        // radius follows the kernel unless set
        assert_eq!(c.cluster_radius, 32.0);
        assert_eq!(c.settings["cluster-radius"].source, Provenance::Default);
    }

    #[test]
    fn optional_grid_n() {
        let c = validate_config(&obj(json!({"grid-n": 14})), &Map::new()).unwrap();
        assert_eq!(c.grid_n, Some(14));
        assert!(validate_config(&obj(json!({"grid-n": 0})), &Map::new()).is_err());
    }
}
