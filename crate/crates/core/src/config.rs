//! Run configuration: one TOML document covering every module.
//!
//! Every key has a default and unknown keys are rejected. Command-line
//! overrides use dotted paths (`crossval.train.epochs=20`) and win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::{CrossValConfig, FleetDataSpec};
use crate::datagen::{ManualJitter, ShearDragParams};
use crate::error::{Error, Result};
use crate::eval::DriftStudySpec;
use crate::hashing::stable_hash;
use crate::neural::{OutputKind, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "MAGSKIN_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Held-out split and objective for the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Add the labeled triplet term when training on several sensors.
    pub use_triplet: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.1,
            use_triplet: false,
            seed: 3,
        }
    }
}

/// Budget and sensor-count sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Adaptation budgets for the budget sweep; 0 is the unadapted model.
    pub budgets: Vec<usize>,
    /// Training-sensor counts for the sensor sweep.
    pub sensor_counts: Vec<usize>,
    pub folds: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![0, 130, 390, 780, 1560],
            sensor_counts: vec![2, 5, 10, 15],
            folds: vec![0, 2, 4],
        }
    }
}

/// Transfer to flexible boards with a thinner standoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlexConfig {
    pub standoff_scale: f64,
    pub targets: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            standoff_scale: 0.2,
            targets: 3,
            budget: 390,
            seed: 77,
        }
    }
}

/// Hand-held pen adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManualConfig {
    pub budget: usize,
    pub points_per_line: usize,
    pub jitter: ManualJitter,
    pub folds: Vec<usize>,
}

impl Default for ManualConfig {
    fn default() -> Self {
        Self {
            budget: 325,
            points_per_line: 65,
            jitter: ManualJitter::default(),
            folds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub study: DriftStudySpec,
    pub train: TrainConfig,
    pub output: OutputKind,
    pub sensor_seed: u64,
    pub drift_enabled: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            study: DriftStudySpec::default(),
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            output: OutputKind::NormalForce,
            sensor_seed: 5,
            drift_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Snake-grid passes recorded by `stream record`.
    pub passes: usize,
    /// Replay rate cap, Hz; 0 replays as fast as timestamps allow.
    pub rate_hz: f64,
    pub sensor_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            passes: 1,
            rate_hz: 400.0,
            sensor_seed: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateProtocol {
    SnakeGrid,
    ShearDrag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Record only the first fleet sensor.
    pub single: bool,
    pub protocol: SimulateProtocol,
    pub shear: ShearDragParams,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            single: false,
            protocol: SimulateProtocol::SnakeGrid,
            shear: ShearDragParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Experiment preset run by `presets run`; empty for none.
    pub preset: String,
    /// Master seed; when set, every section seed is derived from it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output root; empty uses `$MAGSKIN_OUT` or `runs`. Not part of the config hash.
    pub output_dir: String,
    pub fleet: FleetDataSpec,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub crossval: CrossValConfig,
    pub sweep: SweepConfig,
    pub flex: FlexConfig,
    pub manual: ManualConfig,
    pub drift: DriftConfig,
    pub stream: StreamConfig,
    pub simulate: SimulateConfig,
}

/// Keys absent from the serialized default because they are unset.
const OPTIONAL_KEYS: [(&str, &str); 2] = [
    ("seed", "unset (section seeds are used as given)"),
    (
        "fleet.adaptation_lines.manual",
        "unset (robotic lines); {location_sd, depth_sd} adds pen jitter",
    ),
];

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Apply `dotted.key=value`; the value is read as TOML and falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key")).map_err(config_err)?,
            Err(_) => Value::String(raw.to_string()),
        };
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            if !obj.contains_key(*part) {
                let optional = OPTIONAL_KEYS.iter().any(|(k, _)| *k == parts[..=i].join("."));
                if !optional {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                obj.insert(part.to_string(), Value::Object(Default::default()));
            }
            node = obj.get_mut(*part).expect("present");
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Copy with section seeds derived from the master seed, if one is set.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            let d = |k: u64| s.wrapping_add(k);
            c.fleet.seed = d(0);
            c.fleet.fleet.seed = d(1);
            c.train.seed = d(2);
            c.crossval.train.seed = d(3);
            c.crossval.adapt.seed = d(4);
            c.drift.study.seed = d(5);
            c.drift.train.seed = d(6);
            c.drift.sensor_seed = d(7);
            c.stream.sensor_seed = d(8);
            c.flex.seed = d(9);
            c.split.seed = d(10);
        }
        c
    }

    /// Hash of the resolved configuration without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.output_dir.clear();
        stable_hash(&c)
    }

    pub fn output_root(&self) -> PathBuf {
        if !self.output_dir.is_empty() {
            return PathBuf::from(&self.output_dir);
        }
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    /// `<root>/<label>-<hash>`.
    pub fn run_dir(&self, label: &str) -> PathBuf {
        self.output_root().join(format!("{label}-{}", self.hash()))
    }
}

/// Every config key with its default, in document order.
pub fn default_key_listing() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    let tree = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    walk("", &tree, &mut out);
    out.extend(OPTIONAL_KEYS.iter().map(|(k, d)| (k.to_string(), d.to_string())));
    out
}

pub fn render_key_listing() -> String {
    let rows = default_key_listing();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in rows {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}
