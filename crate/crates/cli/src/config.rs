//! Experiment configuration: a preset with optional TOML overrides.
//!
//! ```toml
//! preset = "desk"
//! novel_classes = [3, 4]
//!
//! [detector]
//! fpn_channels = 32
//!
//! [train]
//! base_schedule = [[200, 0.01]]
//! ```
//!
//! Tables are merged key by key onto the preset; arrays replace.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mpsr::benchmark::TrendConfig;
use mpsr::detector::DetectorConfig;
use mpsr::synthetic::SyntheticSpec;
use mpsr::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub preset: Preset,
    pub novel_classes: Vec<usize>,
    /// `num_classes` is overwritten from the dataset at training time.
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let Some(slot) = b.get_mut(&k) else {
                    bail!("unknown config key `{path}.{k}`");
                };
                merge(slot, v, &format!("{path}.{k}"))?;
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn section<T: Serialize + for<'de> Deserialize<'de>>(preset: T, over: Option<Value>, name: &str) -> Result<T> {
    let Some(over) = over else { return Ok(preset) };
    let mut v = serde_json::to_value(preset)?;
    merge(&mut v, over, name)?;
    serde_json::from_value(v).with_context(|| format!("invalid [{name}] section"))
}

impl Experiment {
    pub fn preset(preset: Preset) -> Self {
        let trend = TrendConfig::desk();
        match preset {
            Preset::Desk => Self {
                preset,
                novel_classes: Vec::new(),
                detector: trend.detector.clone(),
                train: TrainConfig::desk(Mode::BaselineFpn),
                synthetic: trend.pool_spec(0),
            },
            Preset::Paper => Self {
                preset,
                novel_classes: Vec::new(),
                detector: DetectorConfig::paper(1),
                train: TrainConfig::paper(Mode::BaselineFpn),
                synthetic: trend.pool_spec(0),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let mut v = serde_json::to_value(table)?;
        let obj = v.as_object_mut().expect("a TOML document is a table");
        for key in obj.keys() {
            if !["preset", "novel_classes", "detector", "train", "synthetic"].contains(&key.as_str()) {
                bail!("unknown config key `{key}`");
            }
        }
        let preset: Preset = match obj.remove("preset") {
            Some(p) => serde_json::from_value(p).context("preset must be \"desk\" or \"paper\"")?,
            None => Preset::Desk,
        };
        let mut exp = Self::preset(preset);
        if let Some(n) = obj.remove("novel_classes") {
            exp.novel_classes = serde_json::from_value(n).context("novel_classes must be a list of class ids")?;
        }
        exp.detector = section(exp.detector, obj.remove("detector"), "detector")?;
        exp.train = section(exp.train, obj.remove("train"), "train")?;
        exp.synthetic = section(exp.synthetic, obj.remove("synthetic"), "synthetic")?;
        Ok(exp)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::preset(Preset::Desk)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {} (pass an existing TOML file to --config)", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
        }
    }
}
