//! Checkpoint directories: `manifest.json` describing every tensor (name,
//! shape, byte offset) plus configuration and trainer state, and
//! `weights.bin` holding the little-endian tensor data back to back.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Real};
use crate::trainer::{Stage, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MOMENTUM_PREFIX: &str = "momentum/";

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).expect("validated on load");
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().expect("validated on load"));
        rng
    }

    fn check(&self) -> Result<()> {
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed)
            .map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        self.word_pos
            .parse::<u128>()
            .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        Ok(())
    }
}

/// What a trainer needs to continue a stage bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub stage: Stage,
    pub sampler: RngState,
    pub pyramid: RngState,
    pub augment: RngState,
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub detector: Detector<f32>,
    pub momentum: Option<ParamSet<f32>>,
    pub iteration: usize,
    pub class_names: Vec<String>,
    pub train_state: Option<TrainState>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    weights_sha256: String,
    tensors: Vec<TensorEntry>,
    detector: DetectorConfig,
    iteration: usize,
    class_names: Vec<String>,
    train_state: Option<TrainState>,
}

fn write_set<T: Real>(set: &ParamSet<T>, prefix: &str, blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>) {
    for (name, t) in set.iter() {
        let offset = blob.len();
        for &v in &t.data {
            v.write_le(blob);
        }
        entries.push(TensorEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape.clone(),
            offset,
            bytes: blob.len() - offset,
        });
    }
}

fn read_set(
    skeleton: &ParamSet<f32>,
    prefix: &str,
    entries: &HashMap<&str, &TensorEntry>,
    blob: &[u8],
) -> Result<ParamSet<f32>> {
    let mut out = skeleton.clone();
    let ids: Vec<_> = skeleton.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", skeleton.name(id));
        let e = entries
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let t = out.get_mut(id);
        if e.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                e.shape, t.shape
            )));
        }
        let n = t.data.len();
        if e.bytes != n * 4 || e.offset + e.bytes > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {name} lies outside the weight file")));
        }
        for (i, v) in t.data.iter_mut().enumerate() {
            let at = e.offset + i * 4;
            *v = f32::read_le(&blob[at..at + 4]);
        }
    }
    Ok(out)
}

impl Checkpoint {
    /// Weights only, no trainer state.
    pub fn from_detector(detector: Detector<f32>, class_names: Vec<String>) -> Self {
        Self {
            detector,
            momentum: None,
            iteration: 0,
            class_names,
            train_state: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        write_set(&self.detector.params, "", &mut blob, &mut tensors);
        if let Some(m) = &self.momentum {
            write_set(m, MOMENTUM_PREFIX, &mut blob, &mut tensors);
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            dtype: f32::DTYPE.into(),
            weights_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
            detector: self.detector.config.clone(),
            iteration: self.iteration,
            class_names: self.class_names.clone(),
            train_state: self.train_state.clone(),
        };
        let wpath = dir.join(WEIGHTS_FILE);
        fs::write(&wpath, &blob).map_err(|e| Error::io(&wpath, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: mpath.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.version
            )));
        }
        if manifest.dtype != f32::DTYPE {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let wpath = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.weights_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} does not match the manifest checksum",
                wpath.display()
            )));
        }
        if let Some(ts) = &manifest.train_state {
            ts.sampler.check()?;
            ts.pyramid.check()?;
            ts.augment.check()?;
        }
        let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let skeleton = Detector::<f32>::new(manifest.detector.clone(), 0)?;
        let params = read_set(&skeleton.params, "", &entries, &blob)?;
        let has_momentum = manifest.tensors.iter().any(|e| e.name.starts_with(MOMENTUM_PREFIX));
        let momentum = if has_momentum {
            Some(read_set(&skeleton.params, MOMENTUM_PREFIX, &entries, &blob)?)
        } else {
            None
        };
        Ok(Self {
            detector: Detector::from_params(manifest.detector, params)?,
            momentum,
            iteration: manifest.iteration,
            class_names: manifest.class_names,
            train_state: manifest.train_state,
        })
    }
}
