//! Per-command run configurations. Each is loaded from an optional JSON
//! file (unknown keys rejected), overridden by flags, and written back out
//! next to the outputs so the run can be repeated with `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vidnet::synthdata::SynthConfig;
use vidnet::training::TrainConfig;

/// Relative output paths are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "VIDNET_OUTPUT_ROOT";

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

pub fn output_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(RESOLVED_CONFIG);
    fs::write(&p, serde_json::to_string_pretty(config)?).with_context(|| format!("writing {}", p.display()))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElaRun {
    pub video: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub quality: u8,
}

impl Default for ElaRun {
    fn default() -> Self {
        ElaRun {
            video: None,
            out: None,
            quality: 50,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`.
    pub resume: Option<PathBuf>,
    /// Epochs between checkpoint writes.
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            data: None,
            out: None,
            resume: None,
            checkpoint_every: 5,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Score the ground-truth masks themselves instead of a model.
    pub echo: bool,
    pub threshold: f32,
    /// Carry decoder state through each video; otherwise reset every
    /// `reset_every` frames.
    pub carry_state: bool,
    pub reset_every: usize,
    /// Use pristine videos from the manifest as AUC negatives.
    pub negatives: bool,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            data: None,
            out: None,
            checkpoint: None,
            echo: false,
            threshold: 0.5,
            carry_state: true,
            reset_every: 3,
            negatives: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbRun {
    pub eval: EvalRun,
    pub kinds: Vec<String>,
    pub seed: u64,
}

impl Default for PerturbRun {
    fn default() -> Self {
        PerturbRun {
            eval: EvalRun::default(),
            kinds: ["jpeg90", "jpeg70", "snr30", "snr20"].map(String::from).to_vec(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictRun {
    pub video: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub threshold: f32,
    pub carry_state: bool,
    pub reset_every: usize,
}

impl Default for PredictRun {
    fn default() -> Self {
        PredictRun {
            video: None,
            out: None,
            checkpoint: None,
            threshold: 0.5,
            carry_state: true,
            reset_every: 3,
        }
    }
}
