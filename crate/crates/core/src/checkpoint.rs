//! Checkpoints: one safetensors archive of named `f32` arrays plus a JSON
//! sidecar with the configuration snapshot, counters and history.
//!
//! Archive names are the parameter names, with optimizer moments stored as
//! `adam.{encoder|decoder}.{m|v}.<param>`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vidnet};
use crate::nn::{Adam, ParamStore, Tensor};
use crate::training::{EpochRecord, TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
const ADAM_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Absent for checkpoints written from a bare model.
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: u64,
    pub encoder_updates: u64,
    pub decoder_updates: u64,
    pub history: Vec<EpochRecord>,
}

/// `run.safetensors` → `run.json`.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

/// Serializes named tensors into a safetensors archive.
pub fn encode_archive(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let bytes: Vec<(String, [usize; 4], Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), t.shape(), raw)
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (name, shape, raw) in &bytes {
        let view =
            TensorView::new(Dtype::F32, shape.to_vec(), raw).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        views.push((name.clone(), view));
    }
    safetensors::serialize(views, None::<HashMap<String, String>>).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses a safetensors archive. Every entry must be a rank-4 `f32` array.
pub fn decode_archive(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "{name}: dtype {:?}, expected F32",
                view.dtype()
            )));
        }
        let shape: [usize; 4] = view
            .shape()
            .try_into()
            .map_err(|_| Error::Checkpoint(format!("{name}: rank {} != 4", view.shape().len())))?;
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.insert(name, t);
    }
    Ok(out)
}

fn moment_name(opt: &Adam<f32>, which: char, param: &str) -> String {
    let side = match opt.group {
        crate::nn::ParamGroup::Encoder => "encoder",
        crate::nn::ParamGroup::Decoder => "decoder",
        crate::nn::ParamGroup::Buffer => "buffer",
    };
    format!("{ADAM_PREFIX}{side}.{which}.{param}")
}

fn collect_params(store: &ParamStore<f32>, out: &mut BTreeMap<String, Tensor<f32>>) {
    for (_, p) in store.iter() {
        out.insert(p.name.clone(), p.value.clone());
    }
}

fn collect_moments(opt: &Adam<f32>, store: &ParamStore<f32>, out: &mut BTreeMap<String, Tensor<f32>>) {
    for (id, m, v) in opt.moments() {
        let name = &store.get(id).name;
        out.insert(moment_name(opt, 'm', name), m.clone());
        out.insert(moment_name(opt, 'v', name), v.clone());
    }
}

fn write_pair(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_archive(tensors)?).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

fn read_pair(path: &Path) -> Result<(BTreeMap<String, Tensor<f32>>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = parse_meta(&json)?;
    Ok((decode_archive(&bytes)?, meta))
}

/// Parses and version-checks a sidecar.
pub fn parse_meta(json: &str) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_str(json)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    meta.model.validate()?;
    Ok(meta)
}

/// Rebuilds a model from `meta.model` and overwrites every parameter with
/// the archive entry of the same name. Missing, extra or mis-shaped
/// entries are errors.
fn restore_model(tensors: &mut BTreeMap<String, Tensor<f32>>, meta: &CheckpointMeta) -> Result<Vidnet<f32>> {
    let mut model = Vidnet::<f32>::new(meta.model.clone(), 0)?;
    let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        model
            .params
            .assign(&name, t)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(model)
}

fn restore_moments(
    opt: &mut Adam<f32>,
    store: &ParamStore<f32>,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    for (id, p) in store.iter() {
        let (mn, vn) = (moment_name(opt, 'm', &p.name), moment_name(opt, 'v', &p.name));
        match (tensors.remove(&mn), tensors.remove(&vn)) {
            (None, None) => {}
            (Some(m), Some(v)) => {
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("moments of {} have the wrong shape", p.name)));
                }
                opt.set_moments(id, m, v);
            }
            _ => return Err(Error::Checkpoint(format!("unpaired moments for {}", p.name))),
        }
    }
    Ok(())
}

fn reject_leftovers(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    match tensors.keys().next() {
        Some(name) => Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
        None => Ok(()),
    }
}

/// Writes the model parameters only.
pub fn save_model(model: &Vidnet<f32>, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    collect_params(&model.params, &mut tensors);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        train: None,
        epoch: 0,
        step: 0,
        encoder_updates: 0,
        decoder_updates: 0,
        history: Vec::new(),
    };
    write_pair(path, &tensors, &meta)
}

/// Writes parameters, optimizer moments and the training counters.
pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    let store = &trainer.model.params;
    let mut tensors = BTreeMap::new();
    collect_params(store, &mut tensors);
    collect_moments(&trainer.encoder_opt, store, &mut tensors);
    collect_moments(&trainer.decoder_opt, store, &mut tensors);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: trainer.model.config.clone(),
        train: Some(trainer.config.clone()),
        epoch: trainer.epoch,
        step: trainer.step,
        encoder_updates: trainer.encoder_opt.steps,
        decoder_updates: trainer.decoder_opt.steps,
        history: trainer.history.clone(),
    };
    write_pair(path, &tensors, &meta)
}

/// Loads the model from any checkpoint. Optimizer moments, if present,
/// are ignored.
pub fn load_model(path: &Path) -> Result<(Vidnet<f32>, CheckpointMeta)> {
    let (mut tensors, meta) = read_pair(path)?;
    let model = restore_model(&mut tensors, &meta)?;
    tensors.retain(|k, _| !k.starts_with(ADAM_PREFIX));
    reject_leftovers(&tensors)?;
    Ok((model, meta))
}

/// Restores a trainer so that further epochs continue where it stopped.
pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let (mut tensors, meta) = read_pair(path)?;
    let config = meta
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
    let model = restore_model(&mut tensors, &meta)?;
    let mut trainer = Trainer::with_model(model, config);
    restore_moments(&mut trainer.encoder_opt, &trainer.model.params, &mut tensors)?;
    restore_moments(&mut trainer.decoder_opt, &trainer.model.params, &mut tensors)?;
    reject_leftovers(&tensors)?;
    trainer.encoder_opt.steps = meta.encoder_updates;
    trainer.decoder_opt.steps = meta.decoder_updates;
    trainer.step = meta.step;
    trainer.epoch = meta.epoch;
    trainer.history = meta.history;
    Ok(trainer)
}
