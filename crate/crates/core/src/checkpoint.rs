//! Checkpoint archives: safetensors files holding generator, discriminator and
//! optimizer tensors, with the training step, config and frozen-encoder digest
//! in the header metadata.
//!
//! Tensor names: generator parameters as-is (`encoder.*`, `decoder.*`, ...),
//! discriminator parameters under `discriminator.*`, optimizer moments under
//! `opt.gen.{m,v}.<name>` and `opt.disc.{m,v}.<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::pipeline::{TrainConfig, TrainState};

pub const FORMAT: &str = "manga-colorize/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Header of a checkpoint archive.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub step: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub frozen_digest: String,
    pub generator_updates: u64,
    pub discriminator_updates: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.safetensors"))
}

/// Checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-"))
            .and_then(|n| n.strip_suffix(".safetensors"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn ckpt_err(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(Raw {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn from_view(view: &TensorView<'_>, path: &Path, name: &str) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(ckpt_err(path, format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    tensors.extend(state.generator.params().snapshot()?);
    tensors.extend(state.discriminator.params().snapshot()?);
    let (gen_state, gen_updates) = state.gen_opt.state();
    let (disc_state, disc_updates) = state.disc_opt.state();
    for (k, v) in gen_state {
        tensors.insert(format!("opt.gen.{k}"), v);
    }
    for (k, v) in disc_state {
        tensors.insert(format!("opt.disc.{k}"), v);
    }
    let raws = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), to_raw(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views = raws
        .iter()
        .map(|(k, r)| {
            TensorView::new(r.dtype, r.shape.clone(), &r.bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("step".to_string(), state.step.to_string()),
        ("config".to_string(), serde_json::to_string(&state.config)?),
        ("config_hash".to_string(), state.config.hash()),
        ("frozen_digest".to_string(), state.generator.encoder_digest()?),
        ("generator_updates".to_string(), gen_updates.to_string()),
        ("discriminator_updates".to_string(), disc_updates.to_string()),
    ]);
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let kv = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err(path, "missing header metadata"))?;
    let field = |k: &str| kv.get(k).ok_or_else(|| ckpt_err(path, format!("missing field {k}")));
    if field("format")? != FORMAT {
        return Err(ckpt_err(path, format!("unknown format {:?}", field("format")?)));
    }
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|e| ckpt_err(path, format!("{k}: {e}"))) };
    let config: TrainConfig = serde_json::from_str(field("config")?)?;
    let config_hash = field("config_hash")?.clone();
    if config.hash() != config_hash {
        return Err(ckpt_err(path, "config hash does not match the stored config"));
    }
    let mut tensors: Vec<TensorEntry> = meta
        .tensors()
        .into_iter()
        .map(|(name, info)| TensorEntry {
            name,
            shape: info.shape.clone(),
            dtype: format!("{:?}", info.dtype),
        })
        .collect();
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(CheckpointManifest {
        step: num("step")?,
        config,
        config_hash,
        frozen_digest: field("frozen_digest")?.clone(),
        generator_updates: num("generator_updates")?,
        discriminator_updates: num("discriminator_updates")?,
        tensors,
    })
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    parse_manifest(path, &read_bytes(path)?)
}

fn load_tensors(path: &Path, bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            let t = from_view(&view, path, &name)?;
            Ok((name, t))
        })
        .collect()
}

fn subset(all: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    all.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

fn verify_frozen(path: &Path, generator: &Generator, manifest: &CheckpointManifest) -> Result<()> {
    if generator.encoder_digest()? != manifest.frozen_digest {
        return Err(ckpt_err(path, "frozen encoder digest mismatch"));
    }
    Ok(())
}

/// Restores a full training state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = read_bytes(path)?;
    let manifest = parse_manifest(path, &bytes)?;
    let all = load_tensors(path, &bytes)?;
    let mut state = TrainState::new(manifest.config.clone())?;
    let names = |store: &crate::nn::ParamStore| -> BTreeMap<String, Tensor> {
        store
            .iter()
            .filter_map(|(k, _)| all.get(k).map(|t| (k.to_string(), t.clone())))
            .collect()
    };
    let wrap = |e: Error| ckpt_err(path, e);
    state.generator.load_values(&names(state.generator.params())).map_err(wrap)?;
    state
        .discriminator
        .params()
        .assign(&names(state.discriminator.params()))
        .map_err(wrap)?;
    state
        .gen_opt
        .load_state(&subset(&all, "opt.gen."), manifest.generator_updates)
        .map_err(wrap)?;
    state
        .disc_opt
        .load_state(&subset(&all, "opt.disc."), manifest.discriminator_updates)
        .map_err(wrap)?;
    state.step = manifest.step;
    verify_frozen(path, &state.generator, &manifest)?;
    Ok(state)
}

/// Builds the generator described by a checkpoint and loads its weights.
pub fn load_generator(path: &Path, dtype: DType) -> Result<Generator> {
    let bytes = read_bytes(path)?;
    let manifest = parse_manifest(path, &bytes)?;
    let all = load_tensors(path, &bytes)?;
    let generator = Generator::new(manifest.config.generator.clone(), &Device::Cpu, dtype, manifest.config.seed)?;
    let values: BTreeMap<String, Tensor> = generator
        .params()
        .iter()
        .filter_map(|(k, _)| all.get(k).map(|t| (k.to_string(), t.clone())))
        .collect();
    generator.load_values(&values).map_err(|e| ckpt_err(path, e))?;
    if dtype == DType::F32 {
        verify_frozen(path, &generator, &manifest)?;
    }
    Ok(generator)
}
