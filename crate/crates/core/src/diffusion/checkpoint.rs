//! Checkpoint directory: `model.safetensors`, optional `ema.safetensors`,
//! and `manifest.json` describing the config and every array.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelConfig, VideoModel};
use super::train::{Ema, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "entitydrag-checkpoint/1";
pub const MODEL_FILE: &str = "model.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: usize,
    /// Whether `ema.safetensors` is present.
    pub ema: bool,
    pub training: Option<TrainConfig>,
    pub arrays: Vec<ArrayInfo>,
}

/// SHA-256 over the canonical JSON of the model config.
pub fn config_hash(config: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("model config serializes");
    hex::encode(Sha256::digest(bytes))
}

fn dtype_name(dtype: DType) -> String {
    format!("{dtype:?}").to_lowercase()
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(
    dir: impl AsRef<Path>,
    model: &VideoModel,
    ema: Option<&Ema>,
    step: usize,
    training: Option<&TrainConfig>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let vars = model.store().named_vars();
    let tensors: HashMap<String, Tensor> = vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
    write_atomic(&dir.join(MODEL_FILE), |p| Ok(candle_core::safetensors::save(&tensors, p)?))?;
    match ema {
        Some(ema) => {
            let shadows: HashMap<String, Tensor> = ema.tensors().iter().cloned().collect();
            write_atomic(&dir.join(EMA_FILE), |p| Ok(candle_core::safetensors::save(&shadows, p)?))?;
        }
        None => {
            let _ = std::fs::remove_file(dir.join(EMA_FILE));
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config().clone(),
        config_hash: config_hash(model.config()),
        step,
        ema: ema.is_some(),
        training: training.cloned(),
        arrays: vars
            .iter()
            .map(|(n, v)| ArrayInfo {
                name: n.clone(),
                shape: v.dims().to_vec(),
                dtype: dtype_name(v.dtype()),
            })
            .collect(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), |p| {
        std::fs::write(p, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    })?;
    Ok(manifest)
}

/// Reads and checks the manifest; a missing checkpoint is `NotReady`.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::NotReady(format!("no checkpoint at {}", dir.as_ref().display())));
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Spec(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    if manifest.config_hash != config_hash(&manifest.config) {
        return Err(Error::Spec("checkpoint config hash does not match its config".into()));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Raw,
    /// EMA weights when present, raw otherwise.
    PreferEma,
}

/// Rebuilds the model from `dir` and overwrites every parameter.
pub fn load(dir: impl AsRef<Path>, weights: Weights, dtype: DType, device: &Device) -> Result<(VideoModel, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let file: PathBuf = if weights == Weights::PreferEma && manifest.ema {
        dir.join(EMA_FILE)
    } else {
        dir.join(MODEL_FILE)
    };
    if !file.exists() {
        return Err(Error::NotReady(format!("missing {}", file.display())));
    }
    let tensors = candle_core::safetensors::load(&file, device)?;
    let model = VideoModel::new(&manifest.config, 0, dtype, device)?;
    restore(&model, &tensors, &manifest)?;
    Ok((model, manifest))
}

fn restore(model: &VideoModel, tensors: &HashMap<String, Tensor>, manifest: &Manifest) -> Result<()> {
    let vars = model.store().named_vars();
    if vars.len() != manifest.arrays.len() {
        return Err(Error::Spec(format!(
            "checkpoint lists {} arrays, model has {}",
            manifest.arrays.len(),
            vars.len()
        )));
    }
    for ((name, var), info) in vars.iter().zip(&manifest.arrays) {
        if *name != info.name || var.dims() != info.shape.as_slice() {
            return Err(Error::Spec(format!("checkpoint array `{}` does not match parameter `{name}`", info.name)));
        }
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Spec(format!("checkpoint is missing array `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::Spec(format!("array `{name}` has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::tests::tiny_config;

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let model = VideoModel::new(&tiny_config(), 42, DType::F32, &Device::Cpu).unwrap();
        let m = save(dir.path(), &model, None, 17, Some(&TrainConfig::default())).unwrap();
        assert_eq!(m.step, 17);
        assert!(!m.ema);
        let (loaded, m2) = load(dir.path(), Weights::PreferEma, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m, m2);
        for ((n1, a), (n2, b)) in model.store().named_vars().iter().zip(loaded.store().named_vars().iter()) {
            assert_eq!(n1, n2);
            let va = a.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let vb = b.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb, "{n1}");
        }
    }

    #[test]
    fn ema_weights_are_selected() {
        let dir = tempfile::tempdir().unwrap();
        let model = VideoModel::new(&tiny_config(), 1, DType::F32, &Device::Cpu).unwrap();
        let ema = Ema::new(model.store(), 0.9).unwrap();
        // make the raw weights differ from the shadow
        let (name, var) = &model.store().named_vars()[0];
        var.set(&(var.as_tensor() + 1.0).unwrap()).unwrap();
        save(dir.path(), &model, Some(&ema), 1, None).unwrap();
        let (raw, _) = load(dir.path(), Weights::Raw, DType::F32, &Device::Cpu).unwrap();
        let (avg, _) = load(dir.path(), Weights::PreferEma, DType::F32, &Device::Cpu).unwrap();
        let r = raw.store().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let a = avg.store().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in r.iter().zip(&a) {
            assert!((x - y - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn missing_checkpoint_is_not_ready() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(dir.path().join("nope"), Weights::Raw, DType::F32, &Device::Cpu).err().unwrap();
        assert!(matches!(err, Error::NotReady(_)));
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = VideoModel::new(&tiny_config(), 1, DType::F32, &Device::Cpu).unwrap();
        let mut m = save(dir.path(), &model, None, 0, None).unwrap();
        m.config.timesteps += 1;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Spec(_))));
    }
}
