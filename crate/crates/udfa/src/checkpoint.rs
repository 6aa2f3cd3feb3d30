//! Trainable-state checkpoints: a safetensors file plus a JSON manifest of
//! tensor names, shapes, and the resolved config hash.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::UDfa;
use crate::{Result, UdfaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// `trainable` or `buffer`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub iteration: usize,
    pub epoch: usize,
}

/// `stem.safetensors` and `stem.json` for a checkpoint stem path.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("safetensors"), stem.with_extension("json"))
}

pub fn save(model: &UDfa, stem: &Path, config_sha256: &str, iteration: usize, epoch: usize) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| UdfaError::io(dir, e))?;
    }
    let (st, js) = paths(stem);
    let mut map: HashMap<String, Tensor> = HashMap::new();
    let mut entries = Vec::new();
    let groups = [("trainable", &model.trainable), ("buffer", &model.buffers)];
    for (kind, vars) in groups {
        for (name, v) in vars.iter() {
            map.insert(name.clone(), v.as_tensor().clone());
            entries.push(TensorEntry {
                name: name.clone(),
                shape: v.dims().to_vec(),
                kind: kind.to_owned(),
            });
        }
    }
    candle_core::safetensors::save(&map, &st)?;
    let manifest = Manifest {
        config_sha256: config_sha256.to_owned(),
        tensors: entries,
        iteration,
        epoch,
    };
    fs::write(&js, serde_json::to_string_pretty(&manifest)?).map_err(|e| UdfaError::io(&js, e))?;
    Ok(())
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let (_, js) = paths(stem);
    let text = fs::read_to_string(&js).map_err(|e| UdfaError::io(&js, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Restores trainable tensors and buffers. Names and shapes must match
/// exactly; a differing config hash is only logged.
pub fn load(model: &UDfa, stem: &Path, config_sha256: Option<&str>) -> Result<Manifest> {
    let manifest = read_manifest(stem)?;
    if let Some(h) = config_sha256 {
        if h != manifest.config_sha256 {
            log::warn!(
                "checkpoint {} was written under config {}, current config is {}",
                stem.display(),
                manifest.config_sha256,
                h
            );
        }
    }
    let (st, _) = paths(stem);
    let tensors = candle_core::safetensors::load(&st, model.device())?;
    let targets = model.trainable.iter().chain(&model.buffers);
    let mut missing = Vec::new();
    let mut seen = 0usize;
    for (name, var) in targets {
        match tensors.get(name) {
            Some(t) if t.dims() == var.dims() => {
                var.set(&t.to_dtype(var.dtype())?)?;
                seen += 1;
            }
            Some(t) => {
                return Err(UdfaError::Checkpoint(format!(
                    "{name}: stored shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )))
            }
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() || seen != tensors.len() {
        let known: std::collections::BTreeSet<&String> = model
            .trainable
            .iter()
            .chain(&model.buffers)
            .map(|(n, _)| n)
            .collect();
        let extra: Vec<&String> = tensors.keys().filter(|k| !known.contains(k)).collect();
        return Err(UdfaError::Checkpoint(format!(
            "checkpoint {} does not match the model: missing {missing:?}, unexpected {extra:?}",
            st.display()
        )));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use udfa_core::ModelConfig;

    #[test]
    fn save_load_round_trip() {
        let cfg = ModelConfig::tiny().with_input_size(56, 56);
        let a = UDfa::new(&cfg, 1, &Device::Cpu).unwrap();
        let b = UDfa::new(&cfg, 2, &Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck/last");
        save(&a, &stem, "h", 10, 1).unwrap();
        let m = load(&b, &stem, Some("h")).unwrap();
        assert_eq!(m.iteration, 10);
        for ((_, va), (_, vb)) in a.trainable.iter().zip(&b.trainable) {
            let x = va.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
        let mut other = cfg.clone();
        other.num_stages = 2;
        let c = UDfa::new(&other, 1, &Device::Cpu).unwrap();
        assert!(load(&c, &stem, None).is_err());
    }
}
