//! JSON model files. Floats are written in shortest round-trip form, so a
//! save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::TrainConfig;
use crate::error::{Error, Result};
use crate::neural::{RamDims, RamParams};
use crate::ram::{RamKind, RamModel};

pub const MODEL_FORMAT: &str = "ratrack-model-v1";

type Tensors = BTreeMap<String, Vec<f64>>;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    kind: RamKind,
    dims: RamDims,
    seed: u64,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    temporal: Option<Tensors>,
    #[serde(default)]
    spatial: Option<Tensors>,
}

/// A loaded model with the metadata stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: RamModel,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
}

fn to_tensors(p: &RamParams) -> Tensors {
    p.tensors().into_iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect()
}

fn from_tensors(dims: RamDims, mut map: Tensors, which: &str, path: &Path) -> Result<RamParams> {
    let bad = |reason: String| Error::Model { path: path.to_path_buf(), reason };
    let mut p = RamParams::zeros(dims);
    for (name, slot) in p.tensors_mut() {
        let values = map
            .remove(name)
            .ok_or_else(|| bad(format!("{which} encoder lacks tensor {name}")))?;
        if values.len() != slot.len() {
            return Err(bad(format!(
                "{which} tensor {name} has {} values, dims require {}",
                values.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(&values);
    }
    if let Some(extra) = map.keys().next() {
        return Err(bad(format!("{which} encoder has unknown tensor {extra}")));
    }
    if !p.is_finite() {
        return Err(bad(format!("{which} encoder contains non-finite values")));
    }
    Ok(p)
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &RamModel,
    seed: u64,
    train_config: Option<&TrainConfig>,
) -> Result<()> {
    let path = path.as_ref();
    let dims = model
        .temporal
        .as_ref()
        .or(model.spatial.as_ref())
        .map(|p| p.dims)
        .ok_or_else(|| Error::Invariant("model without encoders".into()))?;
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        kind: model.kind,
        dims,
        seed,
        train_config: train_config.cloned(),
        temporal: model.temporal.as_ref().map(to_tensors),
        spatial: model.spatial.as_ref().map(to_tensors),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Invariant(format!("model serialization failed: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Model { path: path.to_path_buf(), reason };
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(bad(format!("format {:?}, expected {MODEL_FORMAT:?}", file.format)));
    }
    file.dims.validate().map_err(|e| bad(e.to_string()))?;
    let temporal = file
        .temporal
        .map(|t| from_tensors(file.dims, t, "temporal", path))
        .transpose()?;
    let spatial = file
        .spatial
        .map(|t| from_tensors(file.dims, t, "spatial", path))
        .transpose()?;
    let model = RamModel::new(file.kind, temporal, spatial).map_err(|e| bad(e.to_string()))?;
    Ok(SavedModel {
        model,
        seed: file.seed,
        train_config: file.train_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> RamDims {
        RamDims { input_dim: 4, model_dim: 16, heads: 2, ffn_dim: 32 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        for (kind, seed) in [(RamKind::Stram, 3), (RamKind::Tram, 4), (RamKind::Sram, 5)] {
            let mut model = RamModel::init(kind, dims(), seed).unwrap();
            // values without short decimal forms
            if let Some(p) = model.temporal.as_mut() {
                p.query.weight[(0, 0)] = 0.1 + 0.2;
                p.norm1.beta[1] = -1.0 / 3.0;
            }
            let cfg = TrainConfig::default();
            save_model(&path, &model, seed, Some(&cfg)).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.model, model);
            assert_eq!(back.seed, seed);
            assert_eq!(back.train_config, Some(cfg));
            for (a, b) in back
                .model
                .temporal
                .iter()
                .chain(&back.model.spatial)
                .flat_map(|p| p.tensors())
                .zip(model.temporal.iter().chain(&model.spatial).flat_map(|p| p.tensors()))
            {
                assert!(a.1.iter().zip(b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    fn saved_text(dir: &Path) -> (std::path::PathBuf, String) {
        let path = dir.join("m.json");
        let model = RamModel::init(RamKind::Tram, dims(), 1).unwrap();
        save_model(&path, &model, 1, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        (path, text)
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (path, text) = saved_text(dir.path());
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Model { .. })));
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (path, text) = saved_text(dir.path());
        fs::write(&path, text.replace("\"model_dim\": 16", "\"model_dim\": 32")).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, Error::Model { .. }), "{err}");
    }

    #[test]
    fn wrong_version_and_kind_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (path, text) = saved_text(dir.path());
        fs::write(&path, text.replace(MODEL_FORMAT, "ratrack-model-v0")).unwrap();
        assert!(load_model(&path).is_err());
        fs::write(&path, text.replace("\"kind\": \"tram\"", "\"kind\": \"stram\"")).unwrap();
        assert!(load_model(&path).is_err());
        assert!(matches!(load_model(dir.path().join("missing.json")), Err(Error::Io { .. })));
    }
}
