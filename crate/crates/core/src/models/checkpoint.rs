//! Checkpoint directories: `manifest.json` plus one `KDTN` tensor file per
//! parameter under `params/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelSpec, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    /// Seed the parameters were originally built from.
    pub seed: u64,
    pub fingerprint: String,
    pub parameters: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    model: &TransformerModel,
    dir: impl AsRef<Path>,
    metadata: BTreeMap<String, String>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut parameters = Vec::with_capacity(model.params().len());
    for (i, (name, t)) in model.params().iter().enumerate() {
        let file = format!("params/{i:04}_{name}.kdt");
        write_tensor(dir.join(&file), t)?;
        parameters.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        spec: model.spec().clone(),
        seed: model.seed(),
        fingerprint: model.params().fingerprint(),
        parameters,
        metadata,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TransformerModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut model = build_model(&manifest.spec, manifest.seed)?;
    if manifest.parameters.len() != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, architecture has {}",
            manifest.parameters.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.parameters {
        let t = read_tensor(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("{}: shape differs from manifest", entry.name)));
        }
        let dst = model
            .params_mut()
            .get_mut(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        dst.copy_from(&t)?;
    }
    if model.params().fingerprint() != manifest.fingerprint {
        return Err(Error::Format("parameter fingerprint mismatch".into()));
    }
    Ok((model, manifest))
}
