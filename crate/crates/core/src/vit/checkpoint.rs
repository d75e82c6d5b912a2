//! Weight checkpoints: `weights.vtf` holds the parameter tensors as
//! concatenated VTF1 records, `manifest.json` names them in the same order
//! and carries the model config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_tensors, write_tensors};

use super::{ModelError, ViTConfig, ViTWeights};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.vtf";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ViTConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, weights: &ViTWeights) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format: "VTF1".into(),
        config: weights.config().clone(),
        tensors: weights
            .names()
            .iter()
            .zip(weights.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(dir.join(WEIGHTS_FILE))?);
    write_tensors(&mut w, weights.tensors())?;
    w.flush()?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ViTWeights, ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if manifest.format != "VTF1" {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format {}",
            manifest.format
        )));
    }
    let tensors = read_tensors(&mut BufReader::new(File::open(dir.join(WEIGHTS_FILE))?))?;
    if tensors.len() != manifest.tensors.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest lists {} tensors, file holds {}",
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    let named = manifest
        .tensors
        .into_iter()
        .zip(tensors)
        .map(|(e, t)| {
            if e.shape != t.shape() {
                Err(ModelError::Checkpoint(format!(
                    "{}: manifest shape {:?}, stored {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )))
            } else {
                Ok((e.name, t))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    ViTWeights::from_named(&manifest.config, named)
}
