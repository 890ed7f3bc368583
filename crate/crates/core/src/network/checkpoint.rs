//! Self-contained network checkpoints: a directory holding `config.json`,
//! `spirals.json`, `weights.hmck` and the mesh hierarchy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MeshNet, NetworkConfig, Normalization, TrainReport};
use crate::autodiff::checkpoint::{find, read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::sampling::MeshHierarchy;
use crate::spiral::SpiralTable;

#[derive(Serialize, Deserialize)]
struct Meta {
    network: NetworkConfig,
    normalization: Normalization,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes into a temporary sibling directory, then renames it over `dir`.
pub fn save_checkpoint(net: &MeshNet, report: Option<&TrainReport>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint path {}", dir.display())))?;
    let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_json(
        &tmp.join("config.json"),
        &Meta {
            network: net.config.clone(),
            normalization: net.norm,
        },
    )?;
    write_json(&tmp.join("spirals.json"), &net.tables)?;
    if let Some(r) = report {
        write_json(&tmp.join("train_log.json"), r)?;
    }
    write_checkpoint(tmp.join("weights.hmck"), &net.params)?;
    net.hierarchy.save(tmp.join("hierarchy"))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<MeshNet> {
    let dir = dir.as_ref();
    let meta: Meta = read_json(&dir.join("config.json"))?;
    let tables: Vec<SpiralTable> = read_json(&dir.join("spirals.json"))?;
    let hierarchy = MeshHierarchy::load(dir.join("hierarchy"))?;
    let mut net = MeshNet::with_operators(meta.network, hierarchy, Some(tables))?;
    net.norm = meta.normalization;
    let stored = read_checkpoint(dir.join("weights.hmck"))?;
    let mut params = Vec::new();
    for (name, shape) in net.param_shapes() {
        let t = find(&stored, &name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        params.push((name, t.clone()));
    }
    net.params = params;
    Ok(net)
}
