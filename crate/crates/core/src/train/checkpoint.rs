//! Versioned run archives: one safetensors file per saved iteration with
//! every parameter, buffer and optimizer moment, plus a JSON metadata blob.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::config::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "he2ihc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    /// Exponential moving average of the generator total loss.
    pub ema_total: Option<f64>,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.safetensors")
}

/// Iteration encoded in a checkpoint file name.
pub fn parse_checkpoint_name(name: &str) -> Option<u64> {
    name.strip_prefix("ckpt-")?.strip_suffix(".safetensors")?.parse().ok()
}

/// Highest-iteration checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(t) = parse_checkpoint_name(&name.to_string_lossy()) {
            if best.as_ref().is_none_or(|(b, _)| t > *b) {
                best = Some((t, entry.path()));
            }
        }
    }
    Ok(best)
}

/// Writes `tensors` and `meta` to `path` via a temporary file, so an
/// interrupted write never leaves a truncated checkpoint behind.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    let tmp = path.with_extension("safetensors.tmp");
    let contiguous = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(contiguous.iter().map(|(k, v)| (k.as_str(), v)), Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, device: &Device) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing run metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", meta.format_version)));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| bad(e.to_string()))?
        .into_iter()
        .collect();
    Ok((tensors, meta))
}

/// Entries under `prefix.` with the prefix stripped.
pub fn strip_prefix(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}
