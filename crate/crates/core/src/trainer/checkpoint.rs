//! Checkpoint layout: `<root>/ckpt-<iter>/{state,prompts,enhancer,outputs}.bin`
//! plus a `LATEST` file naming the newest complete directory. A directory
//! is only named in `LATEST` after every file in it has been written, so an
//! interrupted write leaves the previous checkpoint in force.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde_json::{json, Value};

use crate::blob;
use crate::enhancer::{Enhancer, EnhancerConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const LATEST: &str = "LATEST";
pub const STATE_FILE: &str = "state.bin";
pub const PROMPTS_FILE: &str = "prompts.bin";
pub const ENHANCER_FILE: &str = "enhancer.bin";
pub const OUTPUTS_FILE: &str = "outputs.bin";

const ENHANCER_KIND: &str = "enhancer";
pub(crate) const STATE_KIND: &str = "train_state";
const OUTPUTS_KIND: &str = "outputs";
const KEEP: usize = 2;

pub fn save_enhancer(path: &Path, net: &Enhancer, round_t: u64, iteration: u64) -> Result<()> {
    let meta = json!({
        "architecture": net.config(),
        "round_t": round_t,
        "iteration": iteration,
    });
    blob::write(path, ENHANCER_KIND, &net.params().to_map(), meta)
}

/// Loads an enhancer checkpoint. With `expected`, an architecture that
/// differs from the stored one is a configuration error.
pub fn load_enhancer(
    path: &Path,
    expected: Option<&EnhancerConfig>,
    dtype: DType,
    dev: &Device,
) -> Result<(Enhancer, Value)> {
    let (tensors, meta) = blob::read(path, ENHANCER_KIND)?;
    let stored: EnhancerConfig = serde_json::from_value(meta["architecture"].clone())?;
    if let Some(e) = expected {
        if e != &stored {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with enhancer {stored:?}, configuration asks for {e:?}",
                path.display()
            )));
        }
    }
    let net = Enhancer::new(stored, 0, dtype, dev)?;
    net.load_tensors(&tensors)?;
    Ok((net, meta))
}

fn dir_name(iter: u64) -> String {
    format!("ckpt-{iter:08}")
}

/// Directory a path refers to: a checkpoint root (via `LATEST`) or a
/// checkpoint directory itself.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join(LATEST);
    let name = std::fs::read_to_string(&latest).map_err(|e| {
        Error::Config(format!("{} is not a checkpoint directory: {e}", path.display()))
    })?;
    let dir = path.join(name.trim());
    if !dir.join(STATE_FILE).is_file() {
        return Err(Error::Integrity {
            path: latest,
            reason: format!("names missing checkpoint {}", dir.display()),
        });
    }
    Ok(dir)
}

/// The enhancer file a user-supplied path refers to: the file itself, a
/// checkpoint directory, or a checkpoint root.
pub fn find_enhancer(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    Ok(resolve(path)?.join(ENHANCER_FILE))
}

/// Same for the prompt pair.
pub fn find_prompts(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    Ok(resolve(path)?.join(PROMPTS_FILE))
}

/// Fresh directory for the checkpoint at `iter`.
pub(crate) fn begin(root: &Path, iter: u64) -> Result<PathBuf> {
    let dir = root.join(dir_name(iter));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Points `LATEST` at `dir` and prunes all but the newest checkpoints.
pub(crate) fn commit(root: &Path, dir: &Path) -> Result<()> {
    let name = dir.file_name().unwrap().to_string_lossy().into_owned();
    blob::write_atomic(&root.join(LATEST), name.as_bytes())?;
    let mut existing: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ckpt-") && *n != name)
        .collect();
    existing.sort();
    let excess = (existing.len() + 1).saturating_sub(KEEP);
    for old in existing.into_iter().take(excess) {
        std::fs::remove_dir_all(root.join(old))?;
    }
    Ok(())
}

/// Output rasters of the enhancer at round starts, keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct OutputSets {
    pub ids: Vec<String>,
    pub sets: BTreeMap<String, Vec<ImageTensor>>,
}

pub(crate) fn save_outputs(path: &Path, out: &OutputSets) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, imgs) in &out.sets {
        tensors.insert(name.clone(), ImageTensor::stack(imgs, DType::F32, &Device::Cpu)?);
    }
    blob::write(path, OUTPUTS_KIND, &tensors, json!({ "ids": out.ids }))
}

pub(crate) fn load_outputs(path: &Path) -> Result<OutputSets> {
    let (tensors, meta) = blob::read(path, OUTPUTS_KIND)?;
    let ids: Vec<String> = serde_json::from_value(meta["ids"].clone())?;
    let mut sets = BTreeMap::new();
    for (name, t) in tensors {
        let imgs = ImageTensor::unstack(&t)?;
        if imgs.len() != ids.len() {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("set '{name}' has {} images for {} ids", imgs.len(), ids.len()),
            });
        }
        sets.insert(name, imgs);
    }
    Ok(OutputSets { ids, sets })
}

/// Stored tensors of a checkpoint, flattened under a prefix.
pub(crate) fn prefixed(prefix: &str, map: BTreeMap<String, Tensor>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    map.into_iter().map(move |(k, v)| (format!("{prefix}{k}"), v))
}

pub(crate) fn strip_prefix(prefix: &str, map: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enhancer_round_trip_and_architecture_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EnhancerConfig {
            depth: 2,
            base_channels: 4,
            eps_illum: 0.01,
        };
        let net = Enhancer::new(cfg.clone(), 3, DType::F32, &Device::Cpu).unwrap();
        let p = dir.path().join("e.bin");
        save_enhancer(&p, &net, 2, 77).unwrap();
        let (back, meta) = load_enhancer(&p, Some(&cfg), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.params().fingerprint().unwrap(), net.params().fingerprint().unwrap());
        assert_eq!(meta["iteration"], 77);
        let other = EnhancerConfig {
            base_channels: 8,
            ..cfg
        };
        assert!(matches!(
            load_enhancer(&p, Some(&other), DType::F32, &Device::Cpu),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn latest_tracks_newest_and_old_ones_are_pruned() {
        let root = tempfile::tempdir().unwrap();
        for it in [5u64, 10, 15] {
            let d = begin(root.path(), it).unwrap();
            std::fs::write(d.join(STATE_FILE), b"x").unwrap();
            commit(root.path(), &d).unwrap();
        }
        assert_eq!(resolve(root.path()).unwrap(), root.path().join("ckpt-00000015"));
        assert!(!root.path().join("ckpt-00000005").exists());
        assert!(root.path().join("ckpt-00000010").exists());
    }

    #[test]
    fn outputs_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<ImageTensor> = (0..3)
            .map(|i| ImageTensor::from_fn(4, 5, |c, y, x| ((i + c + y * x) as f32 * 0.1234567).fract()))
            .collect();
        let out = OutputSets {
            ids: vec!["a".into(), "b".into(), "c".into()],
            sets: BTreeMap::from([("current".to_string(), imgs.clone())]),
        };
        let p = dir.path().join("o.bin");
        save_outputs(&p, &out).unwrap();
        let back = load_outputs(&p).unwrap();
        assert_eq!(back.ids, out.ids);
        assert_eq!(back.sets["current"], imgs);
    }
}
