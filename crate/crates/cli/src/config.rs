//! Run configuration: one TOML file, with environment overrides for paths.

use std::path::{Path, PathBuf};

use relit_core::trainer::TrainConfig;
use relit_core::vlm::DEFAULT_BACKBONE;
use relit_core::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_backbone() -> String {
    DEFAULT_BACKBONE.to_string()
}

fn default_device() -> String {
    "cpu".to_string()
}

fn default_log_level() -> String {
    "info".to_string()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub backlit_dir: Option<PathBuf>,
    pub welllit_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Backbone weight cache; `RELIT_WEIGHTS_DIR` applies when unset.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: default_backbone(),
            device: default_device(),
            log_level: default_log_level(),
            weights_dir: None,
            paths: Paths::default(),
            train: TrainConfig::default(),
        }
    }
}

pub const PATH_ENV: [(&str, &str); 4] = [
    ("RELIT_BACKLIT_DIR", "backlit_dir"),
    ("RELIT_WELLLIT_DIR", "welllit_dir"),
    ("RELIT_OUT_DIR", "out_dir"),
    ("RELIT_CHECKPOINT_DIR", "checkpoint_dir"),
];

impl RunConfig {
    /// Parses `text`; relative paths are taken relative to `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        for p in cfg.path_slots() {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        }
        if let Some(w) = &mut cfg.weights_dir {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    fn path_slots(&mut self) -> [&mut Option<PathBuf>; 4] {
        let p = &mut self.paths;
        [&mut p.backlit_dir, &mut p.welllit_dir, &mut p.out_dir, &mut p.checkpoint_dir]
    }

    /// Applies `RELIT_*_DIR` variables from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for ((var, _), slot) in PATH_ENV.iter().zip(self.path_slots()) {
            if let Some(v) = lookup(var).filter(|v| !v.is_empty()) {
                *slot = Some(PathBuf::from(v));
            }
        }
    }

    pub fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.paths
            .checkpoint_dir
            .clone()
            .or_else(|| self.paths.out_dir.as_ref().map(|o| o.join("checkpoints")))
    }

    /// Everything a training run needs, checked before any weights load.
    pub fn validate_for_training(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train.{}", strip(&e))))?;
        check_device(&self.device)?;
        for (name, dir) in [
            ("paths.backlit_dir", &self.paths.backlit_dir),
            ("paths.welllit_dir", &self.paths.welllit_dir),
        ] {
            match dir {
                None => return Err(Error::Config(format!("{name}: required for training"))),
                Some(d) if !d.is_dir() => {
                    return Err(Error::Config(format!("{name}: {} is not a directory", d.display())))
                }
                Some(_) => {}
            }
        }
        if self.paths.out_dir.is_none() {
            return Err(Error::Config("paths.out_dir: required for training".into()));
        }
        Ok(())
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Only the CPU backend is compiled in.
pub fn check_device(device: &str) -> Result<()> {
    if device != "cpu" {
        return Err(Error::Config(format!(
            "device: '{device}' is not available in this build (only 'cpu')"
        )));
    }
    Ok(())
}
