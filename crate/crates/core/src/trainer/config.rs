use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enhancer::EnhancerConfig;
use crate::error::{Error, Result};
use crate::prompt::{InitMode, Margins};

/// Every knob of a training run. Defaults are the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Global budget shared by all stages. Zero makes training a no-op.
    pub total_iters: u64,
    pub prompt_init_iters: u64,
    pub self_recon_iters: u64,
    /// Iteration cap for each enhancement or refinement stage.
    pub stage_cap: u64,
    pub lr_prompt: f64,
    pub lr_net: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_prompt: usize,
    pub batch_net: usize,
    pub crop_size: usize,
    /// A refinement stage ends once the sum of its last `thr_window` losses
    /// drops below this.
    pub thr_a: f64,
    /// Same rule for the enhancement stages.
    pub thr_b: f64,
    pub thr_window: usize,
    pub margins: Margins,
    pub seed: u64,
    /// Weight of the identity term in the enhancement loss.
    pub identity_weight: f64,
    /// Multiplier on cosines before the two-way softmax; `None` uses the
    /// backbone's own scale.
    pub logit_scale: Option<f64>,
    pub num_tokens: usize,
    pub init_mode: InitMode,
    pub enhancer: EnhancerConfig,
    /// Extra checkpoints every this many iterations; stage ends and the
    /// end of the run always checkpoint.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 50_000,
            prompt_init_iters: 10_000,
            self_recon_iters: 1_000,
            stage_cap: 1_000,
            lr_prompt: 5e-6,
            lr_net: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            batch_prompt: 8,
            batch_net: 16,
            crop_size: 512,
            thr_a: 60.0,
            thr_b: 90.0,
            thr_window: 100,
            margins: Margins::default(),
            seed: 0,
            identity_weight: 0.9,
            logit_scale: None,
            num_tokens: 16,
            init_mode: InitMode::default(),
            enhancer: EnhancerConfig::default(),
            checkpoint_every: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters > 0 {
            for (name, v) in [
                ("prompt_init_iters", self.prompt_init_iters),
                ("self_recon_iters", self.self_recon_iters),
                ("stage_cap", self.stage_cap),
            ] {
                if v == 0 {
                    return Err(field(name, "must be positive"));
                }
            }
            if self.prompt_init_iters + self.self_recon_iters >= self.total_iters {
                return Err(field(
                    "total_iters",
                    format!(
                        "{} must exceed prompt_init_iters + self_recon_iters = {}",
                        self.total_iters,
                        self.prompt_init_iters + self.self_recon_iters
                    ),
                ));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(field("checkpoint_every", "must be positive when set"));
        }
        for (name, v) in [("lr_prompt", self.lr_prompt), ("lr_net", self.lr_net)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must be in [0,1), got {v}")));
            }
        }
        if self.batch_prompt < 2 {
            return Err(field("batch_prompt", "needs at least 2 (one image per class)"));
        }
        if self.batch_net == 0 {
            return Err(field("batch_net", "must be positive"));
        }
        if self.crop_size < 8 {
            return Err(field("crop_size", format!("must be at least 8, got {}", self.crop_size)));
        }
        if self.thr_window == 0 {
            return Err(field("thr_window", "must be positive"));
        }
        if !(self.identity_weight > 0.0 && self.identity_weight <= 1.0) {
            return Err(field("identity_weight", format!("must be in (0,1], got {}", self.identity_weight)));
        }
        if let Some(s) = self.logit_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(field("logit_scale", format!("must be positive, got {s}")));
            }
        }
        if self.num_tokens == 0 {
            return Err(field("num_tokens", "must be positive"));
        }
        self.margins.validate().map_err(|e| field("margins", e))?;
        self.enhancer.validate().map_err(|e| field("enhancer", e))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Whether a run with `self` may continue from a checkpoint written
    /// under `other`: only the budget and checkpoint cadence may differ.
    pub fn resumable_from(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            total_iters: 0,
            checkpoint_every: None,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"total_iter": 5}"#).is_err());
    }

    #[test]
    fn budget_must_cover_warmup() {
        let c = TrainConfig {
            total_iters: 11_000,
            ..TrainConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("total_iters"), "{msg}");
        let noop = TrainConfig {
            total_iters: 0,
            ..TrainConfig::default()
        };
        noop.validate().unwrap();
    }

    #[test]
    fn resume_tolerates_budget_changes_only() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            total_iters: 60_000,
            checkpoint_every: Some(10),
            ..a.clone()
        };
        assert!(b.resumable_from(&a));
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert!(!c.resumable_from(&a));
    }
}
