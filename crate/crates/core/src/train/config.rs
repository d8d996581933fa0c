use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::loss::LossWeights;
use crate::render::DnrConfig;
use crate::select::{EpsilonSchedule, QConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Negative mean probe MSE after the inner training.
    NegLoss,
    /// Change in mean probe PSNR caused by the newest selection, in units of 10 dB.
    NegPsnrGain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Rl,
    Random,
    Farthest,
}

impl SelectorKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Rl => "rl",
            SelectorKind::Random => "random",
            SelectorKind::Farthest => "farthest",
        }
    }
}

/// Everything that determines a training run apart from the data.
/// Every field is required; a missing one fails parsing with its name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Views to select, `M < N`.
    pub m: usize,
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub lr_step1: f64,
    pub lr_step2: f64,
    /// Inner DNR iterations after every selection (`K`).
    pub inner_iters: usize,
    /// Selector updates on the episode's transitions after every episode.
    pub rl_updates: usize,
    pub lr_rl: f64,
    /// Episodes between target-network refreshes.
    pub target_refresh: usize,
    pub reset_per_episode: bool,
    pub augment: bool,
    pub reward: RewardMode,
    pub selector: SelectorKind,
    pub perceptual_seed: u64,
    pub weights: LossWeights,
    pub epsilon: EpsilonSchedule,
    pub model: DnrConfig,
    pub q: QConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            m: 6,
            epochs_step1: 50,
            epochs_step2: 100,
            lr_step1: 1e-3,
            lr_step2: 1e-4,
            inner_iters: 50,
            rl_updates: 4,
            lr_rl: 1e-3,
            target_refresh: 10,
            reset_per_episode: false,
            augment: true,
            reward: RewardMode::NegLoss,
            selector: SelectorKind::Rl,
            perceptual_seed: 7,
            weights: LossWeights::default(),
            epsilon: EpsilonSchedule::default(),
            model: DnrConfig::default(),
            q: QConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        if self.epochs_step1 == 0 {
            return bad("epochs_step1 must be positive".into());
        }
        for (name, lr) in [("lr_step1", self.lr_step1), ("lr_step2", self.lr_step2), ("lr_rl", self.lr_rl)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.inner_iters == 0 || self.target_refresh == 0 {
            return bad("inner_iters and target_refresh must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.q.gamma) {
            return bad(format!("q.gamma must lie in [0, 1], got {}", self.q.gamma));
        }
        self.weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.epsilon.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mc = &self.model;
        if mc.channels < 12 || mc.levels == 0 || mc.widths.is_empty() {
            return bad("model needs channels >= 12, levels >= 1 and at least one width".into());
        }
        if mc.tex_resolution % (1 << (mc.levels - 1)) != 0 {
            return bad(format!(
                "model.tex_resolution {} is not divisible by 2^(levels - 1)",
                mc.tex_resolution
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_weight_is_named() {
        let text = TrainConfig::default().to_toml().replace("ssim = 0.1\n", "");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("ssim"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
