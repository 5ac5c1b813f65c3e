//! JSON configuration with `grid`, `model`, `train` and `synth` sections.
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::opp::OppConfig;
use crate::ppg::PpgConfig;
use crate::synth::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub bins: usize,
    pub active_threshold: f64,
    pub score_threshold: f64,
    pub ppg_hidden: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Acceptable planar error for score targets, meters.
    pub d_std: f64,
    /// Seed of the random column appended during feature expansion.
    pub noise_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let opp = OppConfig::default();
        let ppg = PpgConfig::default();
        Self {
            bins: opp.bins,
            active_threshold: opp.active_threshold,
            score_threshold: ppg.score_threshold,
            ppg_hidden: ppg.hidden,
            focal_alpha: opp.focal_alpha,
            focal_gamma: opp.focal_gamma,
            smooth_l1_beta: opp.smooth_l1_beta,
            d_std: crate::losses::D_STD,
            noise_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn opp(&self) -> OppConfig {
        OppConfig {
            bins: self.bins,
            active_threshold: self.active_threshold,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
            smooth_l1_beta: self.smooth_l1_beta,
        }
    }

    pub fn ppg(&self) -> PpgConfig {
        PpgConfig {
            hidden: self.ppg_hidden,
            score_threshold: self.score_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 || self.bins > 32 {
            return bad(format!("bins must lie in 1..=32, got {}", self.bins));
        }
        if self.ppg_hidden == 0 {
            return bad("ppg_hidden must be positive".into());
        }
        for (name, v) in [("active_threshold", self.active_threshold), ("score_threshold", self.score_threshold), ("focal_alpha", self.focal_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.focal_gamma >= 0.0) || !(self.smooth_l1_beta > 0.0) || !(self.d_std > 0.0) {
            return bad("focal_gamma must be >= 0, smooth_l1_beta and d_std > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step (gradient accumulation window).
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub clip_norm: f64,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            max_lr: 1e-3,
            weight_decay: 0.01,
            pct_start: 0.3,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(self.weight_decay >= 0.0) || !(self.pct_start > 0.0 && self.pct_start < 1.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("weight_decay >= 0, pct_start in (0, 1) and clip_norm > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SceneSpec,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (h, w) = self.grid.dims()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("grid is {h}x{w}; both sides must be multiples of 4")));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
