//! Run configuration, validated at construction and serialised as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub mse: f64,
    pub perceptual: f64,
}

impl LossWeights {
    pub const STANDARD: Self = Self {
        bce: 1.5,
        mse: 1.0,
        perceptual: 1.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Which training-time distortions are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistortionToggles {
    pub affine: bool,
    pub noise: bool,
    pub noise_sigma: f64,
}

impl Default for DistortionToggles {
    fn default() -> Self {
        Self {
            affine: true,
            noise: true,
            noise_sigma: 0.04,
        }
    }
}

/// Component switches for ablations. An "off" modulation module is an exact
/// identity; CIM off forces a zero channel adjustment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggles {
    pub embedder_afmm: bool,
    pub extractor_afmm: bool,
    pub cim: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self {
            embedder_afmm: true,
            extractor_afmm: true,
            cim: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEnd {
    Standard,
    Deformable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataConfig {
    Synthetic,
    ImageFolder { path: String },
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub message_length: usize,
    /// Embedder U-Net widths, shallowest first.
    pub embedder_widths: [usize; 4],
    /// Channels of each front-end branch (global and local).
    pub front_channels: usize,
    /// Channels of the broadcast message map.
    pub message_channels: usize,
    /// Per-scale extractor width `C`.
    pub extractor_width: usize,
    pub front_end: FrontEnd,
    pub global_residual: bool,
    pub loss_weights: LossWeights,
    pub ema_beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dataset_size: usize,
    pub data: DataConfig,
    pub distortions: DistortionToggles,
    pub ablation: AblationToggles,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: 64×64, 32 bits, synthetic textures.
    pub fn desk() -> Self {
        Self {
            image_size: [64, 64],
            message_length: 32,
            embedder_widths: [16, 32, 64, 128],
            front_channels: 8,
            message_channels: 16,
            extractor_width: 16,
            front_end: FrontEnd::Standard,
            global_residual: true,
            loss_weights: LossWeights::STANDARD,
            ema_beta: 0.9,
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 30,
            dataset_size: 2000,
            data: DataConfig::Synthetic,
            distortions: DistortionToggles::default(),
            ablation: AblationToggles::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    /// Full-size settings: 256×256, 128 bits, batch 16, 75 epochs.
    pub fn full_scale() -> Self {
        Self {
            image_size: [256, 256],
            message_length: 128,
            batch_size: 16,
            epochs: 75,
            dataset_size: 100_000,
            ..Self::desk()
        }
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return bad(format!("image size {h}x{w} must be positive multiples of 16"));
        }
        if h < 32 || w < 32 {
            return bad(format!("image size {h}x{w} must be at least 32x32"));
        }
        if self.message_length == 0 || self.message_length % 4 != 0 {
            return bad(format!(
                "message length {} must be a positive multiple of 4",
                self.message_length
            ));
        }
        let lw = self.loss_weights;
        for (name, v) in [("bce", lw.bce), ("mse", lw.mse), ("perceptual", lw.perceptual)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("loss weight {name}={v} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta {} must lie in [0, 1)", self.ema_beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.embedder_widths.contains(&0)
            || self.front_channels == 0
            || self.message_channels == 0
            || self.extractor_width == 0
        {
            return bad("channel widths must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.dataset_size == 0 {
            return bad("dataset size must be positive".into());
        }
        if !(self.distortions.noise_sigma >= 0.0 && self.distortions.noise_sigma.is_finite()) {
            return bad("noise sigma must be >= 0".into());
        }
        Ok(())
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
