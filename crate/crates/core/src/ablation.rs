//! Component and training-strategy ablations: train each variant under the
//! same seed and data, then score imperceptibility and robustness.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{AblationToggles, DistortionToggles, RunConfig};
use crate::data::DataSource;
use crate::distortions::EvalDistortion;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, EvalOptions};
use crate::training::{fit, FitOptions};

/// Which modulation and coupling components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Full,
    NoEmbedderAfmm,
    NoExtractorAfmm,
    NoAfmm,
    NoCim,
}

impl Architecture {
    pub const ALL: [Self; 5] = [
        Self::Full,
        Self::NoEmbedderAfmm,
        Self::NoExtractorAfmm,
        Self::NoAfmm,
        Self::NoCim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoEmbedderAfmm => "no-embedder-afmm",
            Self::NoExtractorAfmm => "no-extractor-afmm",
            Self::NoAfmm => "no-afmm",
            Self::NoCim => "no-cim",
        }
    }

    pub fn toggles(self) -> AblationToggles {
        let on = AblationToggles::default();
        match self {
            Self::Full => on,
            Self::NoEmbedderAfmm => AblationToggles {
                embedder_afmm: false,
                ..on
            },
            Self::NoExtractorAfmm => AblationToggles {
                extractor_afmm: false,
                ..on
            },
            Self::NoAfmm => AblationToggles {
                embedder_afmm: false,
                extractor_afmm: false,
                ..on
            },
            Self::NoCim => AblationToggles { cim: false, ..on },
        }
    }
}

/// Which training-time distortions are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    AffineNoise,
    None,
    AffineOnly,
    NoiseOnly,
}

impl Strategy {
    pub const ALL: [Self; 4] = [Self::AffineNoise, Self::None, Self::AffineOnly, Self::NoiseOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::AffineNoise => "affine+noise",
            Self::None => "none",
            Self::AffineOnly => "affine-only",
            Self::NoiseOnly => "noise-only",
        }
    }

    /// Applies the strategy on top of the configured noise level.
    pub fn toggles(self, base: DistortionToggles) -> DistortionToggles {
        let (affine, noise) = match self {
            Self::AffineNoise => (true, true),
            Self::None => (false, false),
            Self::AffineOnly => (true, false),
            Self::NoiseOnly => (false, true),
        };
        DistortionToggles { affine, noise, ..base }
    }
}

/// One ablation cell, written `arch` or `arch:strategy`
/// (e.g. `no-cim`, `full:none`). The strategy defaults to `affine+noise`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub architecture: Architecture,
    pub strategy: Strategy,
}

impl Variant {
    pub const FULL: Self = Self {
        architecture: Architecture::Full,
        strategy: Strategy::AffineNoise,
    };

    pub fn new(architecture: Architecture, strategy: Strategy) -> Self {
        Self { architecture, strategy }
    }

    /// The base configuration with this variant's switches applied.
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            ablation: self.architecture.toggles(),
            distortions: self.strategy.toggles(base.distortions),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.architecture.name())?;
        if self.strategy != Strategy::AffineNoise {
            write!(f, ":{}", self.strategy.name())?;
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant(s.to_string());
        let (arch, strategy) = s.split_once(':').unwrap_or((s, Strategy::AffineNoise.name()));
        let architecture = Architecture::ALL
            .into_iter()
            .find(|a| a.name() == arch.trim())
            .ok_or_else(unknown)?;
        let strategy = Strategy::ALL
            .into_iter()
            .find(|st| st.name() == strategy.trim())
            .ok_or_else(unknown)?;
        Ok(Self { architecture, strategy })
    }
}

/// Scores of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub clean_accuracy: f64,
    pub combined_accuracy: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub images: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &Variant) -> Option<&AblationRow> {
        let name = variant.to_string();
        self.rows.iter().find(|r| r.variant == name)
    }

    /// One JSON object per variant.
    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serialises") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationOptions {
    pub eval: EvalOptions,
    /// Each variant's checkpoints and loss log go to `<dir>/<variant>/`.
    pub output_dir: Option<PathBuf>,
}

/// Scores a trained checkpoint on clean and combined-distortion copies.
pub fn score(variant: &Variant, ck: &Checkpoint, eval: &dyn DataSource, opts: &EvalOptions) -> Result<AblationRow> {
    let distortions = [EvalDistortion::parse("original")?, EvalDistortion::parse("combined")?];
    let report = evaluate_checkpoint(ck, eval, &distortions, opts)?;
    Ok(AblationRow {
        variant: variant.to_string(),
        psnr: report.imperceptibility.psnr,
        ssim: report.imperceptibility.ssim,
        clean_accuracy: report.accuracy("original").expect("requested"),
        combined_accuracy: report.accuracy("combined").expect("requested"),
        steps: ck.step,
    })
}

/// Trains and scores every variant from the same base configuration.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    train: &dyn DataSource,
    eval: &dyn DataSource,
    opts: &AblationOptions,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(Error::Config(format!("variant `{v}` requested twice")));
        }
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.configure(base);
        let fit_opts = match &opts.output_dir {
            Some(dir) => {
                let sub = dir.join(v.to_string().replace([':', '+'], "_"));
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                FitOptions {
                    loss_log: Some(sub.join("loss.jsonl")),
                    checkpoint_dir: Some(sub),
                    stop_after_epoch: None,
                }
            }
            None => FitOptions::default(),
        };
        let ck = fit(&cfg, train, &fit_opts)?;
        rows.push(score(v, &ck, eval, &opts.eval)?);
    }
    Ok(AblationReport {
        seed: base.seed,
        images: opts.eval.limit.map_or(eval.len(), |l| l.min(eval.len())),
        rows,
    })
}
