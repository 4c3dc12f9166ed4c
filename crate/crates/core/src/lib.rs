//! Robust image watermarking with coupled feature modulation.
//!
//! An embedder U-Net hides a bit string in an image, a multi-scale extractor
//! recovers it after distortion, and a coupling mechanism exchanges smoothed
//! modulation states between the two networks while they train.

pub mod ablation;
pub mod afmm;
pub mod checkpoint;
pub mod cim;
pub mod config;
pub mod data;
pub mod distortions;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod gradcheck;
pub mod image_io;
pub mod layers;
pub mod losses;
pub mod message;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use cim::{CimState, GuidanceSignals};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use image_io::ImageTensor;
pub use losses::LossBreakdown;
pub use message::BitMessage;
pub use model::Model;
