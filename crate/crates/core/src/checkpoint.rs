//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` manifest length, a JSON manifest, then every tensor as raw
//! little-endian `f32` values at the offsets the manifest records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cim::{CimState, GuidanceSignals};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CIMARKCK";
pub const FORMAT_VERSION: u32 = 1;

/// Adaptive-moment optimiser accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub t: u64,
}

impl OptimizerState {
    pub fn zeros_like(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (name, t) in p.iter() {
                s.insert(name.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState,
    pub cim: CimState,
    /// Present exactly when at least one training step has run.
    pub guidance: Option<GuidanceSignals>,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    step: u64,
    epoch: u64,
    optimizer_t: u64,
    cim: CimState,
    guidance: Option<GuidanceSignals>,
    tensors: Vec<Entry>,
}

const GROUPS: [&str; 3] = ["param", "adam.m", "adam.v"];

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.cim.validate()?;
        if self.cim.step_count != self.step {
            return Err(Error::Checkpoint(format!(
                "coupling state saw {} updates but {} steps ran",
                self.cim.step_count, self.step
            )));
        }
        if self.guidance.is_some() != (self.step > 0) {
            return Err(Error::Checkpoint(
                "guidance must be present exactly when training has run".into(),
            ));
        }
        for store in [&self.optimizer.m, &self.optimizer.v] {
            let same = store.len() == self.params.len()
                && self
                    .params
                    .iter()
                    .all(|(n, t)| store.get(n).is_some_and(|s| s.shape() == t.shape()));
            if !same {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let stores = [&self.params, &self.optimizer.m, &self.optimizer.v];
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (group, store) in GROUPS.iter().zip(stores) {
            for (name, t) in store.iter() {
                tensors.push(Entry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += 4 * t.numel() as u64;
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            optimizer_t: self.optimizer.t,
            cim: self.cim.clone(),
            guidance: self.guidance.clone(),
            tensors,
        };
        let text = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + text.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for store in stores {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..body_start])?;
        manifest.config.validate()?;
        let body = &bytes[body_start..];

        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let mut expected_end = 0u64;
        for e in &manifest.tensors {
            let gi = GROUPS
                .iter()
                .position(|g| *g == e.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group `{}`", e.group)))?;
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(4 * n)
                .filter(|&end| end <= body.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let data = body[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if stores[gi].contains(&e.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
            stores[gi].insert(e.name.clone(), Tensor::new(&e.shape, data));
            expected_end = expected_end.max(end as u64);
        }
        if expected_end as usize != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let [params, m, v] = stores;
        let ck = Checkpoint {
            config: manifest.config,
            params,
            optimizer: OptimizerState {
                m,
                v,
                t: manifest.optimizer_t,
            },
            cim: manifest.cim,
            guidance: manifest.guidance,
            step: manifest.step,
            epoch: manifest.epoch,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Guidance for inference, or an error for a checkpoint that never trained.
    pub fn require_guidance(&self) -> Result<&GuidanceSignals> {
        self.guidance.as_ref().ok_or_else(|| {
            Error::Checkpoint("checkpoint has no frozen guidance; it was never trained".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cim::Cim;
    use crate::model::Model;

    fn small_config() -> RunConfig {
        RunConfig {
            image_size: [32, 32],
            message_length: 8,
            embedder_widths: [4, 4, 4, 4],
            front_channels: 2,
            message_channels: 2,
            extractor_width: 4,
            ..RunConfig::desk()
        }
    }

    fn fresh() -> Checkpoint {
        let cfg = small_config();
        let model = Model::new(&cfg).unwrap();
        let params = model.init_params::<f32>();
        Checkpoint {
            optimizer: OptimizerState::zeros_like(&params),
            config: cfg,
            params,
            cim: CimState::default(),
            guidance: None,
            step: 0,
            epoch: 0,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = fresh();
        let mut st = CimState::default();
        st.update(&[0.1; 8], &[-0.3; 12], 0.9).unwrap();
        ck.cim = st;
        ck.step = 1;
        ck.optimizer.t = 1;
        ck.guidance = Some(Cim::freeze(&ck.params, &ck.cim).unwrap());
        for (_, t) in ck.optimizer.v.iter_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f32::from_bits(0x3000_0000 + i as u32));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (name, t) in ck.params.iter() {
            let b = back.params.get(name).unwrap();
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn guidance_presence_tracks_training() {
        let mut ck = fresh();
        assert!(ck.require_guidance().is_err());
        ck.guidance = Some(GuidanceSignals::zeros());
        assert!(ck.to_bytes().is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = fresh().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut future = bytes.clone();
        future[8] = 99;
        assert!(Checkpoint::from_bytes(&future).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
