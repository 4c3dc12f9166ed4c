//! Watermark extractor: a three-scale pyramid, four coupled modulation
//! stages per scale, pooled per-scale descriptors fused by a small MLP and a
//! sigmoid head with one output per bit.
//!
//! Slot order is scale-major: scale 1 stages take slots 0–3, the half scale
//! 4–7 and the quarter scale 8–11.

use crate::afmm::Afmm;
use crate::cim::{coupled_stage, Cim, Coupling, Side, EXTRACT_SLOTS};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv, Dense};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{ConvGeom, Graph, Real, Var};

pub const SCALES: usize = 3;
pub const STAGES: usize = 4;
pub const MIN_SIZE: usize = 32;

#[derive(Clone, Debug)]
struct ScalePath {
    stem: Conv,
    afmms: Vec<Afmm>,
    down: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    pub width: usize,
    pub message_length: usize,
    scales: Vec<ScalePath>,
    fuse_hidden: Dense,
    fuse_out: Dense,
    head: Dense,
}

#[derive(Clone, Debug)]
pub struct ExtractOutput {
    /// `[N, l]` pre-sigmoid scores.
    pub logits: Var,
    /// `[N, l]` probabilities.
    pub probs: Var,
    pub maps: Vec<Var>,
    pub states: Vec<Var>,
}

/// Sizes of the three pyramid levels (floor halving).
pub fn pyramid_sizes(h: usize, w: usize) -> [(usize, usize); SCALES] {
    [(h, w), (h / 2, w / 2), (h / 4, w / 4)]
}

impl Extractor {
    pub fn new(cfg: &RunConfig) -> Self {
        let c = cfg.extractor_width;
        let scales = (0..SCALES)
            .map(|s| ScalePath {
                stem: Conv::new(&format!("ext.s{}.stem", s + 1), 3, c, ConvGeom::same3()),
                afmms: (0..STAGES)
                    .map(|k| Afmm::new(&format!("ext.s{}.stage{}", s + 1, k + 1), c))
                    .collect(),
                down: (0..STAGES - 1)
                    .map(|k| Conv::new(&format!("ext.s{}.down{}", s + 1, k + 1), c, c, ConvGeom::down3()))
                    .collect(),
            })
            .collect();
        Self {
            width: c,
            message_length: cfg.message_length,
            scales,
            fuse_hidden: Dense::new("ext.fuse1", SCALES * c, 2 * c),
            fuse_out: Dense::new("ext.fuse2", 2 * c, c),
            head: Dense::new("ext.head", c, cfg.message_length),
        }
    }

    pub fn slot_channels(&self) -> Vec<usize> {
        vec![self.width; EXTRACT_SLOTS]
    }

    pub fn afmm(&self, slot: usize) -> &Afmm {
        &self.scales[slot / STAGES].afmms[slot % STAGES]
    }

    pub fn head_names(&self) -> (&str, &str) {
        (&self.head.weight, &self.head.bias)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        for path in &self.scales {
            path.stem.init(store, rng);
            for a in &path.afmms {
                a.init(store, rng);
            }
            for d in &path.down {
                d.init(store, rng);
            }
        }
        self.fuse_hidden.init(store, rng, 1.0);
        self.fuse_out.init(store, rng, 1.0);
        self.head.init(store, rng, 1.0);
    }

    pub fn check_input(shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::Contract(format!("expected NCHW image batch, got {shape:?}")));
        };
        if c != 3 {
            return Err(Error::Contract(format!("extractor expects 3 channels, got {c}")));
        }
        if h < MIN_SIZE || w < MIN_SIZE {
            return Err(Error::Contract(format!("image {h}x{w} smaller than {MIN_SIZE}x{MIN_SIZE}")));
        }
        Ok(())
    }

    /// The input at full, half and quarter resolution.
    pub fn build_pyramid<T: Real>(g: &mut Graph<T>, image: Var) -> [Var; SCALES] {
        let (_, _, h, w) = g.value(image).dims4();
        let [_, (h2, w2), (h4, w4)] = pyramid_sizes(h, w);
        let half = g.resize(image, h2, w2);
        let quarter = g.resize(image, h4, w4);
        [image, half, quarter]
    }

    /// Pooled `[N, C]` descriptor of one scale plus its stage outputs.
    fn scale_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: usize,
        input: Var,
        coupling: &Coupling,
        cim: &Cim,
        maps: &mut Vec<Var>,
        states: &mut Vec<Var>,
    ) -> Var {
        let path = &self.scales[s];
        let mut f = path.stem.forward_silu(g, input);
        for k in 0..STAGES {
            let slot = s * STAGES + k;
            let out = coupled_stage(g, &path.afmms[k], cim.slot(Side::Extract, slot), slot, f, coupling);
            maps.push(out.map);
            states.push(out.state);
            f = out.feature;
            if k < STAGES - 1 {
                f = path.down[k].forward_silu(g, f);
            }
        }
        g.gap(f)
    }

    /// Full forward pass. `coupling.guidance` is `[1, 12]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var, coupling: &Coupling, cim: &Cim) -> ExtractOutput {
        debug_assert_eq!(g.value(coupling.guidance).numel(), EXTRACT_SLOTS);
        let pyramid = Self::build_pyramid(g, image);
        let mut maps = Vec::with_capacity(EXTRACT_SLOTS);
        let mut states = Vec::with_capacity(EXTRACT_SLOTS);
        let pooled: Vec<Var> = (0..SCALES)
            .map(|s| self.scale_features(g, s, pyramid[s], coupling, cim, &mut maps, &mut states))
            .collect();
        let u = g.concat(&pooled);
        let hdn = self.fuse_hidden.forward(g, u);
        let hdn = g.silu(hdn);
        let fused = self.fuse_out.forward(g, hdn);
        let logits = self.head.forward(g, fused);
        let probs = g.sigmoid(logits);
        ExtractOutput {
            logits,
            probs,
            maps,
            states,
        }
    }
}
