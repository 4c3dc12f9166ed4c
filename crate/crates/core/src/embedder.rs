//! Watermark embedder: a four-level U-Net over fused image and message
//! features, with coupled modulation modules on every skip and every decoder
//! stage.
//!
//! Slot order: skips at levels 1–4 take slots 0–3, decoder stages take slots
//! 4–7 in processing order (deepest level first).

use crate::afmm::Afmm;
use crate::cim::{coupled_stage, Cim, Coupling, Side, EMBED_SLOTS};
use crate::config::{FrontEnd, RunConfig};
use crate::error::{Error, Result};
use crate::layers::{Conv, DeformConv, Dense};
use crate::message::BitMessage;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{ConvGeom, Graph, Real, Tensor, Var};

const LEVELS: usize = 4;

#[derive(Clone, Debug)]
enum Branch {
    Plain(Conv),
    Deformable(DeformConv),
}

impl Branch {
    fn new(kind: FrontEnd, name: &str, cout: usize, geom: ConvGeom) -> Self {
        match kind {
            FrontEnd::Standard => Branch::Plain(Conv::new(name, 3, cout, geom)),
            FrontEnd::Deformable => Branch::Deformable(DeformConv::new(name, 3, cout, geom)),
        }
    }

    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        match self {
            Branch::Plain(c) => c.init(store, rng),
            Branch::Deformable(d) => d.init(store, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = match self {
            Branch::Plain(c) => c.forward(g, x),
            Branch::Deformable(d) => d.forward(g, x),
        };
        g.silu(y)
    }
}

/// Layer layout of the embedder for one configuration.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub message_length: usize,
    pub global_residual: bool,
    global: Branch,
    local: Branch,
    message: Dense,
    encode: Vec<Conv>,
    down: Vec<Conv>,
    bottleneck: Conv,
    decode: Vec<Conv>,
    /// Indexed by slot.
    pub afmms: Vec<Afmm>,
    head: Conv,
}

/// Everything one embedder pass produces.
#[derive(Clone, Debug)]
pub struct EmbedOutput {
    pub image: Var,
    pub maps: Vec<Var>,
    pub states: Vec<Var>,
}

impl Embedder {
    pub fn new(cfg: &RunConfig) -> Self {
        let w = cfg.embedder_widths;
        let fc = cfg.front_channels;
        let fused = 2 * fc + cfg.message_channels;
        let encode = (0..LEVELS)
            .map(|i| {
                let cin = if i == 0 { fused } else { w[i - 1] };
                Conv::new(&format!("emb.enc{}", i + 1), cin, w[i], ConvGeom::same3())
            })
            .collect();
        let down = (0..LEVELS)
            .map(|i| Conv::new(&format!("emb.down{}", i + 1), w[i], w[i], ConvGeom::down3()))
            .collect();
        // decoder level i fuses the upsampled deeper feature with skip i
        let decode = (0..LEVELS)
            .map(|i| {
                let deeper = w[(i + 1).min(LEVELS - 1)];
                Conv::new(&format!("emb.dec{}", i + 1), deeper + w[i], w[i], ConvGeom::same3())
            })
            .collect();
        let mut afmms: Vec<Afmm> = (0..LEVELS)
            .map(|i| Afmm::new(&format!("emb.skip{}", i + 1), w[i]))
            .collect();
        for level in (0..LEVELS).rev() {
            afmms.push(Afmm::new(&format!("emb.dec{}.afmm", level + 1), w[level]));
        }
        Self {
            message_length: cfg.message_length,
            global_residual: cfg.global_residual,
            global: Branch::new(cfg.front_end, "emb.front.global", fc, ConvGeom::dilated3(2)),
            local: Branch::new(cfg.front_end, "emb.front.local", fc, ConvGeom::same3()),
            message: Dense::new("emb.message", cfg.message_length, cfg.message_channels),
            encode,
            down,
            bottleneck: Conv::new("emb.bottleneck", w[3], w[3], ConvGeom::same3()),
            decode,
            afmms,
            head: Conv::new("emb.head", w[0], 3, ConvGeom::same3()),
        }
    }

    /// Channel count of every slot, in slot order.
    pub fn slot_channels(&self) -> Vec<usize> {
        self.afmms.iter().map(|a| a.channels).collect()
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        self.global.init(store, rng);
        self.local.init(store, rng);
        self.message.init(store, rng, 1.0);
        for c in self.encode.iter().chain(&self.down).chain(std::iter::once(&self.bottleneck)) {
            c.init(store, rng);
        }
        for c in &self.decode {
            c.init(store, rng);
        }
        for a in &self.afmms {
            a.init(store, rng);
        }
        if self.global_residual {
            self.head.init_zero(store);
        } else {
            self.head.init(store, rng);
        }
    }

    /// `[N, l]` of ±1 values.
    pub fn message_signs<T: Real>(messages: &[BitMessage]) -> Tensor<T> {
        let l = messages[0].len();
        let data = messages.iter().flat_map(|m| m.signs().map(T::cst)).collect();
        Tensor::new(&[messages.len(), l], data)
    }

    /// Concatenation of global-branch, local-branch and message-map features.
    pub fn fuse_inputs<T: Real>(&self, g: &mut Graph<T>, image: Var, signs: Var) -> Var {
        let (_, _, h, w) = g.value(image).dims4();
        let fg = self.global.forward(g, image);
        let fl = self.local.forward(g, image);
        let m = self.message.forward(g, signs);
        let mmap = g.broadcast_spatial(m, h, w);
        g.concat(&[fg, fl, mmap])
    }

    pub fn check_input(&self, shape: &[usize], messages: usize, bits: usize) -> Result<()> {
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Contract(format!("expected NCHW image batch, got {shape:?}")));
        };
        if c != 3 {
            return Err(Error::Contract(format!("embedder expects 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Contract(format!("image size {h}x{w} is not a multiple of 16")));
        }
        if n != messages {
            return Err(Error::Contract(format!("{n} images but {messages} messages")));
        }
        if bits != self.message_length {
            return Err(Error::Contract(format!(
                "message has {bits} bits, model expects {}",
                self.message_length
            )));
        }
        Ok(())
    }

    /// Full forward pass. `signs` is `[N, l]`; `coupling.guidance` is `[1, 8]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var, signs: Var, coupling: &Coupling, cim: &Cim) -> EmbedOutput {
        debug_assert_eq!(g.value(coupling.guidance).numel(), EMBED_SLOTS);
        let mut maps = Vec::with_capacity(EMBED_SLOTS);
        let mut states = Vec::with_capacity(EMBED_SLOTS);
        let mut run_slot = |g: &mut Graph<T>, slot: usize, f: Var| {
            let out = coupled_stage(g, &self.afmms[slot], cim.slot(Side::Embed, slot), slot, f, coupling);
            maps.push((slot, out.map));
            states.push((slot, out.state));
            out.feature
        };

        let mut h = self.fuse_inputs(g, image, signs);
        let mut skips = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let x = self.encode[level].forward_silu(g, h);
            h = self.down[level].forward_silu(g, x);
            skips.push(run_slot(g, level, x));
        }
        let mut d = self.bottleneck.forward_silu(g, h);
        for (k, level) in (0..LEVELS).rev().enumerate() {
            let (_, _, sh, sw) = g.value(skips[level]).dims4();
            let up = g.resize(d, sh, sw);
            let cat = g.concat(&[up, skips[level]]);
            let y = self.decode[level].forward_silu(g, cat);
            d = run_slot(g, LEVELS + k, y);
        }
        let psi = self.head.forward(g, d);
        let out = if self.global_residual {
            let sum = g.add(image, psi);
            g.clamp(sum, -T::one(), T::one())
        } else {
            g.tanh(psi)
        };
        maps.sort_by_key(|&(s, _)| s);
        states.sort_by_key(|&(s, _)| s);
        EmbedOutput {
            image: out,
            maps: maps.into_iter().map(|(_, m)| m).collect(),
            states: states.into_iter().map(|(_, s)| s).collect(),
        }
    }
}
