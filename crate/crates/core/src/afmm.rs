//! Adaptive feature modulation: a residual refinement whose *shape* (a local
//! deformation `t`) and *strength* (a bounded gate `c`) come from separate
//! branches over the instance-normalised feature.
//!
//! ```text
//! F̂ = Norm(F)
//! c = σ(W1·F̂ + b1)              pointwise
//! t = Conv3x3(W2·F̂ + b2)        pointwise, then 3×3 with zero padding
//! M = Wo·(c ⊙ t) + bo           pointwise
//! F_out = F + M
//! ```
//!
//! `Wo` and `bo` start at zero, so a fresh module is an exact identity.

use crate::params::{init, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ConvGeom, Graph, Real, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Parameter names of one module under a common prefix.
#[derive(Clone, Debug)]
pub struct Afmm {
    pub channels: usize,
    w1: String,
    b1: String,
    w2: String,
    b2: String,
    kernel: String,
    wo: String,
    bo: String,
}

impl Afmm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        Self {
            channels,
            w1: n("w1"),
            b1: n("b1"),
            w2: n("w2"),
            b2: n("b2"),
            kernel: n("kernel"),
            wo: n("wo"),
            bo: n("bo"),
        }
    }

    /// Registers freshly initialised parameters; the output projection is zero.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        let c = self.channels;
        store.insert(&self.w1, init::he_uniform(rng, &[c, c, 1, 1], c, 0.5));
        store.insert(&self.b1, Tensor::zeros(&[c]));
        store.insert(&self.w2, init::he_uniform(rng, &[c, c, 1, 1], c, 0.5));
        store.insert(&self.b2, Tensor::zeros(&[c]));
        store.insert(&self.kernel, init::he_uniform(rng, &[c, c, 3, 3], 9 * c, 0.5));
        store.insert(&self.wo, Tensor::zeros(&[c, c, 1, 1]));
        store.insert(&self.bo, Tensor::zeros(&[c]));
    }

    pub fn param_names(&self) -> [&str; 7] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.kernel, &self.wo, &self.bo]
    }

    pub fn normalize<T: Real>(g: &mut Graph<T>, f: Var) -> Var {
        g.instance_norm(f, NORM_EPS)
    }

    /// Bounded gate `c ∈ (0, 1)`.
    pub fn strength<T: Real>(&self, g: &mut Graph<T>, f_hat: Var) -> Var {
        let (w, b) = (g.param(&self.w1), g.param(&self.b1));
        let z = g.conv2d(f_hat, w, Some(b), ConvGeom::pointwise());
        g.sigmoid(z)
    }

    /// Local deformation `t`.
    pub fn shape<T: Real>(&self, g: &mut Graph<T>, f_hat: Var) -> Var {
        let (w, b) = (g.param(&self.w2), g.param(&self.b2));
        let z = g.conv2d(f_hat, w, Some(b), ConvGeom::pointwise());
        let k = g.param(&self.kernel);
        g.conv2d(z, k, None, ConvGeom::same3())
    }

    /// Residual map `M(F)`.
    pub fn modulation<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Var {
        let f_hat = Self::normalize(g, f);
        let c = self.strength(g, f_hat);
        let t = self.shape(g, f_hat);
        let ct = g.mul(c, t);
        let (wo, bo) = (g.param(&self.wo), g.param(&self.bo));
        g.conv2d(ct, wo, Some(bo), ConvGeom::pointwise())
    }

    /// `(F + M(F), M(F))`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, f: Var) -> (Var, Var) {
        let m = self.modulation(g, f);
        (g.add(f, m), m)
    }
}
