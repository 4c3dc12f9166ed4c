//! Cross-end coupling between the embedder and extractor modulation modules.
//!
//! Every modulation map is summarised into a scalar state by a shared head.
//! States are smoothed over training steps, projected across to the other
//! network, mixed with the local state by a learned gate and turned into a
//! per-channel shift of the module output.

use serde::{Deserialize, Serialize};

use crate::afmm::Afmm;
use crate::error::{Error, Result};
use crate::params::{init, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const EMBED_SLOTS: usize = 8;
pub const EXTRACT_SLOTS: usize = 12;
pub const STATE_HIDDEN: usize = 16;

const HEAD_W1: &str = "cim.head.w1";
const HEAD_B1: &str = "cim.head.b1";
const HEAD_W2: &str = "cim.head.w2";
const HEAD_B2: &str = "cim.head.b2";
const PROJ_E2X: &str = "cim.proj_e2x";
const PROJ_X2E: &str = "cim.proj_x2e";

/// Running coupling state carried across optimiser steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CimState {
    pub s_e: Vec<f64>,
    pub s_x: Vec<f64>,
    pub smooth_e: Vec<f64>,
    pub smooth_x: Vec<f64>,
    pub step_count: u64,
}

impl Default for CimState {
    fn default() -> Self {
        Self {
            s_e: vec![0.0; EMBED_SLOTS],
            s_x: vec![0.0; EXTRACT_SLOTS],
            smooth_e: vec![0.0; EMBED_SLOTS],
            smooth_x: vec![0.0; EXTRACT_SLOTS],
            step_count: 0,
        }
    }
}

impl CimState {
    /// Folds one step's instantaneous states into the moving averages.
    pub fn update(&mut self, s_e: &[f64], s_x: &[f64], beta: f64) -> Result<()> {
        self.smooth_e = smooth(&self.smooth_e, s_e, beta)?;
        self.smooth_x = smooth(&self.smooth_x, s_x, beta)?;
        self.s_e = s_e.to_vec();
        self.s_x = s_x.to_vec();
        self.step_count += 1;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let lens_ok = self.s_e.len() == EMBED_SLOTS
            && self.smooth_e.len() == EMBED_SLOTS
            && self.s_x.len() == EXTRACT_SLOTS
            && self.smooth_x.len() == EXTRACT_SLOTS;
        if !lens_ok {
            return Err(Error::Checkpoint("coupling state has wrong slot counts".into()));
        }
        let all = self.s_e.iter().chain(&self.s_x).chain(&self.smooth_e).chain(&self.smooth_x);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupling state".into()));
        }
        Ok(())
    }
}

/// Guidance for each module slot, derived from smoothed states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSignals {
    pub p_e: Vec<f64>,
    pub p_x: Vec<f64>,
    pub source_step: u64,
}

impl GuidanceSignals {
    pub fn zeros() -> Self {
        Self {
            p_e: vec![0.0; EMBED_SLOTS],
            p_x: vec![0.0; EXTRACT_SLOTS],
            source_step: 0,
        }
    }
}

/// `β·prev + (1 − β)·current`, elementwise.
pub fn smooth(prev: &[f64], current: &[f64], beta: f64) -> Result<Vec<f64>> {
    if prev.len() != current.len() {
        return Err(Error::Contract(format!(
            "smoothing length mismatch: {} vs {}",
            prev.len(),
            current.len()
        )));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Contract(format!("smoothing factor {beta} outside [0, 1)")));
    }
    Ok(prev
        .iter()
        .zip(current)
        .map(|(&p, &c)| beta * p + (1.0 - beta) * c)
        .collect())
}

/// Which network a slot belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Embed,
    Extract,
}

/// Per-slot gate logit and channel adjustment parameters.
#[derive(Clone, Debug)]
pub struct Slot {
    pub channels: usize,
    gate: String,
    w: String,
    b: String,
}

impl Slot {
    fn new(side: Side, index: usize, channels: usize) -> Self {
        let tag = match side {
            Side::Embed => "e",
            Side::Extract => "x",
        };
        let n = |s: &str| format!("cim.{tag}{}.{s}", index + 1);
        Self {
            channels,
            gate: n("gate"),
            w: n("w"),
            b: n("b"),
        }
    }
}

/// Parameter layout of the coupling mechanism.
#[derive(Clone, Debug)]
pub struct Cim {
    pub embed: Vec<Slot>,
    pub extract: Vec<Slot>,
}

impl Cim {
    pub fn new(embed_channels: &[usize], extract_channels: &[usize]) -> Self {
        assert_eq!(embed_channels.len(), EMBED_SLOTS);
        assert_eq!(extract_channels.len(), EXTRACT_SLOTS);
        Self {
            embed: embed_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Slot::new(Side::Embed, i, c))
                .collect(),
            extract: extract_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Slot::new(Side::Extract, i, c))
                .collect(),
        }
    }

    /// Gates start balanced, adjustments start at zero bias with a small
    /// random slope. Every state is still exactly zero at step 0 because the
    /// modulation maps are, and `tanh(0)` feeds a zero output bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        store.insert(HEAD_W1, init::he_uniform(rng, &[STATE_HIDDEN, 4], 4, 1.0));
        store.insert(HEAD_B1, Tensor::zeros(&[STATE_HIDDEN]));
        store.insert(
            HEAD_W2,
            init::uniform(rng, &[1, STATE_HIDDEN], 1.0 / (STATE_HIDDEN as f64).sqrt()),
        );
        store.insert(HEAD_B2, Tensor::zeros(&[1]));
        store.insert(
            PROJ_E2X,
            init::uniform(rng, &[EXTRACT_SLOTS, EMBED_SLOTS], 1.0 / (EMBED_SLOTS as f64).sqrt()),
        );
        store.insert(
            PROJ_X2E,
            init::uniform(rng, &[EMBED_SLOTS, EXTRACT_SLOTS], 1.0 / (EXTRACT_SLOTS as f64).sqrt()),
        );
        for slot in self.embed.iter().chain(&self.extract) {
            store.insert(&slot.gate, Tensor::zeros(&[1]));
            store.insert(&slot.w, init::uniform(rng, &[slot.channels], 0.1));
            store.insert(&slot.b, Tensor::zeros(&[slot.channels]));
        }
    }

    pub fn slot(&self, side: Side, index: usize) -> &Slot {
        match side {
            Side::Embed => &self.embed[index],
            Side::Extract => &self.extract[index],
        }
    }

    /// `(p_e, p_x)` computed outside any tape.
    pub fn project<T: Real>(store: &ParamStore<T>, smooth_e: &[f64], smooth_x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mat = |name: &str| store.get(name).expect("projection present").to_f64_vec();
        let mv = |m: &[f64], v: &[f64], rows: usize| -> Vec<f64> {
            let cols = v.len();
            (0..rows)
                .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let p_x = mv(&mat(PROJ_E2X), smooth_e, EXTRACT_SLOTS);
        let p_e = mv(&mat(PROJ_X2E), smooth_x, EMBED_SLOTS);
        (p_e, p_x)
    }

    /// Guidance snapshot for inference. Refuses an untrained state.
    pub fn freeze<T: Real>(store: &ParamStore<T>, state: &CimState) -> Result<GuidanceSignals> {
        if state.step_count == 0 {
            return Err(Error::Contract("guidance requested before any training step".into()));
        }
        let (p_e, p_x) = Self::project(store, &state.smooth_e, &state.smooth_x);
        Ok(GuidanceSignals {
            p_e,
            p_x,
            source_step: state.step_count,
        })
    }

    /// `(p_e [1, 8], p_x [1, 12])` on the tape so the projections learn.
    /// The smoothed states enter as constants.
    pub fn project_graph<T: Real>(g: &mut Graph<T>, smooth_e: &[f64], smooth_x: &[f64]) -> (Var, Var) {
        let se = g.constant(to_row(smooth_e));
        let sx = g.constant(to_row(smooth_x));
        let e2x = g.param(PROJ_E2X);
        let x2e = g.param(PROJ_X2E);
        let p_x = g.linear(se, e2x, None);
        let p_e = g.linear(sx, x2e, None);
        (p_e, p_x)
    }

    /// Frozen guidance as tape constants.
    pub fn guidance_constants<T: Real>(g: &mut Graph<T>, guidance: &GuidanceSignals) -> (Var, Var) {
        (g.constant(to_row(&guidance.p_e)), g.constant(to_row(&guidance.p_x)))
    }

    /// Four-statistic descriptor of a map, pooled over the batch: `[1, 4]`.
    pub fn descriptor<T: Real>(g: &mut Graph<T>, map: Var) -> Var {
        let d = g.stats(map);
        g.mean_rows(d)
    }

    /// Shared head applied to a descriptor row: scalar `[1]`.
    pub fn state_from_descriptor<T: Real>(g: &mut Graph<T>, d: Var) -> Var {
        let (w1, b1) = (g.param(HEAD_W1), g.param(HEAD_B1));
        let (w2, b2) = (g.param(HEAD_W2), g.param(HEAD_B2));
        let h = g.linear(d, w1, Some(b1));
        let h = g.tanh(h);
        let s = g.linear(h, w2, Some(b2));
        g.reshape(s, &[1])
    }

    pub fn extract_state<T: Real>(g: &mut Graph<T>, map: Var) -> Var {
        let d = Self::descriptor(g, map);
        Self::state_from_descriptor(g, d)
    }

    /// `σ(λ)·p + (1 − σ(λ))·s`, written as `s + σ(λ)·(p − s)`.
    pub fn fuse<T: Real>(g: &mut Graph<T>, s: Var, p: Var, gate_logit: Var) -> Var {
        let alpha = g.sigmoid(gate_logit);
        let diff = g.sub(p, s);
        let mixed = g.mul(alpha, diff);
        g.add(s, mixed)
    }

    /// `w·g + b`, a `[C]` vector.
    pub fn channel_adjust<T: Real>(g: &mut Graph<T>, gval: Var, w: Var, b: Var) -> Var {
        let scaled = g.mul_scalar(w, gval);
        g.add(scaled, b)
    }

    /// `F + M + broadcast(a)`.
    pub fn corrected_update<T: Real>(g: &mut Graph<T>, f: Var, m: Var, a: Var) -> Var {
        let fm = g.add(f, m);
        g.add_channel(fm, a)
    }
}

fn to_row<T: Real>(v: &[f64]) -> Tensor<T> {
    Tensor::new(&[1, v.len()], v.iter().map(|&x| T::cst(x)).collect())
}

/// How a network's module slots are wired for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Coupling {
    /// `[1, slots]` guidance row for this side.
    pub guidance: Var,
    pub afmm_on: bool,
    pub cim_on: bool,
}

/// Result of one coupled modulation stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub feature: Var,
    pub map: Var,
    pub state: Var,
}

/// Runs one modulation module with its coupling correction.
///
/// A disabled module passes `f` through untouched and reports a zero map; a
/// disabled coupling forces the adjustment to zero. The state is computed in
/// every case so the moving averages keep a consistent meaning.
pub fn coupled_stage<T: Real>(
    g: &mut Graph<T>,
    afmm: &Afmm,
    slot: &Slot,
    index: usize,
    f: Var,
    coupling: &Coupling,
) -> StageOutput {
    if !coupling.afmm_on {
        let map = g.constant(Tensor::zeros(g.value(f).shape()));
        let state = Cim::extract_state(g, map);
        return StageOutput { feature: f, map, state };
    }
    let map = afmm.modulation(g, f);
    let state = Cim::extract_state(g, map);
    let feature = if coupling.cim_on {
        let p = g.pick(coupling.guidance, index);
        let gate = g.param(&slot.gate);
        let gval = Cim::fuse(g, state, p, gate);
        let (w, b) = (g.param(&slot.w), g.param(&slot.b));
        let a = Cim::channel_adjust(g, gval, w, b);
        Cim::corrected_update(g, f, map, a)
    } else {
        g.add(f, map)
    };
    StageOutput { feature, map, state }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    fn cim_store(seed: u64) -> (Cim, ParamStore<f64>) {
        let cim = Cim::new(&[3; EMBED_SLOTS], &[3; EXTRACT_SLOTS]);
        let mut store = ParamStore::new();
        cim.init(&mut store, &mut seeded_rng(seed));
        (cim, store)
    }

    #[test]
    fn zero_map_gives_zero_state_at_init() {
        let (_, store) = cim_store(0);
        let mut g = Graph::with_params(&store);
        let m = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let d = Cim::descriptor(&mut g, m);
        assert_eq!(g.value(d).data(), &[0.0; 4]);
        let s = Cim::state_from_descriptor(&mut g, d);
        assert_eq!(g.value(s).data(), &[0.0]);
    }

    #[test]
    fn constant_map_descriptor() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::full(&[1, 3, 4, 4], 0.75));
        let d = Cim::descriptor(&mut g, m);
        let v = g.value(d).data();
        assert!((v[0] - 0.75).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
        assert!((v[2] - 0.75).abs() < 1e-15);
        assert_eq!(v[3], 0.75);
    }

    #[test]
    fn state_matches_hand_composition() {
        let (_, mut store) = cim_store(5);
        let mut rng = seeded_rng(11);
        store.set(HEAD_W2, init::uniform(&mut rng, &[1, STATE_HIDDEN], 1.0));
        store.set(HEAD_B1, init::uniform(&mut rng, &[STATE_HIDDEN], 1.0));
        store.set(HEAD_B2, Tensor::scalar(0.3));
        let map: Tensor<f64> = init::uniform(&mut rng, &[1, 3, 4, 4], 2.0);

        // independent statistics
        let xs = map.data();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mabs = xs.iter().map(|x| x.abs()).sum::<f64>() / n;
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let d = [mean, std, mabs, max];
        let w1 = store.get(HEAD_W1).unwrap().data();
        let b1 = store.get(HEAD_B1).unwrap().data();
        let w2 = store.get(HEAD_W2).unwrap().data();
        let mut expect = 0.3;
        for j in 0..STATE_HIDDEN {
            let z: f64 = (0..4).map(|k| w1[j * 4 + k] * d[k]).sum::<f64>() + b1[j];
            expect += w2[j] * z.tanh();
        }

        let mut g = Graph::with_params(&store);
        let m = g.constant(map);
        let s = Cim::extract_state(&mut g, m);
        assert!((g.value(s).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn equal_descriptors_give_equal_states_across_shapes() {
        let (_, mut store) = cim_store(2);
        store.set(HEAD_W2, Tensor::full(&[1, STATE_HIDDEN], 0.4));
        let state_of = |t: Tensor<f64>| {
            let mut g = Graph::with_params(&store);
            let m = g.constant(t);
            let s = Cim::extract_state(&mut g, m);
            g.value(s).data()[0]
        };
        // (-1, 1) pairs: mean 0, std 1, mean-abs 1, max 1
        let a = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 1.0]);
        let b = Tensor::new(&[1, 2, 2, 2], vec![1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
        assert_eq!(state_of(a), state_of(b));
    }

    #[test]
    fn smoothing_examples() {
        let s = smooth(&[0.0], &[2.0], 0.9).unwrap();
        assert!((s[0] - 0.2).abs() < 1e-15);
        assert_eq!(smooth(&[5.0, -1.0], &[2.0, 3.0], 0.0).unwrap(), vec![2.0, 3.0]);
        let mut v = vec![1.25];
        for _ in 0..50 {
            v = smooth(&v, &[1.25], 0.9).unwrap();
        }
        assert_eq!(v, vec![1.25]);
        assert!(matches!(smooth(&[0.0], &[1.0, 2.0], 0.9), Err(Error::Contract(_))));
    }

    #[test]
    fn projection_examples() {
        let (_, mut store) = cim_store(1);
        store.set(PROJ_E2X, Tensor::full(&[EXTRACT_SLOTS, EMBED_SLOTS], 1.0));
        let mut e1 = vec![0.0; EMBED_SLOTS];
        e1[0] = 1.0;
        let (_, p_x) = Cim::project(&store, &e1, &[0.0; EXTRACT_SLOTS]);
        assert_eq!(p_x, vec![1.0; EXTRACT_SLOTS]);

        store.set(PROJ_E2X, Tensor::zeros(&[EXTRACT_SLOTS, EMBED_SLOTS]));
        store.set(PROJ_X2E, Tensor::zeros(&[EMBED_SLOTS, EXTRACT_SLOTS]));
        let (p_e, p_x) = Cim::project(&store, &[0.7; EMBED_SLOTS], &[-0.2; EXTRACT_SLOTS]);
        assert!(p_e.iter().chain(&p_x).all(|&v| v == 0.0));
    }

    #[test]
    fn projection_on_tape_matches_plain() {
        let (_, store) = cim_store(9);
        let se: Vec<f64> = (0..EMBED_SLOTS).map(|i| (i as f64).sin()).collect();
        let sx: Vec<f64> = (0..EXTRACT_SLOTS).map(|i| (i as f64).cos()).collect();
        let (pe, px) = Cim::project(&store, &se, &sx);
        let mut g = Graph::with_params(&store);
        let (ve, vx) = Cim::project_graph(&mut g, &se, &sx);
        for (a, b) in g.value(ve).data().iter().zip(&pe) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(vx).data().iter().zip(&px) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::<f64>::new();
        let (s, p, z) = (scalar(&mut g, -1.0), scalar(&mut g, 3.0), scalar(&mut g, 0.0));
        let v = Cim::fuse(&mut g, s, p, z);
        assert_eq!(g.value(v).data(), &[1.0]);
        let big = scalar(&mut g, 20.0);
        let v = Cim::fuse(&mut g, s, p, big);
        assert!((g.value(v).data()[0] - 3.0).abs() < 1e-7);
        let same = scalar(&mut g, 0.37);
        let v = Cim::fuse(&mut g, same, same, big);
        assert_eq!(g.value(v).data(), &[0.37]);
    }

    #[test]
    fn adjust_examples() {
        let mut g = Graph::<f64>::new();
        let one = scalar(&mut g, 1.0);
        let w = g.constant(Tensor::new(&[2], vec![2.0, -1.0]));
        let b = g.constant(Tensor::new(&[2], vec![0.5, 0.5]));
        let a = Cim::channel_adjust(&mut g, one, w, b);
        assert_eq!(g.value(a).data(), &[2.5, -0.5]);
        let zero = scalar(&mut g, 0.0);
        let a = Cim::channel_adjust(&mut g, zero, w, b);
        assert_eq!(g.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn corrected_update_shift_is_spatially_constant() {
        let mut rng = seeded_rng(4);
        let mut g = Graph::<f64>::new();
        let f = g.constant(init::uniform(&mut rng, &[2, 3, 4, 5], 1.0));
        let m = g.constant(init::uniform(&mut rng, &[2, 3, 4, 5], 1.0));
        let a = g.constant(Tensor::new(&[3], vec![0.1, -2.0, 7.0]));
        let out = Cim::corrected_update(&mut g, f, m, a);
        let (fv, mv, ov) = (g.value(f).data(), g.value(m).data(), g.value(out).data());
        for (plane, chunk) in (0..6).zip(ov.chunks(20)) {
            let r: Vec<f64> = (0..20).map(|i| chunk[i] - fv[plane * 20 + i] - mv[plane * 20 + i]).collect();
            let mean = r.iter().sum::<f64>() / 20.0;
            assert!(r.iter().all(|v| (v - mean).abs() < 1e-12));
            assert!((mean - [0.1, -2.0, 7.0][plane % 3]).abs() < 1e-12);
        }
        let zero_a = g.constant(Tensor::zeros(&[3]));
        let zero_m = g.constant(Tensor::zeros(&[2, 3, 4, 5]));
        let out = Cim::corrected_update(&mut g, f, zero_m, zero_a);
        assert_eq!(g.value(out), g.value(f));
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let out = Cim::corrected_update(&mut g, f, zero_m, ones);
        for (o, x) in g.value(out).data().iter().zip(g.value(f).data()) {
            assert!((o - x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn freeze_requires_a_step() {
        let (_, store) = cim_store(0);
        let mut st = CimState::default();
        assert!(matches!(Cim::freeze(&store, &st), Err(Error::Contract(_))));
        st.update(&[1.0; EMBED_SLOTS], &[2.0; EXTRACT_SLOTS], 0.9).unwrap();
        let gs = Cim::freeze(&store, &st).unwrap();
        assert_eq!(gs.source_step, 1);
        assert_eq!(gs.p_e.len(), EMBED_SLOTS);
        assert_eq!(gs.p_x.len(), EXTRACT_SLOTS);
    }

    #[test]
    fn coupling_off_reduces_to_plain_residual() {
        let afmm = Afmm::new("m", 3);
        let (cim, mut store) = cim_store(3);
        afmm.init(&mut store, &mut seeded_rng(8));
        let mut rng = seeded_rng(21);
        store.set("m.wo", init::uniform(&mut rng, &[3, 3, 1, 1], 0.5));
        store.set("m.bo", init::uniform(&mut rng, &[3], 0.5));
        store.set(&cim.embed[0].b, Tensor::full(&[3], 0.25));
        store.set(HEAD_W2, Tensor::full(&[1, STATE_HIDDEN], 0.5));
        let x: Tensor<f64> = init::uniform(&mut rng, &[1, 3, 6, 6], 1.0);

        let mut g = Graph::with_params(&store);
        let f = g.constant(x.clone());
        let guidance = g.constant(Tensor::full(&[1, EMBED_SLOTS], 0.9));
        let off = Coupling { guidance, afmm_on: true, cim_on: false };
        let out = coupled_stage(&mut g, &afmm, &cim.embed[0], 0, f, &off);
        let (plain, _) = afmm.apply(&mut g, f);
        assert_eq!(g.value(out.feature), g.value(plain));

        let on = Coupling { cim_on: true, ..off };
        let out_on = coupled_stage(&mut g, &afmm, &cim.embed[0], 0, f, &on);
        assert_ne!(g.value(out_on.feature), g.value(plain));

        let passthrough = Coupling { afmm_on: false, ..on };
        let out_id = coupled_stage(&mut g, &afmm, &cim.embed[0], 0, f, &passthrough);
        assert_eq!(g.value(out_id.feature), &x);
        assert!(g.value(out_id.map).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn fuse_is_convex(s in -50.0f64..50.0, p in -50.0f64..50.0, lam in -40.0f64..40.0) {
            let mut g = Graph::<f64>::new();
            let (sv, pv, lv) = (scalar(&mut g, s), scalar(&mut g, p), scalar(&mut g, lam));
            let v = Cim::fuse(&mut g, sv, pv, lv);
            let out = g.value(v).data()[0];
            let tol = 1e-12 * (1.0 + s.abs().max(p.abs()));
            prop_assert!(out >= s.min(p) - tol && out <= s.max(p) + tol);
        }

        #[test]
        fn moving_average_stays_in_running_range(
            start in -5.0f64..5.0,
            stream in proptest::collection::vec(-10.0f64..10.0, 1..60),
            beta in 0.0f64..0.999,
        ) {
            let mut v = vec![start];
            let (mut lo, mut hi) = (start, start);
            for &s in &stream {
                v = smooth(&v, &[s], beta).unwrap();
                lo = lo.min(s);
                hi = hi.max(s);
                prop_assert!(v[0] >= lo - 1e-12 && v[0] <= hi + 1e-12);
            }
        }

        #[test]
        fn projection_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in 0u64..200,
        ) {
            let (_, store) = cim_store(seed);
            let u: Vec<f64> = (0..EMBED_SLOTS).map(|i| ((i as u64 + seed) as f64).sin()).collect();
            let v: Vec<f64> = (0..EMBED_SLOTS).map(|i| ((i as u64 * 3 + seed) as f64).cos()).collect();
            let ux: Vec<f64> = (0..EXTRACT_SLOTS).map(|i| (i as f64 * 0.3).sin()).collect();
            let vx: Vec<f64> = (0..EXTRACT_SLOTS).map(|i| (i as f64 * 0.7).cos()).collect();
            let comb = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
            let (pe, px) = Cim::project(&store, &comb(&u, &v), &comb(&ux, &vx));
            let (pe1, px1) = Cim::project(&store, &u, &ux);
            let (pe2, px2) = Cim::project(&store, &v, &vx);
            for i in 0..EMBED_SLOTS {
                prop_assert!((pe[i] - (a * pe1[i] + b * pe2[i])).abs() < 1e-10);
            }
            for j in 0..EXTRACT_SLOTS {
                prop_assert!((px[j] - (a * px1[j] + b * px2[j])).abs() < 1e-10);
            }
        }
    }
}
