//! Finite-difference verification of every differentiable path.
//!
//! Each check builds a scalar function on the tape (a fixed random weighting
//! of some output), takes the analytic gradient in the precision under test
//! and compares it against central differences evaluated in `f64` for a
//! sample of coordinates of every input and parameter tensor.
//!
//! The error of one tensor is `max |analytic − numeric| / max |numeric|`
//! over the sampled coordinates, with the denominator floored at 1e-3 of
//! the largest numeric gradient in the whole check so tensors whose true
//! gradient is essentially zero are judged on the check's overall scale.

use rand::seq::index::sample;
use serde::Serialize;

use crate::afmm::Afmm;
use crate::cim::{coupled_stage, Cim, Coupling, Side, EMBED_SLOTS, EXTRACT_SLOTS};
use crate::config::{FrontEnd, LossWeights, RunConfig};
use crate::distortions::{training_distort, AffineParams, DistortionSpec};
use crate::embedder::Embedder;
use crate::extractor::Extractor;
use crate::layers::DeformConv;
use crate::losses::{total_loss, PerceptualLoss, SsimLoss, BCE_EPS};
use crate::message::BitMessage;
use crate::params::{init, ParamStore};
use crate::rng::{seeded_rng, Rng};
use crate::tensor::{ConvGeom, Graph, Real, Tensor, Var};

/// Precision of the analytic gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

pub const F32_TOLERANCE: f64 = 1e-3;
pub const F64_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub precision: Precision,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Tensor with the largest error.
    pub worst: String,
}

/// A scalar-valued function of some inputs and a parameter store.
trait Probe {
    fn inputs(&self) -> Vec<Tensor<f64>>;
    fn params(&self) -> ParamStore<f64> {
        ParamStore::new()
    }
    /// Output whose random projection is differentiated.
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Var;
    /// Coordinates sampled per tensor.
    fn samples(&self) -> usize {
        24
    }
}

fn project<T: Real>(g: &mut Graph<T>, out: Var) -> Var {
    let shape = g.value(out).shape().to_vec();
    let weights: Tensor<T> = init::uniform(&mut seeded_rng(0x5eed), &shape, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(out, w);
    g.mean(prod)
}

fn evaluate_f64<P: Probe>(probe: &P, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> f64 {
    let mut g = Graph::with_params(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = probe.build(&mut g, &vars);
    let l = project(&mut g, out);
    g.value(l).data()[0]
}

fn analytic<T: Real, P: Probe>(
    probe: &P,
    inputs: &[Tensor<f64>],
    params: &ParamStore<f64>,
) -> (Vec<Tensor<f64>>, Vec<(String, Tensor<f64>)>) {
    let store: ParamStore<T> = params.cast();
    let mut g = Graph::with_params(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
    let out = probe.build(&mut g, &vars);
    let l = project(&mut g, out);
    let mut grads = g.backward(l);
    let din = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).map_or_else(|| Tensor::zeros(t.shape()), |x| x.cast()))
        .collect();
    let mut dp = g.param_grads(&mut grads);
    let dparams = params
        .iter()
        .map(|(name, t)| {
            let grad = dp.remove(name).map_or_else(|| Tensor::zeros(t.shape()), |x| x.cast());
            (name.clone(), grad)
        })
        .collect();
    (din, dparams)
}

fn run_probe<P: Probe>(name: &str, probe: &P, precision: Precision) -> CheckOutcome {
    // inputs and parameters are rounded to f32 first so both precisions
    // differentiate exactly the same function
    let round = |t: &Tensor<f64>| t.cast::<f32>().cast::<f64>();
    let inputs: Vec<Tensor<f64>> = probe.inputs().iter().map(round).collect();
    let params: ParamStore<f64> = probe.params().cast::<f32>().cast();
    let (din, dparams) = match precision {
        Precision::F32 => analytic::<f32, P>(probe, &inputs, &params),
        Precision::F64 => analytic::<f64, P>(probe, &inputs, &params),
    };

    let mut rng = seeded_rng(0xfd);
    // small enough that near-ties in the max statistic are rarely crossed
    let h = 1e-6;
    // (label, analytic samples, numeric samples)
    let mut rows: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let central = |f: &mut dyn FnMut(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);

    for (k, grad) in din.iter().enumerate() {
        let n = grad.numel();
        let idx = sample(&mut rng, n, probe.samples().min(n));
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in idx.iter() {
            let mut f = |d: f64| {
                let mut xs = inputs.clone();
                xs[k].data_mut()[i] += d;
                evaluate_f64(probe, &xs, &params)
            };
            num.push(central(&mut f));
            a.push(grad.data()[i]);
        }
        rows.push((format!("input{k}"), a, num));
    }
    for (name, grad) in &dparams {
        let n = grad.numel();
        let idx = sample(&mut rng, n, probe.samples().min(n));
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in idx.iter() {
            let mut f = |d: f64| {
                let mut ps = params.clone();
                ps.get_mut(name).unwrap().data_mut()[i] += d;
                evaluate_f64(probe, &inputs, &ps)
            };
            num.push(central(&mut f));
            a.push(grad.data()[i]);
        }
        rows.push((name.clone(), a, num));
    }

    let scale = rows
        .iter()
        .flat_map(|(_, _, n)| n.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    let (mut worst, mut worst_name) = (0.0, String::new());
    for (label, a, n) in &rows {
        let denom = n.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3 * scale);
        let err = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / denom;
        if err > worst || !err.is_finite() {
            worst = err;
            worst_name = label.clone();
        }
    }
    let tolerance = match precision {
        Precision::F32 => F32_TOLERANCE,
        Precision::F64 => F64_TOLERANCE,
    };
    CheckOutcome {
        name: name.to_string(),
        precision,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
        worst: worst_name,
    }
}

/// Replaces all-zero tensors (output projections, biases, gates) with small
/// random values so every path carries gradient.
fn activate(store: &mut ParamStore<f64>, rng: &mut Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            *t = init::uniform(rng, t.shape(), scale);
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    init::uniform(rng, shape, bound)
}

struct AfmmProbe;

impl Probe for AfmmProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![uniform(&mut seeded_rng(1), &[2, 4, 8, 8], 1.0)]
    }
    fn params(&self) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(2);
        Afmm::new("m", 4).init(&mut s, &mut rng);
        activate(&mut s, &mut rng, 0.3);
        s
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        Afmm::new("m", 4).apply(g, x[0]).0
    }
}

struct CimProbe;

impl CimProbe {
    fn cim() -> Cim {
        Cim::new(&[4; EMBED_SLOTS], &[4; EXTRACT_SLOTS])
    }
}

impl Probe for CimProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(3);
        vec![uniform(&mut rng, &[2, 4, 8, 8], 1.0), uniform(&mut rng, &[1, EMBED_SLOTS], 1.0)]
    }
    fn params(&self) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(4);
        Afmm::new("m", 4).init(&mut s, &mut rng);
        Self::cim().init(&mut s, &mut rng);
        activate(&mut s, &mut rng, 0.3);
        s
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let cim = Self::cim();
        let coupling = Coupling {
            guidance: x[1],
            afmm_on: true,
            cim_on: true,
        };
        let out = coupled_stage(g, &Afmm::new("m", 4), cim.slot(Side::Embed, 2), 2, x[0], &coupling);
        // the state also feeds the moving averages, so check it too
        let n = g.value(out.feature).numel();
        let f = g.reshape(out.feature, &[1, n]);
        let m = g.value(out.state).numel();
        let s = g.reshape(out.state, &[1, m]);
        g.concat(&[f, s])
    }
}

struct AffineProbe;

impl Probe for AffineProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![uniform(&mut seeded_rng(5), &[2, 3, 12, 12], 1.0)]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let a = AffineParams {
            rotation: 17.0,
            translate: [0.07, -0.11],
            scale: 1.1,
            shear: [8.0, -5.0],
        };
        let b = AffineParams {
            rotation: -61.0,
            translate: [-0.2, 0.05],
            scale: 0.85,
            shear: [-20.0, 12.0],
        };
        g.affine(x[0], vec![a.to_map(12, 12), b.to_map(12, 12)])
    }
}

struct DeformProbe;

impl DeformProbe {
    fn layer() -> DeformConv {
        DeformConv::new("d", 3, 4, ConvGeom::same3())
    }
}

impl Probe for DeformProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![uniform(&mut seeded_rng(6), &[1, 3, 8, 8], 1.0)]
    }
    fn params(&self) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(7);
        Self::layer().init(&mut s, &mut rng);
        // offsets of about a pixel, away from the integer grid
        activate(&mut s, &mut rng, 0.4);
        s
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        Self::layer().forward(g, x[0])
    }
}

struct BceProbe;

impl Probe for BceProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let p = uniform(&mut seeded_rng(8), &[2, 8], 0.45);
        vec![p.map(|v| v + 0.5)]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let bits: Vec<T> = (0..16).map(|i| T::cst(((i * 7) % 3 == 0) as u8 as f64)).collect();
        let v = g.bce(x[0], &bits, T::cst(BCE_EPS));
        g.reshape(v, &[1])
    }
}

struct MseProbe;

impl Probe for MseProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(9);
        vec![uniform(&mut rng, &[2, 3, 8, 8], 1.0), uniform(&mut rng, &[2, 3, 8, 8], 1.0)]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let v = g.mse(x[0], x[1]);
        g.reshape(v, &[1])
    }
}

struct SsimProbe;

impl Probe for SsimProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(10);
        let a = uniform(&mut rng, &[1, 3, 16, 16], 0.8);
        let noise = uniform(&mut rng, &[1, 3, 16, 16], 0.2);
        let mut b = a.clone();
        b.add_assign(&noise);
        vec![a, b]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let v = SsimLoss.apply(g, x[0], x[1]);
        g.reshape(v, &[1])
    }
}

struct DistortProbe;

impl Probe for DistortProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![uniform(&mut seeded_rng(11), &[2, 3, 16, 16], 0.5)]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let warp = AffineParams {
            rotation: 33.0,
            translate: [0.1, 0.0],
            scale: 0.9,
            shear: [4.0, 9.0],
        };
        let specs = [
            DistortionSpec {
                affine: warp,
                noise_sigma: 0.04,
                order_bit: 0,
            },
            DistortionSpec {
                affine: warp,
                noise_sigma: 0.04,
                order_bit: 1,
            },
        ];
        training_distort(g, x[0], &specs, &mut seeded_rng(12))
    }
}

fn small_config(size: usize) -> RunConfig {
    RunConfig {
        image_size: [size, size],
        message_length: 8,
        embedder_widths: [4, 4, 4, 4],
        front_channels: 2,
        message_channels: 2,
        extractor_width: 4,
        ..RunConfig::desk()
    }
}

struct EmbedderProbe {
    deformable: bool,
}

impl EmbedderProbe {
    fn config(&self) -> RunConfig {
        let mut cfg = small_config(16);
        if self.deformable {
            cfg.front_end = FrontEnd::Deformable;
        }
        cfg
    }
}

impl Probe for EmbedderProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(13);
        vec![uniform(&mut rng, &[2, 3, 16, 16], 0.4), uniform(&mut rng, &[1, EMBED_SLOTS], 0.5)]
    }
    fn params(&self) -> ParamStore<f64> {
        let cfg = self.config();
        let emb = Embedder::new(&cfg);
        let cim = Cim::new(&emb.slot_channels(), &[4; EXTRACT_SLOTS]);
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(14);
        emb.init(&mut s, &mut rng);
        cim.init(&mut s, &mut rng);
        activate(&mut s, &mut rng, 0.05);
        s
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let cfg = self.config();
        let emb = Embedder::new(&cfg);
        let cim = Cim::new(&emb.slot_channels(), &[4; EXTRACT_SLOTS]);
        let msgs: Vec<BitMessage> = (0..2).map(|i| BitMessage::random(&mut seeded_rng(i), 8)).collect();
        let signs = g.constant(Embedder::message_signs(&msgs));
        let coupling = Coupling {
            guidance: x[1],
            afmm_on: true,
            cim_on: true,
        };
        emb.forward(g, x[0], signs, &coupling, &cim).image
    }
    fn samples(&self) -> usize {
        8
    }
}

struct ExtractorProbe;

impl Probe for ExtractorProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(15);
        vec![uniform(&mut rng, &[1, 3, 32, 32], 0.8), uniform(&mut rng, &[1, EXTRACT_SLOTS], 0.5)]
    }
    fn params(&self) -> ParamStore<f64> {
        let ext = Extractor::new(&small_config(32));
        let cim = Cim::new(&[4; EMBED_SLOTS], &ext.slot_channels());
        let mut s = ParamStore::new();
        let mut rng = seeded_rng(16);
        ext.init(&mut s, &mut rng);
        cim.init(&mut s, &mut rng);
        activate(&mut s, &mut rng, 0.1);
        s
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let ext = Extractor::new(&small_config(32));
        let cim = Cim::new(&[4; EMBED_SLOTS], &ext.slot_channels());
        let coupling = Coupling {
            guidance: x[1],
            afmm_on: true,
            cim_on: true,
        };
        ext.forward(g, x[0], &coupling, &cim).logits
    }
    fn samples(&self) -> usize {
        6
    }
}

struct TotalLossProbe;

impl Probe for TotalLossProbe {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut rng = seeded_rng(17);
        let p = uniform(&mut rng, &[2, 8], 0.45).map(|v| v + 0.5);
        let a = uniform(&mut rng, &[2, 3, 16, 16], 0.7);
        let mut b = a.clone();
        b.add_assign(&uniform(&mut rng, &[2, 3, 16, 16], 0.1));
        vec![p, a, b]
    }
    fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Var {
        let bits: Vec<T> = (0..16).map(|i| T::cst((i % 3 == 1) as u8 as f64)).collect();
        let t = total_loss(g, x[0], &bits, x[1], x[2], LossWeights::STANDARD, &SsimLoss);
        g.reshape(t.total, &[1])
    }
}

/// Names of every registered check, in run order.
pub const CHECKS: [&str; 12] = [
    "afmm",
    "cim-fused",
    "affine-resample",
    "deformable-conv",
    "bce",
    "mse",
    "perceptual-ssim",
    "training-distortion",
    "total-loss",
    "embedder",
    "embedder-deformable",
    "extractor",
];

/// Runs one registered check.
pub fn run_check(name: &str, precision: Precision) -> Option<CheckOutcome> {
    Some(match name {
        "afmm" => run_probe(name, &AfmmProbe, precision),
        "cim-fused" => run_probe(name, &CimProbe, precision),
        "affine-resample" => run_probe(name, &AffineProbe, precision),
        "deformable-conv" => run_probe(name, &DeformProbe, precision),
        "bce" => run_probe(name, &BceProbe, precision),
        "mse" => run_probe(name, &MseProbe, precision),
        "perceptual-ssim" => run_probe(name, &SsimProbe, precision),
        "training-distortion" => run_probe(name, &DistortProbe, precision),
        "total-loss" => run_probe(name, &TotalLossProbe, precision),
        "embedder" => run_probe(name, &EmbedderProbe { deformable: false }, precision),
        "embedder-deformable" => run_probe(name, &EmbedderProbe { deformable: true }, precision),
        "extractor" => run_probe(name, &ExtractorProbe, precision),
        _ => return None,
    })
}

/// Every check in both precisions.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for name in CHECKS {
        for p in [Precision::F32, Precision::F64] {
            out.push(run_check(name, p).expect("registered"));
        }
    }
    out
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[CheckOutcome]) -> String {
    let mut s = format!("{:<22} {:<5} {:>12} {:>10}  {}\n", "check", "prec", "max rel err", "tolerance", "result");
    for r in rows {
        let prec = match r.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        s.push_str(&format!(
            "{:<22} {:<5} {:>12.3e} {:>10.0e}  {}{}\n",
            r.name,
            prec,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" },
            if r.passed { String::new() } else { format!(" (worst: {})", r.worst) },
        ));
    }
    s
}
