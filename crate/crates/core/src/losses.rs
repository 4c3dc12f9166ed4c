//! Training objective: weighted bit cross-entropy, pixel MSE and a pluggable
//! perceptual term (structural dissimilarity by default).

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::tensor::{Graph, Real, Var};

pub const BCE_EPS: f64 = 1e-7;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Differentiable image dissimilarity: zero on identical inputs, never negative.
pub trait PerceptualLoss {
    fn name(&self) -> &'static str;
    fn apply<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var;
}

/// `1 − SSIM` on the `[0, 1]` convention, averaged over channels.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimLoss;

impl PerceptualLoss for SsimLoss {
    fn name(&self) -> &'static str {
        "1-ssim"
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let s = ssim_graph(g, a, b);
        let neg = g.scale(s, -T::one());
        g.offset(neg, T::one())
    }
}

/// Normalised Gaussian taps; the window shrinks to the largest odd size
/// that fits when the image is smaller than the nominal 11 pixels.
pub fn gaussian_window(h: usize, w: usize) -> Vec<f64> {
    let mut k = SSIM_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM of canonical-range images, computed on the tape.
pub fn ssim_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let (_, _, h, w) = g.value(a).dims4();
    let k = gaussian_window(h, w);
    let unit = |g: &mut Graph<T>, x: Var| {
        let y = g.offset(x, T::one());
        g.scale(y, T::cst(0.5))
    };
    let (a, b) = (unit(g, a), unit(g, b));
    let mu_a = g.gaussian_valid(a, &k);
    let mu_b = g.gaussian_valid(b, &k);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b);
    let e_aa = g.gaussian_valid(aa, &k);
    let e_bb = g.gaussian_valid(bb, &k);
    let e_ab = g.gaussian_valid(ab, &k);
    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    let two = T::cst(2.0);
    let (c1, c2) = (T::cst(SSIM_C1), T::cst(SSIM_C2));
    let l_num = g.scale(mu_ab, two);
    let l_num = g.offset(l_num, c1);
    let c_num = g.scale(cov, two);
    let c_num = g.offset(c_num, c2);
    let l_den = g.add(mu_a2, mu_b2);
    let l_den = g.offset(l_den, c1);
    let c_den = g.add(var_a, var_b);
    let c_den = g.offset(c_den, c2);
    let num = g.mul(l_num, c_num);
    let den = g.mul(l_den, c_den);
    let map = g.div(num, den);
    g.mean(map)
}

/// Component values of one loss evaluation. `total` is formed once from the
/// stored components and weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(weights: LossWeights, bce: f64, mse: f64, perceptual: f64) -> Self {
        let total = weights.bce * bce + weights.mse * mse + weights.perceptual * perceptual;
        Self {
            bce,
            mse,
            perceptual,
            total,
            weights,
        }
    }
}

/// Tape nodes of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub bce: Var,
    pub mse: Var,
    pub perceptual: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, weights: LossWeights) -> LossBreakdown {
        let v = |x: Var| g.value(x).data()[0].to_f64().unwrap();
        LossBreakdown::new(weights, v(self.bce), v(self.mse), v(self.perceptual))
    }
}

/// Builds `λ1·bce + λ2·mse + λ3·perceptual` on the tape.
pub fn total_loss<T: Real, P: PerceptualLoss>(
    g: &mut Graph<T>,
    probs: Var,
    bits: &[T],
    watermarked: Var,
    cover: Var,
    weights: LossWeights,
    perceptual: &P,
) -> LossTerms {
    let bce = g.bce(probs, bits, T::cst(BCE_EPS));
    let mse = g.mse(watermarked, cover);
    let perc = perceptual.apply(g, watermarked, cover);
    let a = g.scale(bce, T::cst(weights.bce));
    let b = g.scale(mse, T::cst(weights.mse));
    let c = g.scale(perc, T::cst(weights.perceptual));
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    LossTerms {
        bce,
        mse,
        perceptual: perc,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init;
    use crate::rng::seeded_rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::full(&[1, 4], 0.5));
        let v = g.bce(half, &[1.0, 0.0, 1.0, 1.0], BCE_EPS);
        assert!((scalar_of(&g, v) - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.constant(Tensor::new(&[1, 2], vec![0.9, 0.2]));
        let v = g.bce(p, &[1.0, 0.0], BCE_EPS);
        let expect = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((scalar_of(&g, v) - expect).abs() < 1e-12);
        assert!((scalar_of(&g, v) - 0.1643).abs() < 1e-4);

        let sat = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]));
        let v = g.bce(sat, &[1.0, 0.0], BCE_EPS);
        let expect = -(1.0 - BCE_EPS).ln();
        assert!((scalar_of(&g, v) - expect).abs() < 1e-15);
    }

    #[test]
    fn mse_closed_forms() {
        let mut rng = seeded_rng(3);
        let a_t: Tensor<f64> = init::uniform(&mut rng, &[2, 3, 5, 5], 1.0);
        let mut g = Graph::<f64>::new();
        let a = g.constant(a_t.clone());
        let v = g.mse(a, a);
        assert_eq!(scalar_of(&g, v), 0.0);
        let b = g.constant(a_t.map(|x| x + 0.25));
        let v = g.mse(a, b);
        assert!((scalar_of(&g, v) - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_f64_accumulation() {
        let mut rng = seeded_rng(8);
        let a_t: Tensor<f32> = init::uniform(&mut rng, &[2, 3, 16, 16], 1.0);
        let b_t: Tensor<f32> = init::uniform(&mut rng, &[2, 3, 16, 16], 1.0);
        let expect: f64 = a_t
            .data()
            .iter()
            .zip(b_t.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a_t.numel() as f64;
        let mut g = Graph::<f32>::new();
        let (a, b) = (g.constant(a_t), g.constant(b_t));
        let v = g.mse(a, b);
        let got = g.value(v).data()[0] as f64;
        assert!(((got - expect) / expect).abs() < 1e-6);
    }

    #[test]
    fn perceptual_is_zero_on_identical_inputs() {
        let mut rng = seeded_rng(1);
        let mut g = Graph::<f64>::new();
        let a = g.constant(init::uniform(&mut rng, &[1, 3, 16, 16], 1.0));
        let v = SsimLoss.apply(&mut g, a, a);
        assert!(scalar_of(&g, v).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = LossBreakdown::new(LossWeights::STANDARD, 0.2, 0.01, 0.05);
        assert!((b.total - 0.36).abs() < 1e-15);
        let sel = LossBreakdown::new(
            LossWeights {
                bce: 0.0,
                mse: 1.0,
                perceptual: 0.0,
            },
            0.7,
            0.125,
            0.3,
        );
        assert_eq!(sel.total, 0.125);
    }

    #[test]
    fn degenerate_minimum() {
        let mut rng = seeded_rng(2);
        let img: Tensor<f64> = init::uniform(&mut rng, &[1, 3, 16, 16], 1.0);
        let mut g = Graph::<f64>::new();
        let a = g.constant(img);
        let p = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 1.0]));
        let terms = total_loss(&mut g, p, &[1.0, 0.0, 1.0], a, a, LossWeights::STANDARD, &SsimLoss);
        let bd = terms.breakdown(&g, LossWeights::STANDARD);
        let expect = 1.5 * -(1.0 - BCE_EPS).ln();
        assert!((bd.total - expect).abs() < 1e-12);
        assert!((scalar_of(&g, terms.total) - expect).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loss_terms_are_non_negative(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let mut g = Graph::<f64>::new();
            let a = g.constant(init::uniform(&mut rng, &[1, 3, 12, 12], 1.0));
            let b = g.constant(init::uniform(&mut rng, &[1, 3, 12, 12], 1.0));
            let probs: Tensor<f64> = init::uniform(&mut rng, &[1, 8], 0.5);
            let p = g.constant(probs.map(|v| v + 0.5));
            let bits: Vec<f64> = (0..8).map(|i| ((seed >> i) & 1) as f64).collect();
            let t = total_loss(&mut g, p, &bits, a, b, LossWeights::STANDARD, &SsimLoss);
            let bd = t.breakdown(&g, LossWeights::STANDARD);
            prop_assert!(bd.bce >= 0.0 && bd.mse >= 0.0 && bd.perceptual >= 0.0);
            prop_assert_eq!(bd.total, 1.5 * bd.bce + bd.mse + bd.perceptual);
        }
    }
}
