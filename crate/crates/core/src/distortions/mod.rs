//! Distortions: the differentiable training layer (random affine warp plus
//! Gaussian noise in random order) and the evaluation catalog.

pub mod catalog;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::DistortionToggles;
use crate::image_io::ImageTensor;
use crate::rng::Rng;
use crate::tensor::{affine_sample, AffineMap, Graph, Real, Tensor, Var};

pub use catalog::EvalDistortion;

/// Geometric warp parameters. Angles in degrees, translation as a fraction
/// of the image size per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translate: [f64; 2],
    pub scale: f64,
    pub shear: [f64; 2],
}

/// Symmetric sampling bounds for [`AffineParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineRanges {
    pub rotation: f64,
    pub translation: f64,
    pub scale: (f64, f64),
    pub shear: f64,
}

impl AffineRanges {
    pub const TRAINING: Self = Self {
        rotation: 90.0,
        translation: 0.3,
        scale: (0.8, 1.2),
        shear: 30.0,
    };
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        translate: [0.0, 0.0],
        scale: 1.0,
        shear: [0.0, 0.0],
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn sample(rng: &mut Rng, r: &AffineRanges) -> Self {
        let sym = |rng: &mut Rng, b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
        let rotation = sym(rng, r.rotation);
        let translate = [sym(rng, r.translation), sym(rng, r.translation)];
        let scale = if r.scale.0 < r.scale.1 {
            rng.gen_range(r.scale.0..=r.scale.1)
        } else {
            r.scale.0
        };
        let shear = [sym(rng, r.shear), sym(rng, r.shear)];
        Self {
            rotation,
            translate,
            scale,
            shear,
        }
    }

    /// Forward 2×2 part: rotation after shear after scale.
    fn linear(&self) -> [f64; 4] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let (kx, ky) = (self.shear[0].to_radians().tan(), self.shear[1].to_radians().tan());
        // shear·scale
        let sh = [self.scale, kx * self.scale, ky * self.scale, self.scale];
        [
            c * sh[0] - s * sh[2],
            c * sh[1] - s * sh[3],
            s * sh[0] + c * sh[2],
            s * sh[1] + c * sh[3],
        ]
    }

    /// Output-to-source sampling map for an `h×w` image, transforming about
    /// the image centre. The identity maps to [`AffineMap::IDENTITY`].
    pub fn to_map(&self, h: usize, w: usize) -> AffineMap {
        if self.is_identity() {
            return AffineMap::IDENTITY;
        }
        let a = self.linear();
        let det = a[0] * a[3] - a[1] * a[2];
        let b = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (tx, ty) = (self.translate[0] * w as f64, self.translate[1] * h as f64);
        // src = c + B·(dst − c − t)
        let (ox, oy) = (cx + tx, cy + ty);
        AffineMap([
            b[0],
            b[1],
            cx - b[0] * ox - b[1] * oy,
            b[2],
            b[3],
            cy - b[2] * ox - b[3] * oy,
        ])
    }
}

/// One training-time corruption: warp, noise level and application order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub affine: AffineParams,
    pub noise_sigma: f64,
    /// 0: noise after warp, 1: warp after noise.
    pub order_bit: u8,
}

impl DistortionSpec {
    pub const IDENTITY: Self = Self {
        affine: AffineParams::IDENTITY,
        noise_sigma: 0.0,
        order_bit: 0,
    };

    /// Draws a spec honouring the toggles: a disabled warp is the identity,
    /// disabled noise has σ = 0.
    pub fn sample(rng: &mut Rng, toggles: &DistortionToggles) -> Self {
        let affine = AffineParams::sample(rng, &AffineRanges::TRAINING);
        let order_bit = rng.gen_range(0..=1u8);
        Self {
            affine: if toggles.affine { affine } else { AffineParams::IDENTITY },
            noise_sigma: if toggles.noise { toggles.noise_sigma } else { 0.0 },
            order_bit,
        }
    }
}

/// Warps one image (bilinear, zero fill). The identity is an exact copy.
pub fn apply_affine(img: &ImageTensor, p: &AffineParams) -> ImageTensor {
    if p.is_identity() {
        return img.clone();
    }
    let map = p.to_map(img.height(), img.width());
    ImageTensor::from_tensor(affine_sample(&img.to_batch(), &[map]))
}

/// Gaussian noise of standard deviation `sigma` for `n` values.
pub fn noise_values(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Adds `N(0, σ²)` per value and clamps to `[-1, 1]`.
pub fn gaussian_noise(img: &ImageTensor, sigma: f64, rng: &mut Rng) -> ImageTensor {
    let noise = noise_values(rng, img.data().len(), sigma);
    let mut out = img.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v = (*v as f64 + n).clamp(-1.0, 1.0) as f32;
    }
    out
}

/// Non-differentiable application of a spec to one image.
pub fn distort_image(img: &ImageTensor, spec: &DistortionSpec, rng: &mut Rng) -> ImageTensor {
    if spec.order_bit == 0 {
        let warped = apply_affine(img, &spec.affine);
        gaussian_noise(&warped, spec.noise_sigma, rng)
    } else {
        let noisy = gaussian_noise(img, spec.noise_sigma, rng);
        apply_affine(&noisy, &spec.affine)
    }
}

/// Differentiable distortion of a batch `x` with one spec per item.
///
/// Noise is drawn from `rng` item by item in batch order.
pub fn training_distort<T: Real>(g: &mut Graph<T>, x: Var, specs: &[DistortionSpec], rng: &mut Rng) -> Var {
    let (n, c, h, w) = g.value(x).dims4();
    assert_eq!(specs.len(), n, "one distortion spec per item");
    let per = c * h * w;

    let any_warp = specs.iter().any(|s| !s.affine.is_identity());
    let any_noise = specs.iter().any(|s| s.noise_sigma > 0.0);
    let maps: Vec<AffineMap> = specs.iter().map(|s| s.affine.to_map(h, w)).collect();
    let mut noise = Vec::with_capacity(n * per);
    for s in specs {
        noise.extend(noise_values(rng, per, s.noise_sigma).into_iter().map(T::cst));
    }
    let noise = g.constant(Tensor::new(&[n, c, h, w], noise));

    let warp = |g: &mut Graph<T>, v: Var| if any_warp { g.affine(v, maps.clone()) } else { v };
    let add_noise = |g: &mut Graph<T>, v: Var| {
        if any_noise {
            let y = g.add(v, noise);
            g.clamp(y, -T::one(), T::one())
        } else {
            v
        }
    };

    let ones = specs.iter().filter(|s| s.order_bit == 1).count();
    if ones == 0 || !any_warp || !any_noise {
        let y = warp(g, x);
        return add_noise(g, y);
    }
    if ones == n {
        let y = add_noise(g, x);
        return warp(g, y);
    }
    let first = {
        let y = warp(g, x);
        add_noise(g, y)
    };
    let second = {
        let y = add_noise(g, x);
        warp(g, y)
    };
    // per-item selection between the two orders
    let mut mask = Vec::with_capacity(n * per);
    for s in specs {
        mask.extend(std::iter::repeat(T::cst(s.order_bit as f64)).take(per));
    }
    let m = g.constant(Tensor::new(&[n, c, h, w], mask.clone()));
    let inv = g.constant(Tensor::new(&[n, c, h, w], mask.iter().map(|&v| T::one() - v).collect()));
    let a = g.mul(first, inv);
    let b = g.mul(second, m);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(3, h, w, (0..3 * h * w).map(|i| ((i as f32) * 0.37).sin() * 0.9).collect())
    }

    #[test]
    fn identity_affine_is_bit_exact() {
        let img = ramp(16, 20);
        assert_eq!(apply_affine(&img, &AffineParams::IDENTITY), img);
        let mut g = Graph::<f32>::new();
        let x = g.constant(img.to_batch());
        let y = training_distort(&mut g, x, &[DistortionSpec::IDENTITY], &mut seeded_rng(0));
        assert_eq!(g.value(y), &img.to_batch());
    }

    #[test]
    fn one_pixel_translation_is_an_integer_shift() {
        let (h, w) = (8, 16);
        let img = ramp(h, w);
        let p = AffineParams {
            translate: [1.0 / w as f64, 0.0],
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p);
        for c in 0..3 {
            for y in 0..h {
                assert_eq!(out.at(c, y, 0), 0.0);
                for x in 1..w {
                    assert_eq!(out.at(c, y, x), img.at(c, y, x - 1));
                }
            }
        }
    }

    #[test]
    fn rotation_by_ninety_permutes_pixels() {
        // square image, centre at a pixel corner: a quarter turn maps the grid onto itself
        let n = 6;
        let img = ramp(n, n);
        let p = AffineParams {
            rotation: 90.0,
            ..AffineParams::IDENTITY
        };
        let out = apply_affine(&img, &p);
        let mut src = img.data().to_vec();
        let mut dst = out.data().to_vec();
        src.sort_by(f32::total_cmp);
        dst.sort_by(f32::total_cmp);
        for (a, b) in src.iter().zip(&dst) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn sampled_specs_respect_ranges() {
        let mut rng = seeded_rng(5);
        let toggles = DistortionToggles::default();
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..100_000 {
            let s = DistortionSpec::sample(&mut rng, &toggles);
            let a = s.affine;
            assert!((-90.0..=90.0).contains(&a.rotation));
            assert!(a.translate.iter().all(|t| (-0.3..=0.3).contains(t)));
            assert!((0.8..=1.2).contains(&a.scale));
            assert!(a.shear.iter().all(|t| (-30.0..=30.0).contains(t)));
            assert!(s.order_bit <= 1);
            assert_eq!(s.noise_sigma, 0.04);
            lo = lo.min(a.rotation);
            hi = hi.max(a.rotation);
        }
        assert!(lo < -89.0 && hi > 89.0);
    }

    #[test]
    fn spec_sequence_is_deterministic() {
        let t = DistortionToggles::default();
        let a: Vec<_> = (0..50).map({
            let mut r = seeded_rng(3);
            move |_| DistortionSpec::sample(&mut r, &t)
        }).collect();
        let b: Vec<_> = (0..50).map({
            let mut r = seeded_rng(3);
            move |_| DistortionSpec::sample(&mut r, &t)
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_statistics() {
        let mut rng = seeded_rng(17);
        let v = noise_values(&mut rng, 1_000_000, 0.04);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((sd - 0.04).abs() < 0.0005, "{sd}");
        let img = ramp(8, 8);
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng), img);
        let a = gaussian_noise(&img, 0.04, &mut seeded_rng(1));
        let b = gaussian_noise(&img, 0.04, &mut seeded_rng(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn graph_composition_matches_manual_application() {
        let img = ramp(16, 16);
        let mut rng = seeded_rng(2);
        let t = DistortionToggles::default();
        for order in [0u8, 1] {
            let mut spec = DistortionSpec::sample(&mut rng, &t);
            spec.order_bit = order;
            let manual = distort_image(&img, &spec, &mut seeded_rng(40));
            let mut g = Graph::<f32>::new();
            let x = g.constant(img.to_batch());
            let y = training_distort(&mut g, x, &[spec], &mut seeded_rng(40));
            let got = ImageTensor::from_tensor(g.value(y).clone());
            assert!(got.max_abs_diff(&manual) < 1e-6);
        }
    }

    #[test]
    fn order_bit_matters() {
        let img = ramp(16, 16);
        let base = DistortionSpec {
            affine: AffineParams {
                rotation: 30.0,
                translate: [0.1, -0.05],
                scale: 1.1,
                shear: [10.0, 0.0],
            },
            noise_sigma: 0.04,
            order_bit: 0,
        };
        let a = distort_image(&img, &base, &mut seeded_rng(9));
        let b = distort_image(&img, &DistortionSpec { order_bit: 1, ..base }, &mut seeded_rng(9));
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn mixed_orders_select_per_item() {
        let imgs = [ramp(16, 16), ramp(16, 16).quantized()];
        let mut rng = seeded_rng(4);
        let t = DistortionToggles::default();
        let mut specs = [DistortionSpec::sample(&mut rng, &t), DistortionSpec::sample(&mut rng, &t)];
        specs[0].order_bit = 0;
        specs[1].order_bit = 1;
        let batch = Tensor::stack(&[imgs[0].to_batch(), imgs[1].to_batch()]);
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch);
        let y = training_distort(&mut g, x, &specs, &mut seeded_rng(8));
        // noise for item 1 follows item 0's draws
        let mut nrng = seeded_rng(8);
        let n0 = noise_values(&mut nrng, 3 * 256, 0.04);
        let n1 = noise_values(&mut nrng, 3 * 256, 0.04);
        let with = |img: &ImageTensor, n: &[f64], spec: &DistortionSpec| {
            let add = |im: &ImageTensor| {
                let mut o = im.clone();
                for (v, e) in o.data_mut().iter_mut().zip(n) {
                    *v = (*v as f64 + e).clamp(-1.0, 1.0) as f32;
                }
                o
            };
            if spec.order_bit == 0 {
                add(&apply_affine(img, &spec.affine))
            } else {
                apply_affine(&add(img), &spec.affine)
            }
        };
        let e0 = with(&imgs[0], &n0, &specs[0]);
        let e1 = with(&imgs[1], &n1, &specs[1]);
        let out = g.value(y);
        assert!(ImageTensor::from_tensor(out.item(0)).max_abs_diff(&e0) < 1e-6);
        assert!(ImageTensor::from_tensor(out.item(1)).max_abs_diff(&e1) < 1e-6);
    }
}
