//! Evaluation-only distortions, addressed by name.
//!
//! A distortion is written `name`, `name=value` or `name=lo..hi`. Ranged
//! parameters are sampled uniformly per image. Every output is clamped to
//! the canonical range.

use std::fmt;
use std::io::{BufReader, Seek, SeekFrom};

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use rand::Rng as _;

use super::{apply_affine, gaussian_noise, AffineParams, AffineRanges};
use crate::error::{Error, Result};
use crate::image_io::{pixel_to_unit, unit_to_pixel, ImageTensor};
use crate::rng::Rng;
use crate::tensor::resize_bilinear;

/// Parameter value: fixed or sampled from a closed range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Param {
    Fixed(f64),
    Range(f64, f64),
}

impl Param {
    fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Range(lo, hi) if lo < hi => rng.gen_range(lo..=hi),
            Param::Range(lo, _) => lo,
        }
    }

    fn parse(text: &str) -> Result<Self> {
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::DistortionParam(format!("`{s}` is not a number")))
        };
        match text.split_once("..") {
            Some((lo, hi)) => {
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(Error::DistortionParam(format!("empty range {lo}..{hi}")));
                }
                Ok(Param::Range(lo, hi))
            }
            None => Ok(Param::Fixed(num(text)?)),
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            Param::Fixed(v) => (v, v),
            Param::Range(lo, hi) => (lo, hi),
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Fixed(v) => write!(f, "{v}"),
            Param::Range(lo, hi) => write!(f, "{lo}..{hi}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Original,
    /// Random rotation within ±parameter degrees plus shear within ±10°.
    Affine,
    /// Warp at the training-time ranges; the parameter scales every range.
    AffineTrain,
    Crop,
    Rotate,
    FlipH,
    FlipV,
    Scale,
    Elastic,
    GaussianNoise,
    GaussianBlur,
    BoxBlur,
    MotionBlur,
    MeanFilter,
    MedianFilter,
    Dropout,
    ResizedCrop,
    Resize,
    Posterize,
    Hue,
    Sharpness,
    Saturation,
    Contrast,
    Brightness,
    ColorJitter,
    Jpeg,
    SaltPepper,
    Combined,
}

const ALL: [(Kind, &str); 28] = [
    (Kind::Original, "original"),
    (Kind::Affine, "affine"),
    (Kind::AffineTrain, "affine-train"),
    (Kind::Crop, "crop"),
    (Kind::Rotate, "rotate"),
    (Kind::FlipH, "flip-h"),
    (Kind::FlipV, "flip-v"),
    (Kind::Scale, "scale"),
    (Kind::Elastic, "elastic"),
    (Kind::GaussianNoise, "gaussian-noise"),
    (Kind::GaussianBlur, "gaussian-blur"),
    (Kind::BoxBlur, "box-blur"),
    (Kind::MotionBlur, "motion-blur"),
    (Kind::MeanFilter, "mean-filter"),
    (Kind::MedianFilter, "median-filter"),
    (Kind::Dropout, "dropout"),
    (Kind::ResizedCrop, "resized-crop"),
    (Kind::Resize, "resize"),
    (Kind::Posterize, "posterize"),
    (Kind::Hue, "hue"),
    (Kind::Sharpness, "sharpness"),
    (Kind::Saturation, "saturation"),
    (Kind::Contrast, "contrast"),
    (Kind::Brightness, "brightness"),
    (Kind::ColorJitter, "color-jitter"),
    (Kind::Jpeg, "jpeg"),
    (Kind::SaltPepper, "salt-pepper"),
    (Kind::Combined, "combined"),
];

impl Kind {
    pub fn name(self) -> &'static str {
        ALL.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL.iter().find(|(_, n)| *n == name).map(|(k, _)| *k)
    }

    /// Default strength. Noise levels are canonical-range standard
    /// deviations; the table's `σ = 6` on the 0–255 scale is `6 / 127.5`.
    pub fn default_param(self) -> Option<Param> {
        use Kind::*;
        use Param::*;
        Some(match self {
            Original | FlipH | FlipV => return None,
            Affine => Fixed(60.0),
            AffineTrain => Fixed(1.0),
            Crop => Range(0.3, 0.8),
            Rotate => Range(30.0, 60.0),
            Scale => Range(0.3, 1.8),
            Elastic => Fixed(33.0),
            GaussianNoise => Fixed(6.0 / 127.5),
            GaussianBlur => Fixed(6.0),
            BoxBlur | MotionBlur | MeanFilter | MedianFilter => Fixed(7.0),
            Dropout => Fixed(0.7),
            ResizedCrop => Fixed(0.1),
            Resize => Fixed(0.15),
            Posterize => Fixed(6.0),
            Hue => Fixed(0.2),
            Sharpness => Fixed(0.5),
            Saturation | Contrast | Brightness => Range(0.3, 1.8),
            ColorJitter => Fixed(0.3),
            Jpeg => Fixed(40.0),
            SaltPepper => Fixed(0.02),
            Combined => Fixed(0.04),
        })
    }

    fn check(self, p: Param) -> Result<()> {
        use Kind::*;
        let (lo, hi) = p.bounds();
        let bad = |why: &str| Err(Error::DistortionParam(format!("{}: {why}", self.name())));
        match self {
            Crop | ResizedCrop | Resize if !(lo > 0.0 && hi <= 1.0) => {
                bad("expected a fraction in (0, 1]")
            }
            Dropout | SaltPepper if !(lo >= 0.0 && hi <= 1.0) => bad("expected a probability"),
            Scale | Saturation | Contrast | Brightness if lo <= 0.0 => bad("expected a positive factor"),
            BoxBlur | MotionBlur | MeanFilter | MedianFilter
                if lo != hi || lo < 1.0 || lo.fract() != 0.0 || lo as usize % 2 == 0 =>
            {
                bad("expected a fixed odd kernel size")
            }
            Posterize if lo != hi || !(1.0..=8.0).contains(&lo) || lo.fract() != 0.0 => bad("expected 1..=8 bits"),
            Jpeg if lo != hi || !(1.0..=100.0).contains(&lo) => bad("expected a quality in 1..=100"),
            GaussianNoise | GaussianBlur | Elastic | Combined | AffineTrain | Affine | Hue | Sharpness | ColorJitter
                if lo < 0.0 =>
            {
                bad("expected a non-negative value")
            }
            _ => Ok(()),
        }
    }
}

/// A named evaluation distortion with its strength.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalDistortion {
    pub kind: Kind,
    pub param: Option<Param>,
}

impl fmt::Display for EvalDistortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param {
            Some(p) if Some(p) != self.kind.default_param() => write!(f, "{}={p}", self.kind.name()),
            _ => write!(f, "{}", self.kind.name()),
        }
    }
}

impl EvalDistortion {
    pub fn parse(text: &str) -> Result<Self> {
        let (name, value) = match text.split_once('=') {
            Some((n, v)) => (n.trim(), Some(v)),
            None => (text.trim(), None),
        };
        let kind = Kind::from_name(name).ok_or_else(|| Error::UnknownDistortion(name.to_string()))?;
        let param = match (value, kind.default_param()) {
            (None, d) => d,
            (Some(_), None) => {
                return Err(Error::DistortionParam(format!("{name} takes no parameter")));
            }
            (Some(v), Some(_)) => Some(Param::parse(v)?),
        };
        if let Some(p) = param {
            kind.check(p)?;
        }
        Ok(Self { kind, param })
    }

    /// Copy with a fixed parameter value, for strength sweeps.
    pub fn with_value(&self, v: f64) -> Result<Self> {
        if self.kind.default_param().is_none() {
            return Err(Error::DistortionParam(format!("{} takes no parameter", self.kind.name())));
        }
        self.kind.check(Param::Fixed(v))?;
        Ok(Self {
            kind: self.kind,
            param: Some(Param::Fixed(v)),
        })
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        ALL.iter().map(|(_, n)| *n)
    }

    /// Applies the distortion to an independent copy of `img`.
    pub fn apply(&self, img: &ImageTensor, rng: &mut Rng) -> Result<ImageTensor> {
        use Kind::*;
        let p = |rng: &mut Rng| self.param.map(|p| p.draw(rng)).unwrap_or(0.0);
        let mut out = match self.kind {
            Original => img.clone(),
            Affine => {
                let rot = p(rng);
                let ranges = AffineRanges {
                    rotation: rot,
                    translation: 0.0,
                    scale: (1.0, 1.0),
                    shear: 10.0,
                };
                apply_affine(img, &AffineParams::sample(rng, &ranges))
            }
            AffineTrain => {
                let k = p(rng);
                let t = AffineRanges::TRAINING;
                let ranges = AffineRanges {
                    rotation: t.rotation * k,
                    translation: t.translation * k,
                    scale: (1.0 - (1.0 - t.scale.0) * k, 1.0 + (t.scale.1 - 1.0) * k),
                    shear: t.shear * k,
                };
                apply_affine(img, &AffineParams::sample(rng, &ranges))
            }
            Crop => crop(img, p(rng), rng),
            Rotate => apply_affine(
                img,
                &AffineParams {
                    rotation: p(rng),
                    ..AffineParams::IDENTITY
                },
            ),
            FlipH => flip(img, true),
            FlipV => flip(img, false),
            Scale => scale(img, p(rng)),
            Elastic => elastic(img, p(rng), 4.0, rng),
            GaussianNoise => gaussian_noise(img, p(rng), rng),
            GaussianBlur => {
                let sigma = p(rng);
                filter(img, &gaussian_kernel_2d(7, sigma), 7)
            }
            BoxBlur | MeanFilter => {
                let k = p(rng) as usize;
                filter(img, &vec![1.0 / (k * k) as f64; k * k], k)
            }
            MotionBlur => {
                let k = p(rng) as usize;
                let mut kern = vec![0.0; k * k];
                kern[(k / 2) * k..(k / 2 + 1) * k].fill(1.0 / k as f64);
                filter(img, &kern, k)
            }
            MedianFilter => median(img, p(rng) as usize),
            Dropout => dropout(img, p(rng), rng),
            ResizedCrop => resized_crop(img, p(rng), rng),
            Resize => {
                let s = 1.0 - p(rng);
                let (h, w) = (img.height(), img.width());
                let sh = ((h as f64 * s).round() as usize).max(1);
                let sw = ((w as f64 * s).round() as usize).max(1);
                resize(&resize(img, sh, sw), h, w)
            }
            Posterize => posterize(img, p(rng) as u32),
            Hue => {
                let amt = p(rng);
                shift_hue(img, rng.gen_range(-amt..=amt))
            }
            Sharpness => {
                let amt = p(rng);
                sharpen(img, 1.0 + rng.gen_range(-amt..=amt))
            }
            Saturation => saturate(img, p(rng)),
            Contrast => contrast(img, p(rng)),
            Brightness => brightness(img, p(rng)),
            ColorJitter => {
                let j = p(rng);
                let mut f = || 1.0 + rng.gen_range(-j..=j);
                let (b, c, s) = (f(), f(), f());
                saturate(&contrast(&brightness(img, b), c), s)
            }
            Jpeg => jpeg(img, p(rng) as u8)?,
            SaltPepper => salt_pepper(img, p(rng), rng),
            Combined => {
                let noisy = gaussian_noise(img, p(rng), rng);
                apply_affine(&noisy, &AffineParams::sample(rng, &AffineRanges::TRAINING))
            }
        };
        out.clamp();
        Ok(out)
    }
}

fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

fn from_unit(u: f64) -> f32 {
    (u * 2.0 - 1.0).clamp(-1.0, 1.0) as f32
}

fn resize(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_tensor(resize_bilinear(&img.to_batch(), h, w))
}

fn sub_image(img: &ImageTensor, top: usize, left: usize, h: usize, w: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..img.channels() {
        for y in top..top + h {
            for x in left..left + w {
                data.push(img.at(c, y, x));
            }
        }
    }
    ImageTensor::new(img.channels(), h, w, data)
}

/// Smallest input the extractor accepts; smaller results are centred on a
/// mid-gray canvas of this size.
const MIN_SIDE: usize = 32;

fn pad_to_min(img: ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    if h >= MIN_SIDE && w >= MIN_SIDE {
        return img;
    }
    let (ph, pw) = (h.max(MIN_SIDE), w.max(MIN_SIDE));
    let (oy, ox) = ((ph - h) / 2, (pw - w) / 2);
    let mut out = ImageTensor::filled(img.channels(), ph, pw, 0.0);
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(c * ph + y + oy) * pw + x + ox] = img.at(c, y, x);
            }
        }
    }
    out
}

/// Random window keeping `area` of the pixels at the original aspect ratio.
fn crop_window(h: usize, w: usize, area: f64, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(MIN_SIDE.min(h), h);
    let cw = ((w as f64 * side).round() as usize).clamp(MIN_SIDE.min(w), w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    (top, left, ch, cw)
}

fn crop(img: &ImageTensor, area: f64, rng: &mut Rng) -> ImageTensor {
    let (top, left, ch, cw) = crop_window(img.height(), img.width(), area, rng);
    sub_image(img, top, left, ch, cw)
}

fn resized_crop(img: &ImageTensor, removed: f64, rng: &mut Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (top, left, ch, cw) = crop_window(h, w, 1.0 - removed, rng);
    resize(&sub_image(img, top, left, ch, cw), h, w)
}

fn flip(img: &ImageTensor, horizontal: bool) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out.data_mut()[(ch * h + y) * w + x] = img.at(ch, sy, sx);
            }
        }
    }
    out
}

fn scale(img: &ImageTensor, factor: f64) -> ImageTensor {
    let h = ((img.height() as f64 * factor).round() as usize).max(1);
    let w = ((img.width() as f64 * factor).round() as usize).max(1);
    pad_to_min(resize(img, h, w))
}

/// Bilinear resampling at `(x + dx, y + dy)` with zero fill.
fn remap(img: &ImageTensor, dx: &[f64], dy: &[f64]) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = ImageTensor::filled(c, h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (sx, sy) = (x as f64 + dx[i], y as f64 + dy[i]);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (lx, ly) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let mut v = 0.0;
                for (yy, wy) in [(y0, 1.0 - ly), (y0 + 1, ly)] {
                    for (xx, wx) in [(x0, 1.0 - lx), (x0 + 1, lx)] {
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            v += wy * wx * img.at(ch, yy as usize, xx as usize) as f64;
                        }
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

fn gaussian_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing of one plane with zero padding.
fn smooth_plane(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_1d(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let sx = xx as isize + j as isize - r;
                if sx >= 0 && sx < w as isize {
                    s += kv * x[y * w + sx as usize];
                }
            }
            tmp[y * w + xx] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let sy = y as isize + j as isize - r;
                if sy >= 0 && sy < h as isize {
                    s += kv * tmp[sy as usize * w + xx];
                }
            }
            out[y * w + xx] = s;
        }
    }
    out
}

fn elastic(img: &ImageTensor, alpha: f64, sigma: f64, rng: &mut Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut field = || {
        let raw = super::noise_values(rng, h * w, alpha.max(f64::MIN_POSITIVE));
        smooth_plane(&raw, h, w, sigma)
    };
    let dx = field();
    let dy = field();
    remap(img, &dx, &dy)
}

fn gaussian_kernel_2d(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let mut out: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `k×k` correlation with replicated borders.
fn filter(img: &ImageTensor, kern: &[f64], k: usize) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let r = (k / 2) as isize;
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for ky in 0..k {
                    let sy = (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for kx in 0..k {
                        let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        s += kern[ky * k + kx] * img.at(ch, sy, sx) as f64;
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = s as f32;
            }
        }
    }
    out
}

fn median(img: &ImageTensor, k: usize) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let r = (k / 2) as isize;
    let mut out = img.clone();
    let mut win = Vec::with_capacity(k * k);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                win.clear();
                for ky in -r..=r {
                    let sy = (y as isize + ky).clamp(0, h as isize - 1) as usize;
                    for kx in -r..=r {
                        let sx = (x as isize + kx).clamp(0, w as isize - 1) as usize;
                        win.push(img.at(ch, sy, sx));
                    }
                }
                let mid = win.len() / 2;
                let (_, m, _) = win.select_nth_unstable_by(mid, f32::total_cmp);
                out.data_mut()[(ch * h + y) * w + x] = *m;
            }
        }
    }
    out
}

/// Per-pixel mask over all channels: returns `true` with probability `p`.
fn pixel_mask(h: usize, w: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    (0..h * w).map(|_| rng.gen_bool(p)).collect()
}

fn dropout(img: &ImageTensor, p: f64, rng: &mut Rng) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mask = pixel_mask(h, w, p, rng);
    let mut out = img.clone();
    for ch in 0..c {
        for (i, &drop) in mask.iter().enumerate() {
            if drop {
                out.data_mut()[ch * h * w + i] = 0.0;
            }
        }
    }
    out
}

fn salt_pepper(img: &ImageTensor, p: f64, rng: &mut Rng) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = img.clone();
    for i in 0..h * w {
        if rng.gen_bool(p) {
            let v = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for ch in 0..c {
                out.data_mut()[ch * h * w + i] = v;
            }
        }
    }
    out
}

fn posterize(img: &ImageTensor, bits: u32) -> ImageTensor {
    let mask = !((1u16 << (8 - bits)) - 1) as u8;
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = pixel_to_unit(unit_to_pixel(*v) & mask));
    out
}

/// ITU-R 601 luma on the unit scale.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn map_pixels(img: &ImageTensor, f: impl Fn([f64; 3]) -> [f64; 3]) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut out = img.clone();
    for i in 0..n {
        let rgb = [to_unit(img.data()[i]), to_unit(img.data()[n + i]), to_unit(img.data()[2 * n + i])];
        let o = f(rgb);
        for c in 0..3 {
            out.data_mut()[c * n + i] = from_unit(o[c].clamp(0.0, 1.0));
        }
    }
    out
}

fn brightness(img: &ImageTensor, f: f64) -> ImageTensor {
    map_pixels(img, |p| p.map(|v| v * f))
}

fn contrast(img: &ImageTensor, f: f64) -> ImageTensor {
    let n = img.height() * img.width();
    let d = img.data();
    let mean = (0..n)
        .map(|i| luma(to_unit(d[i]), to_unit(d[n + i]), to_unit(d[2 * n + i])))
        .sum::<f64>()
        / n as f64;
    map_pixels(img, |p| p.map(|v| mean + f * (v - mean)))
}

fn saturate(img: &ImageTensor, f: f64) -> ImageTensor {
    map_pixels(img, |p| {
        let y = luma(p[0], p[1], p[2]);
        p.map(|v| y + f * (v - y))
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shift_hue(img: &ImageTensor, shift: f64) -> ImageTensor {
    map_pixels(img, |p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([h + shift, s, v])
    })
}

/// Blend with a 3×3 smoothed copy: factor 1 is the identity, above 1 sharpens.
fn sharpen(img: &ImageTensor, factor: f64) -> ImageTensor {
    let mut kern = [1.0 / 13.0; 9];
    kern[4] = 5.0 / 13.0;
    let blurred = filter(img, &kern, 3);
    let mut out = img.clone();
    for (o, (&x, &b)) in out.data_mut().iter_mut().zip(img.data().iter().zip(blurred.data())) {
        *o = (b as f64 + factor * (x as f64 - b as f64)) as f32;
    }
    out
}

/// Encodes to a temporary JPEG file at `quality` and decodes it again.
fn jpeg(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let rgb = img.to_rgb8();
    let mut file = tempfile::tempfile().map_err(|e| Error::io("<jpeg temp file>", e))?;
    let encode_err = |e: image::ImageError| Error::Image {
        path: "<jpeg temp file>".into(),
        message: e.to_string(),
    };
    JpegEncoder::new_with_quality(&mut file, quality)
        .encode_image(&rgb)
        .map_err(encode_err)?;
    file.seek(SeekFrom::Start(0)).map_err(|e| Error::io("<jpeg temp file>", e))?;
    let decoded = image::load(BufReader::new(file), ImageFormat::Jpeg).map_err(encode_err)?;
    Ok(ImageTensor::from_rgb8(&decoded.to_rgb8()))
}
