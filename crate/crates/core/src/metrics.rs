//! Evaluation metrics in double precision. Image metrics map canonical
//! values to `[0, 1]` first.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::losses::{gaussian_window, BCE_EPS, SSIM_C1, SSIM_C2};
use crate::message::threshold;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: length mismatch {a} vs {b}")));
    }
    Ok(())
}

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Contract(format!(
            "image shape mismatch {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// Fraction of positions where the thresholded probability equals the bit.
pub fn bit_accuracy(probs: &[f64], bits: &[u8]) -> Result<f64> {
    same_len(probs.len(), bits.len(), "bit accuracy")?;
    if bits.is_empty() {
        return Err(Error::Contract("bit accuracy of an empty message".into()));
    }
    let hits = probs.iter().zip(bits).filter(|(&p, &b)| threshold(p) == b).count();
    Ok(hits as f64 / bits.len() as f64)
}

/// Mean clamped binary cross-entropy.
pub fn bce(probs: &[f64], bits: &[u8]) -> Result<f64> {
    same_len(probs.len(), bits.len(), "bce")?;
    let total: f64 = probs
        .iter()
        .zip(bits)
        .map(|(&p, &b)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if b == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / bits.len() as f64)
}

/// Mean squared difference on the canonical scale.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(1 / mse)` for a `[0, 1]`-scale MSE; `+∞` when it is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    // a halving of the difference maps the canonical scale onto [0, 1]
    Ok(psnr_from_mse(mse(a, b)? / 4.0))
}

/// Mean SSIM, per channel then averaged, on the `[0, 1]` convention.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let k = gaussian_window(h, w);
    let unit = |x: &[f32]| -> Vec<f64> { x.iter().map(|&v| (v as f64 + 1.0) / 2.0).collect() };
    let mut total = 0.0;
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let x = unit(&a.data()[range.clone()]);
        let y = unit(&b.data()[range]);
        total += ssim_plane(&x, &y, h, w, &k);
    }
    Ok(total / c as f64)
}

fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let (mx, _, _) = filter_valid(x, h, w, k);
    let (my, _, _) = filter_valid(y, h, w, k);
    let (exx, _, _) = filter_valid(&prod(x, x), h, w, k);
    let (eyy, _, _) = filter_valid(&prod(y, y), h, w, k);
    let (exy, oh, ow) = filter_valid(&prod(x, y), h, w, k);
    let mut sum = 0.0;
    for i in 0..oh * ow {
        let (a, b) = (mx[i], my[i]);
        let vx = exx[i] - a * a;
        let vy = eyy[i] - b * b;
        let cxy = exy[i] - a * b;
        sum += ((2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    sum / (oh * ow) as f64
}
