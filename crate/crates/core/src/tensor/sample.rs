use super::{Real, Tensor};

/// Per-axis interpolation table for half-pixel bilinear resizing.
pub(crate) struct Axis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Axis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

pub(crate) fn resize_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ay = Axis::new(h, oh);
    let ax = Axis::new(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let ly = T::cst(ay.frac[oy]);
            let r0 = &plane[ay.lo[oy] * w..(ay.lo[oy] + 1) * w];
            let r1 = &plane[ay.hi[oy] * w..(ay.hi[oy] + 1) * w];
            for ox in 0..ow {
                let lx = T::cst(ax.frac[ox]);
                let (x0, x1) = (ax.lo[ox], ax.hi[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn resize_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    let ay = Axis::new(h, oh);
    let ax = Axis::new(w, ow);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            let ly = T::cst(ay.frac[oy]);
            for ox in 0..ow {
                let lx = T::cst(ax.frac[ox]);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                let (x0, x1) = (ax.lo[ox], ax.hi[ox]);
                plane[ay.lo[oy] * w + x0] += top * (T::one() - lx);
                plane[ay.lo[oy] * w + x1] += top * lx;
                plane[ay.hi[oy] * w + x0] += bot * (T::one() - lx);
                plane[ay.hi[oy] * w + x1] += bot * lx;
            }
        }
    }
    dx
}

/// Non-differentiable convenience wrapper around the resize kernel.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    resize_forward(x, oh, ow)
}

/// Maps output pixel coordinates `(x, y)` (pixel centres at integers) to
/// source coordinates: `src = [a b c; d e f]·[x y 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap(pub [f64; 6]);

impl AffineMap {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }
}

#[inline]
fn corners(sx: f64, sy: f64, h: usize, w: usize) -> [(usize, f64, bool); 4] {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let lx = sx - x0;
    let ly = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let idx = |yy: isize, xx: isize| {
        let ok = yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize;
        (if ok { yy as usize * w + xx as usize } else { 0 }, ok)
    };
    let (i00, k00) = idx(y0, x0);
    let (i01, k01) = idx(y0, x0 + 1);
    let (i10, k10) = idx(y0 + 1, x0);
    let (i11, k11) = idx(y0 + 1, x0 + 1);
    [
        (i00, (1.0 - ly) * (1.0 - lx), k00),
        (i01, (1.0 - ly) * lx, k01),
        (i10, ly * (1.0 - lx), k10),
        (i11, ly * lx, k11),
    ]
}

pub(crate) fn affine_forward<T: Real>(x: &Tensor<T>, maps: &[AffineMap]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(maps.len(), n, "one affine map per batch item");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (b, map) in maps.iter().enumerate() {
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = map.apply(ox as f64, oy as f64);
                let cs = corners(sx, sy, h, w);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let plane = &x.data()[base..base + h * w];
                    let mut v = T::zero();
                    for &(i, wgt, ok) in &cs {
                        if ok && wgt != 0.0 {
                            v += plane[i] * T::cst(wgt);
                        }
                    }
                    out.data_mut()[base + oy * w + ox] = v;
                }
            }
        }
    }
    out
}

pub(crate) fn affine_backward<T: Real>(dy: &Tensor<T>, maps: &[AffineMap]) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (b, map) in maps.iter().enumerate() {
        for oy in 0..h {
            for ox in 0..w {
                let (sx, sy) = map.apply(ox as f64, oy as f64);
                let cs = corners(sx, sy, h, w);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let g = dy.data()[base + oy * w + ox];
                    for &(i, wgt, ok) in &cs {
                        if ok && wgt != 0.0 {
                            dx.data_mut()[base + i] += g * T::cst(wgt);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Applies per-item affine resampling (bilinear, zero fill) outside the tape.
pub fn affine_sample<T: Real>(x: &Tensor<T>, maps: &[AffineMap]) -> Tensor<T> {
    affine_forward(x, maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_halves_to_mid_value() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![-1.0f64, 1.0, 1.0, -1.0]);
        let y = resize_forward(&x, 1, 1);
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = Tensor::new(&[1, 2, 7, 5], (0..70).map(|i| (i as f64 * 0.7).sin()).collect());
        for (oh, ow) in [(14, 10), (3, 2), (7, 5)] {
            let y = resize_forward(&x, oh, ow);
            let g = Tensor::new(&[1, 2, oh, ow], (0..2 * oh * ow).map(|i| (i as f64).cos()).collect());
            let back = resize_backward(&g, 7, 5);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_affine_is_exact() {
        let x = Tensor::new(&[1, 3, 4, 6], (0..72).map(|i| (i as f32 * 0.3).sin()).collect());
        let y = affine_forward(&x, &[AffineMap::IDENTITY]);
        assert_eq!(x, y);
    }
}
