use super::Real;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn same3() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
        }
    }

    pub const fn pointwise() -> Self {
        Self {
            kernel: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    pub const fn down3() -> Self {
        Self {
            kernel: 3,
            stride: 2,
            pad: 1,
            dilation: 1,
        }
    }

    pub const fn dilated3(dilation: usize) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            pad: dilation,
            dilation,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        assert!(
            h + 2 * self.pad >= span && w + 2 * self.pad >= span,
            "input {h}x{w} smaller than kernel span {span}"
        );
        (
            (h + 2 * self.pad - span) / self.stride + 1,
            (w + 2 * self.pad - span) / self.stride + 1,
        )
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Geometry of a deformable convolution: the base grid plus per-tap offsets.
pub type DeformGeom = ConvGeom;

pub(crate) struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Unfolds one `C×H×W` image into `(C·k·k) × (oh·ow)` columns.
pub(crate) fn im2col<T: Real>(x: &[T], p: &Plane, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let k = g.kernel;
    let ohw = oh * ow;
    for ci in 0..p.c {
        let src = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= p.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * p.w..(iy as usize + 1) * p.w];
                    let off = (kj * g.dilation) as isize - g.pad as isize;
                    let (lo, hi) = valid_span(off, g.stride, ow, p.w);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = (lo * g.stride) as isize + off;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&srow[start as usize..start as usize + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = srow[start as usize + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + off` lies inside `0..w`.
#[inline]
fn valid_span(off: isize, stride: usize, ow: usize, w: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox·s + off ≥ 0
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    // largest ox with ox·s + off ≤ w − 1, plus one
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Real>(cols: &[T], p: &Plane, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [T]) {
    let k = g.kernel;
    let ohw = oh * ow;
    for ci in 0..p.c {
        let dst = &mut dx[ci * p.h * p.w..(ci + 1) * p.h * p.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * p.w..(iy as usize + 1) * p.w];
                    let off = (kj * g.dilation) as isize - g.pad as isize;
                    let (lo, hi) = valid_span(off, g.stride, ow, p.w);
                    if lo < hi {
                        let start = ((lo * g.stride) as isize + off) as usize;
                        let line = &src[oy * ow + lo..oy * ow + hi];
                        if g.stride == 1 {
                            for (d, &v) in drow[start..start + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in line.iter().enumerate() {
                                drow[start + j * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear read with zero padding. Returns the value plus the four corner
/// indices/weights used, for reuse in the backward pass.
#[inline]
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    [
        (at(y0, x0), (1.0 - ly) * (1.0 - lx)),
        (at(y0, x0 + 1), (1.0 - ly) * lx),
        (at(y0 + 1, x0), ly * (1.0 - lx)),
        (at(y0 + 1, x0 + 1), ly * lx),
    ]
}

/// Position read by tap `(ki, kj)` at output `(oy, ox)` plus its learned offset.
#[inline]
fn deform_pos<T: Real>(
    g: &ConvGeom,
    offsets: &[T],
    ohw: usize,
    tap: usize,
    ki: usize,
    kj: usize,
    oy: usize,
    ox: usize,
    pos: usize,
) -> (f64, f64) {
    let dy = offsets[(2 * tap) * ohw + pos].to_f64().unwrap();
    let dx = offsets[(2 * tap + 1) * ohw + pos].to_f64().unwrap();
    let y = (oy * g.stride + ki * g.dilation) as f64 - g.pad as f64 + dy;
    let x = (ox * g.stride + kj * g.dilation) as f64 - g.pad as f64 + dx;
    (y, x)
}

/// Deformable unfold: each tap reads at its grid location displaced by a
/// per-position offset (`offsets` is `2·k·k × oh·ow`, `(dy, dx)` per tap).
pub(crate) fn deform_im2col<T: Real>(
    x: &[T],
    offsets: &[T],
    p: &Plane,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let ohw = oh * ow;
    for ki in 0..k {
        for kj in 0..k {
            let tap = ki * k + kj;
            for oy in 0..oh {
                for ox in 0..ow {
                    let pos = oy * ow + ox;
                    let (y, xx) = deform_pos(g, offsets, ohw, tap, ki, kj, oy, ox, pos);
                    let taps = bilinear_taps(y, xx, p.h, p.w);
                    for ci in 0..p.c {
                        let plane = &x[ci * p.h * p.w..(ci + 1) * p.h * p.w];
                        let mut v = T::zero();
                        for &(idx, wgt) in &taps {
                            if let Some(i) = idx {
                                v += plane[i] * T::cst(wgt);
                            }
                        }
                        cols[(ci * g.taps() + tap) * ohw + pos] = v;
                    }
                }
            }
        }
    }
}

/// Backward of [`deform_im2col`] into the input image and the offsets.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_col2im<T: Real>(
    dcols: &[T],
    x: &[T],
    offsets: &[T],
    p: &Plane,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    mut dx: Option<&mut [T]>,
    mut doff: Option<&mut [T]>,
) {
    let k = g.kernel;
    let ohw = oh * ow;
    for ki in 0..k {
        for kj in 0..k {
            let tap = ki * k + kj;
            for oy in 0..oh {
                for ox in 0..ow {
                    let pos = oy * ow + ox;
                    let (y, xx) = deform_pos(g, offsets, ohw, tap, ki, kj, oy, ox, pos);
                    let taps = bilinear_taps(y, xx, p.h, p.w);
                    let ly = y - y.floor();
                    let lx = xx - xx.floor();
                    let mut gy = 0.0f64;
                    let mut gx = 0.0f64;
                    for ci in 0..p.c {
                        let up = dcols[(ci * g.taps() + tap) * ohw + pos];
                        if up == T::zero() {
                            continue;
                        }
                        let base = ci * p.h * p.w;
                        if let Some(dx) = dx.as_deref_mut() {
                            for &(idx, wgt) in &taps {
                                if let Some(i) = idx {
                                    dx[base + i] += up * T::cst(wgt);
                                }
                            }
                        }
                        if doff.is_some() {
                            let v = |j: usize| {
                                taps[j]
                                    .0
                                    .map(|i| x[base + i].to_f64().unwrap())
                                    .unwrap_or(0.0)
                            };
                            let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                            let u = up.to_f64().unwrap();
                            gy += u * ((1.0 - lx) * (v10 - v00) + lx * (v11 - v01));
                            gx += u * ((1.0 - ly) * (v01 - v00) + ly * (v11 - v10));
                        }
                    }
                    if let Some(doff) = doff.as_deref_mut() {
                        doff[(2 * tap) * ohw + pos] += T::cst(gy);
                        doff[(2 * tap + 1) * ohw + pos] += T::cst(gx);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_size_arithmetic() {
        assert_eq!(ConvGeom::same3().out_size(64, 64), (64, 64));
        assert_eq!(ConvGeom::down3().out_size(64, 64), (32, 32));
        assert_eq!(ConvGeom::down3().out_size(33, 47), (17, 24));
        assert_eq!(ConvGeom::dilated3(2).out_size(16, 16), (16, 16));
    }

    #[test]
    fn unfold_matches_direct_indexing() {
        let geoms = [
            ConvGeom::same3(),
            ConvGeom::down3(),
            ConvGeom::dilated3(2),
            ConvGeom::dilated3(3),
            ConvGeom::pointwise(),
        ];
        for (h, w) in [(5, 4), (7, 9), (2, 3), (1, 1)] {
            let p = Plane { c: 2, h, w };
            for g in geoms {
                let (oh, ow) = g.out_size(h, w);
                let k = g.kernel;
                let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
                let mut cols = vec![f64::NAN; 2 * k * k * oh * ow];
                im2col(&x, &p, &g, oh, ow, &mut cols);
                for ci in 0..2 {
                    for ki in 0..k {
                        for kj in 0..k {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                    let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize;
                                    let want = if inside { x[(ci * h + iy as usize) * w + ix as usize] } else { 0.0 };
                                    let row = (ci * k + ki) * k + kj;
                                    assert_eq!(cols[row * oh * ow + oy * ow + ox], want);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let p = Plane { c: 2, h: 5, w: 4 };
        for g in [ConvGeom::same3(), ConvGeom::down3(), ConvGeom::dilated3(2)] {
            let (oh, ow) = g.out_size(p.h, p.w);
            let x: Vec<f64> = (0..p.c * p.h * p.w).map(|i| (i as f64 * 0.37).sin()).collect();
            let rows = p.c * 9 * oh * ow;
            let c: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut cols = vec![0.0; rows];
            im2col(&x, &p, &g, oh, ow, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &p, &g, oh, ow, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_offsets_reduce_to_plain_unfold() {
        let p = Plane { c: 3, h: 6, w: 7 };
        let g = ConvGeom::same3();
        let (oh, ow) = g.out_size(p.h, p.w);
        let x: Vec<f32> = (0..p.c * p.h * p.w).map(|i| (i as f32 * 0.3).sin()).collect();
        let offsets = vec![0.0f32; 18 * oh * ow];
        let mut a = vec![0.0; p.c * 9 * oh * ow];
        let mut b = a.clone();
        im2col(&x, &p, &g, oh, ow, &mut a);
        deform_im2col(&x, &offsets, &p, &g, oh, ow, &mut b);
        assert_eq!(a, b);
    }
}
