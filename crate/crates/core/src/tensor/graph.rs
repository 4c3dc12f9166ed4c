use std::collections::{BTreeMap, HashMap};

use super::conv::{col2im, deform_col2im, deform_im2col, im2col, ConvGeom, Plane};
use super::sample::{affine_backward, affine_forward, resize_backward, resize_forward, AffineMap};
use super::{Real, Tensor};
use crate::params::ParamStore;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Square(Var),
    Clamp(Var, T, T),
    AddChannel(Var, Var),
    MulScalar(Var, Var),
    BroadcastSpatial(Var),
    Gap(Var),
    MeanRows(Var),
    Pick(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Linear(Var, Var, Option<Var>),
    Conv(Var, Var, Option<Var>, ConvGeom),
    DeformConv(Var, Var, Var, Option<Var>, ConvGeom),
    InstanceNorm(Var, Vec<T>),
    Stats(Var),
    Resize(Var),
    Affine(Var, Vec<AffineMap>),
    GaussianValid(Var, Vec<T>),
    Mean(Var),
    Bce(Var, Vec<T>, T),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reverse-mode tape. Parameters are pulled lazily from an optional
/// [`ParamStore`]; each named parameter maps to a single leaf so that shared
/// weights accumulate gradient from every use.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    params: HashMap<String, Var>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.numel(), b.numel(), "elementwise size mismatch {:?} vs {:?}", a.shape(), b.shape());
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            params: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradient (used for gradient probes on inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn offset(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    // ---- broadcasting & reshaping -----------------------------------------

    /// `x[n, c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(self.value(bias).numel(), c, "channel bias length");
        let inner: usize = xv.shape()[2..].iter().product();
        let b = self.value(bias).data();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddChannel(x, bias), rg)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "mul_scalar expects a scalar");
        let k = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * k);
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::MulScalar(x, s), rg)
    }

    /// `[N, C] -> [N, C, h, w]` by spatial repetition.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.value(v).dims2();
        let mut out = Vec::with_capacity(n * c * h * w);
        for &e in self.value(v).data() {
            out.extend(std::iter::repeat(e).take(h * w));
        }
        let rg = self.rg(v);
        self.push(Tensor::new(&[n, c, h, w], out), Op::BroadcastSpatial(v), rg)
    }

    /// Global average pool `[N, C, H, W] -> [N, C]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inv = T::one() / T::cst((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c], out), Op::Gap(x), rg)
    }

    /// Mean over the leading axis of a `[N, K]` tensor, giving `[1, K]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, k) = self.value(x).dims2();
        let mut out = vec![T::zero(); k];
        for row in self.value(x).data().chunks(k) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::cst(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push(Tensor::new(&[1, k], out), Op::MeanRows(x), rg)
    }

    /// Element `idx` of the flattened tensor as a `[1]` scalar.
    pub fn pick(&mut self, x: Var, idx: usize) -> Var {
        let v = Tensor::scalar(self.value(x).data()[idx]);
        let rg = self.rg(x);
        self.push(v, Op::Pick(x, idx), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing dims mismatch");
            channels += s[1];
        }
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out), Op::Concat(parts.to_vec()), rg)
    }

    // ---- linear maps ------------------------------------------------------

    /// `y[n, o] = Σ_i x[n, i]·w[o, i] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear input width");
        let mut out = Tensor::zeros(&[n, o]);
        T::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            (i as isize, 1),
            self.value(w).data(),
            (1, i as isize),
            out.data_mut(),
            (o as isize, 1),
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear(x, w, b), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [out, in, k, k]");
        assert_eq!(ws[1], c, "conv input channels: weight {ws:?} vs input {c}");
        assert_eq!((ws[2], ws[3]), (geom.kernel, geom.kernel));
        let co = ws[0];
        let (oh, ow) = geom.out_size(h, wd);
        let kdim = c * geom.kernel * geom.kernel;
        let ohw = oh * ow;
        let plane = Plane { c, h, w: wd };
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kdim * ohw]
        };
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            for b in 0..n {
                let xs = &xd[b * c * h * wd..(b + 1) * c * h * wd];
                let src: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &plane, &geom, oh, ow, &mut cols);
                    &cols
                };
                let dst = &mut out.data_mut()[b * co * ohw..(b + 1) * co * ohw];
                T::gemm(co, kdim, ohw, wdata, (kdim as isize, 1), src, (ohw as isize, 1), dst, (ohw as isize, 1), false);
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(ohw).enumerate() {
                let bb = bias[i % co];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv(x, w, b, geom), rg)
    }

    /// Deformable convolution; `offsets` is `[N, 2·k·k, oh, ow]`.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[1], c);
        let co = ws[0];
        let (oh, ow) = geom.out_size(h, wd);
        let taps = geom.kernel * geom.kernel;
        assert_eq!(self.value(offsets).shape(), &[n, 2 * taps, oh, ow], "offset shape");
        let kdim = c * taps;
        let ohw = oh * ow;
        let plane = Plane { c, h, w: wd };
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut cols = vec![T::zero(); kdim * ohw];
        {
            let xd = self.value(x).data();
            let od = self.value(offsets).data();
            let wdata = self.value(w).data();
            for bi in 0..n {
                let xs = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
                let os = &od[bi * 2 * taps * ohw..(bi + 1) * 2 * taps * ohw];
                deform_im2col(xs, os, &plane, &geom, oh, ow, &mut cols);
                let dst = &mut out.data_mut()[bi * co * ohw..(bi + 1) * co * ohw];
                T::gemm(co, kdim, ohw, wdata, (kdim as isize, 1), &cols, (ohw as isize, 1), dst, (ohw as isize, 1), false);
            }
        }
        if let Some(bv) = b {
            let bias = self.value(bv).data().to_vec();
            for (i, chunk) in out.data_mut().chunks_mut(ohw).enumerate() {
                let bb = bias[i % co];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(offsets) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::DeformConv(x, offsets, w, b, geom), rg)
    }

    // ---- normalisation & statistics ---------------------------------------

    /// Per-sample, per-channel spatial standardisation without affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let m = (h * w) as f64;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::new();
        for plane in out.data_mut().chunks_mut(h * w) {
            let mean = plane.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
            let var = plane
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / m;
            let r = 1.0 / (var + eps).sqrt();
            let (mean_t, r_t) = (T::cst(mean), T::cst(r));
            plane.iter_mut().for_each(|v| *v = (*v - mean_t) * r_t);
            inv_std.push(r_t);
        }
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm(x, inv_std), rg)
    }

    /// Per-item descriptor `(mean, std, mean |x|, max)` giving `[N, 4]`.
    pub fn stats(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let mut out = Vec::with_capacity(4 * n);
        for item in t.data().chunks(per) {
            let d = describe(item);
            out.extend(d.iter().map(|&v| T::cst(v)));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, 4], out), Op::Stats(x), rg)
    }

    // ---- resampling --------------------------------------------------------

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = resize_forward(self.value(x), oh, ow);
        let rg = self.rg(x);
        self.push(v, Op::Resize(x), rg)
    }

    /// Per-item inverse-mapped bilinear resampling with zero fill.
    pub fn affine(&mut self, x: Var, maps: Vec<AffineMap>) -> Var {
        let v = affine_forward(self.value(x), &maps);
        let rg = self.rg(x);
        self.push(v, Op::Affine(x, maps), rg)
    }

    /// Separable filtering with a symmetric 1-D kernel, valid region only.
    pub fn gaussian_valid(&mut self, x: Var, kernel: &[f64]) -> Var {
        let k: Vec<T> = kernel.iter().map(|&v| T::cst(v)).collect();
        let v = sep_filter_valid(self.value(x), &k);
        let rg = self.rg(x);
        self.push(v, Op::GaussianValid(x, k), rg)
    }

    // ---- reductions & losses ----------------------------------------------

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = T::cst(t.numel() as f64);
        let v = Tensor::scalar(t.data().iter().copied().sum::<T>() / m);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `target`,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &[T], eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.numel(), target.len(), "bce length mismatch");
        let m = T::cst(target.len() as f64);
        let hi = T::one() - eps;
        let total: T = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&q, &t)| {
                let q = q.max(eps).min(hi);
                -(t * q.ln() + (T::one() - t) * (T::one() - q).ln())
            })
            .sum();
        let rg = self.rg(p);
        self.push(Tensor::scalar(total / m), Op::Bce(p, target.to_vec(), eps), rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let m = T::cst(av.numel() as f64);
        let s: T = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / m), Op::Mse(a, b), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        self.backward_with(loss, Tensor::full(self.value(loss).shape(), T::one()))
    }

    /// Reverse sweep seeded with an explicit upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(seed.numel(), self.value(out).numel());
        if !self.rg(out) {
            return Grads { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
        }
        Grads { grads }
    }

    /// Parameter gradients keyed by name. Unused parameters are absent.
    pub fn param_grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g.reshaped(self.value(v).shape())),
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, zip_map(g, self.value(*b), |u, y| u * y));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, zip_map(g, self.value(*a), |u, x| u * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.acc(grads, *a, zip_map(g, bv, |u, y| u / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_map(out, bv, |o, y| o / y);
                    self.acc(grads, *b, zip_map(g, &q, |u, r| -u * r));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(grads, *a, g.map(|u| u * k));
            }
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                self.acc(grads, *a, zip_map(g, out, |u, y| u * y * (T::one() - y)));
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, zip_map(g, out, |u, y| u * (T::one() - y * y)));
            }
            Op::Silu(a) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                self.acc(grads, *a, zip_map(g, &d, |u, v| u * v));
            }
            Op::Square(a) => {
                let two = T::cst(2.0);
                self.acc(grads, *a, zip_map(g, self.value(*a), |u, x| two * u * x));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.acc(
                    grads,
                    *a,
                    zip_map(g, self.value(*a), |u, x| if x >= lo && x <= hi { u } else { T::zero() }),
                );
            }
            Op::AddChannel(x, bias) => {
                if self.rg(*bias) {
                    let c = self.value(*x).shape()[1];
                    let inner: usize = self.value(*x).shape()[2..].iter().product();
                    let mut gb = vec![T::zero(); c];
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        gb[j % c] += chunk.iter().copied().sum::<T>();
                    }
                    self.acc(grads, *bias, Tensor::new(self.value(*bias).shape(), gb));
                }
                self.acc(grads, *x, g.clone());
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).data()[0];
                if self.rg(*x) {
                    self.acc(grads, *x, g.map(|u| u * k));
                }
                if self.rg(*s) {
                    let d: T = g.data().iter().zip(self.value(*x).data()).map(|(&u, &v)| u * v).sum();
                    self.acc(grads, *s, Tensor::new(self.value(*s).shape(), vec![d]));
                }
            }
            Op::BroadcastSpatial(v) => {
                let (_, _, h, w) = out.dims4();
                let d: Vec<T> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                self.acc(grads, *v, Tensor::new(self.value(*v).shape(), d));
            }
            Op::Gap(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let inv = T::one() / T::cst((h * w) as f64);
                let mut d = Vec::with_capacity(n * c * h * w);
                for &u in g.data() {
                    d.extend(std::iter::repeat(u * inv).take(h * w));
                }
                self.acc(grads, *x, Tensor::new(&[n, c, h, w], d));
            }
            Op::MeanRows(x) => {
                let (n, k) = self.value(*x).dims2();
                let inv = T::one() / T::cst(n as f64);
                let mut d = Vec::with_capacity(n * k);
                for _ in 0..n {
                    d.extend(g.data().iter().map(|&u| u * inv));
                }
                self.acc(grads, *x, Tensor::new(&[n, k], d));
            }
            Op::Pick(x, idx) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*idx] = g.data()[0];
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.clone().reshaped(self.value(*x).shape()));
            }
            Op::Concat(parts) => {
                let n = out.shape()[0];
                let inner: usize = out.shape()[2..].iter().product();
                let total = out.shape()[1] * inner;
                let mut start = 0;
                for &p in parts {
                    let per = self.value(p).shape()[1] * inner;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * per);
                        for b in 0..n {
                            d.extend_from_slice(&g.data()[b * total + start..b * total + start + per]);
                        }
                        self.acc(grads, p, Tensor::new(self.value(p).shape(), d));
                    }
                    start += per;
                }
            }
            Op::Linear(x, w, b) => {
                let (n, i_dim) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[n, i_dim]);
                    T::gemm(n, o, i_dim, g.data(), (o as isize, 1), self.value(*w).data(), (i_dim as isize, 1), dx.data_mut(), (i_dim as isize, 1), false);
                    self.acc(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&[o, i_dim]);
                    T::gemm(o, n, i_dim, g.data(), (1, o as isize), self.value(*x).data(), (i_dim as isize, 1), dw.data_mut(), (i_dim as isize, 1), false);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &u) in db.iter_mut().zip(row) {
                                *d += u;
                            }
                        }
                        self.acc(grads, *b, Tensor::new(self.value(*b).shape(), db));
                    }
                }
            }
            Op::Conv(x, w, b, geom) => self.conv_backward(g, *x, *w, *b, geom, grads),
            Op::DeformConv(x, off, w, b, geom) => self.deform_backward(g, *x, *off, *w, *b, geom, grads),
            Op::InstanceNorm(x, inv_std) => {
                let (_, _, h, w) = out.dims4();
                let m = T::cst((h * w) as f64);
                let mut d = Vec::with_capacity(out.numel());
                for ((gp, yp), &r) in g.data().chunks(h * w).zip(out.data().chunks(h * w)).zip(inv_std) {
                    let mg = gp.iter().copied().sum::<T>() / m;
                    let mgy = gp.iter().zip(yp).map(|(&u, &y)| u * y).sum::<T>() / m;
                    d.extend(gp.iter().zip(yp).map(|(&u, &y)| r * (u - mg - y * mgy)));
                }
                self.acc(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::Stats(x) => {
                let t = self.value(*x);
                let n = t.shape()[0];
                let per = t.numel() / n;
                let mut d = Vec::with_capacity(t.numel());
                for (b, item) in t.data().chunks(per).enumerate() {
                    let s = describe(item);
                    let gd = &g.data()[4 * b..4 * b + 4];
                    let m = T::cst(per as f64);
                    let mean = T::cst(s[0]);
                    let std = T::cst(s[1]);
                    let argmax = first_argmax(item);
                    for (j, &v) in item.iter().enumerate() {
                        let mut acc = gd[0] / m;
                        if std > T::zero() {
                            acc += gd[1] * (v - mean) / (m * std);
                        }
                        let sign = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        acc += gd[2] * sign / m;
                        if j == argmax {
                            acc += gd[3];
                        }
                        d.push(acc);
                    }
                }
                self.acc(grads, *x, Tensor::new(t.shape(), d));
            }
            Op::Resize(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.acc(grads, *x, resize_backward(g, h, w));
            }
            Op::Affine(x, maps) => self.acc(grads, *x, affine_backward(g, maps)),
            Op::GaussianValid(x, k) => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.acc(grads, *x, sep_filter_valid_adjoint(g, k, h, w));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let u = g.data()[0] / T::cst(t.numel() as f64);
                self.acc(grads, *x, Tensor::full(t.shape(), u));
            }
            Op::Bce(p, target, eps) => {
                let pv = self.value(*p);
                let m = T::cst(target.len() as f64);
                let u = g.data()[0] / m;
                let hi = T::one() - *eps;
                let d: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| {
                        if q < *eps || q > hi {
                            T::zero()
                        } else {
                            u * (-t / q + (T::one() - t) / (T::one() - q))
                        }
                    })
                    .collect();
                self.acc(grads, *p, Tensor::new(pv.shape(), d));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = T::cst(2.0) * g.data()[0] / T::cst(av.numel() as f64);
                let d = zip_map(av, bv, |x, y| k * (x - y));
                if self.rg(*b) {
                    self.acc(grads, *b, d.map(|v| -v));
                }
                self.acc(grads, *a, d);
            }
        }
    }

    fn conv_backward(&self, g: &Tensor<T>, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, grads: &mut [Option<Tensor<T>>]) {
        let (n, c, h, wd) = self.value(x).dims4();
        let (_, co, oh, ow) = g.dims4();
        let ohw = oh * ow;
        let kdim = c * geom.kernel * geom.kernel;
        let plane = Plane { c, h, w: wd };
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut dx = if need_x { Some(Tensor::zeros(&[n, c, h, wd])) } else { None };
        let mut dw = if need_w { Some(Tensor::zeros(&[co, c, geom.kernel, geom.kernel])) } else { None };
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kdim * ohw] };
        let mut dcols = if pointwise || !need_x { Vec::new() } else { vec![T::zero(); kdim * ohw] };
        for bi in 0..n {
            let gy = &g.data()[bi * co * ohw..(bi + 1) * co * ohw];
            let xs = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, &plane, geom, oh, ow, &mut cols);
                    &cols
                };
                T::gemm(co, ohw, kdim, gy, (ohw as isize, 1), src, (1, ohw as isize), dw.data_mut(), (kdim as isize, 1), true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd];
                if pointwise {
                    T::gemm(kdim, co, ohw, wdata, (1, kdim as isize), gy, (ohw as isize, 1), dxs, (ohw as isize, 1), false);
                } else {
                    T::gemm(kdim, co, ohw, wdata, (1, kdim as isize), gy, (ohw as isize, 1), &mut dcols, (ohw as isize, 1), false);
                    col2im(&dcols, &plane, geom, oh, ow, dxs);
                }
            }
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![T::zero(); co];
                for (j, chunk) in g.data().chunks(ohw).enumerate() {
                    db[j % co] += chunk.iter().copied().sum::<T>();
                }
                self.acc(grads, b, Tensor::new(self.value(b).shape(), db));
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        off: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, wd) = self.value(x).dims4();
        let (_, co, oh, ow) = g.dims4();
        let ohw = oh * ow;
        let taps = geom.kernel * geom.kernel;
        let kdim = c * taps;
        let plane = Plane { c, h, w: wd };
        let xd = self.value(x).data();
        let od = self.value(off).data();
        let wdata = self.value(w).data();
        let mut dx = self.rg(x).then(|| Tensor::zeros(&[n, c, h, wd]));
        let mut doff = self.rg(off).then(|| Tensor::zeros(self.value(off).shape()));
        let mut dw = self.rg(w).then(|| Tensor::zeros(self.value(w).shape()));
        let mut cols = vec![T::zero(); kdim * ohw];
        let mut dcols = vec![T::zero(); kdim * ohw];
        for bi in 0..n {
            let gy = &g.data()[bi * co * ohw..(bi + 1) * co * ohw];
            let xs = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
            let os = &od[bi * 2 * taps * ohw..(bi + 1) * 2 * taps * ohw];
            if let Some(dw) = dw.as_mut() {
                deform_im2col(xs, os, &plane, geom, oh, ow, &mut cols);
                T::gemm(co, ohw, kdim, gy, (ohw as isize, 1), &cols, (1, ohw as isize), dw.data_mut(), (kdim as isize, 1), true);
            }
            if dx.is_some() || doff.is_some() {
                T::gemm(kdim, co, ohw, wdata, (1, kdim as isize), gy, (ohw as isize, 1), &mut dcols, (ohw as isize, 1), false);
                let dxs = dx.as_mut().map(|t| &mut t.data_mut()[bi * c * h * wd..(bi + 1) * c * h * wd]);
                let dos = doff.as_mut().map(|t| &mut t.data_mut()[bi * 2 * taps * ohw..(bi + 1) * 2 * taps * ohw]);
                deform_col2im(&dcols, xs, os, &plane, geom, oh, ow, dxs, dos);
            }
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![T::zero(); co];
                for (j, chunk) in g.data().chunks(ohw).enumerate() {
                    db[j % co] += chunk.iter().copied().sum::<T>();
                }
                self.acc(grads, b, Tensor::new(self.value(b).shape(), db));
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(doff) = doff {
            self.acc(grads, off, doff);
        }
    }
}

/// `(mean, population std, mean |x|, max)` accumulated in `f64`.
pub(crate) fn describe<T: Real>(xs: &[T]) -> [f64; 4] {
    let m = xs.len() as f64;
    let mut sum = 0.0;
    let mut abs = 0.0;
    let mut max = f64::NEG_INFINITY;
    for v in xs {
        let v = v.to_f64().unwrap();
        sum += v;
        abs += v.abs();
        max = max.max(v);
    }
    let mean = sum / m;
    let var = xs
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / m;
    [mean, var.sqrt(), abs / m, max]
}

fn first_argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sep_filter_valid<T: Real>(x: &Tensor<T>, k: &[T]) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ks = k.len();
    assert!(h >= ks && w >= ks, "filter larger than image");
    let (oh, ow) = (h - ks + 1, w - ks + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut tmp = vec![T::zero(); h * ow];
    for plane in x.data().chunks(h * w) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for xo in 0..ow {
                tmp[y * ow + xo] = k.iter().zip(&row[xo..xo + ks]).map(|(&a, &b)| a * b).sum();
            }
        }
        for yo in 0..oh {
            for xo in 0..ow {
                out.push(k.iter().enumerate().map(|(u, &a)| a * tmp[(yo + u) * ow + xo]).sum());
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn sep_filter_valid_adjoint<T: Real>(g: &Tensor<T>, k: &[T], h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = g.dims4();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for (plane, gp) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for yo in 0..oh {
            for xo in 0..ow {
                let u = gp[yo * ow + xo];
                for (j, &a) in k.iter().enumerate() {
                    tmp[(yo + j) * ow + xo] += a * u;
                }
            }
        }
        for y in 0..h {
            for xo in 0..ow {
                let u = tmp[y * ow + xo];
                for (j, &a) in k.iter().enumerate() {
                    plane[y * w + xo + j] += a * u;
                }
            }
        }
    }
    dx
}
