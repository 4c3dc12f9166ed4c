//! Named convolution and dense layers shared by both networks.

use crate::params::{init, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ConvGeom, Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl Conv {
    pub fn new(name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        Self {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
            cin,
            cout,
            geom,
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.geom.kernel, self.geom.kernel]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        let fan_in = self.cin * self.geom.kernel * self.geom.kernel;
        store.insert(&self.weight, init::he_uniform(rng, &self.weight_shape(), fan_in, 1.0));
        store.insert(&self.bias, Tensor::zeros(&[self.cout]));
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(&self.weight, Tensor::zeros(&self.weight_shape()));
        store.insert(&self.bias, Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.conv2d(x, w, Some(b), self.geom)
    }

    pub fn forward_silu<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.forward(g, x);
        g.silu(y)
    }
}

/// Convolution whose taps are displaced by offsets predicted from the input
/// with a plain 3×3 convolution. The predictor starts at zero so the layer
/// begins as an ordinary convolution.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub conv: Conv,
    pub offsets: Conv,
}

impl DeformConv {
    pub fn new(name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let taps = geom.kernel * geom.kernel;
        Self {
            conv: Conv::new(name, cin, cout, geom),
            offsets: Conv::new(&format!("{name}.offset"), cin, 2 * taps, ConvGeom::same3()),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        self.conv.init(store, rng);
        self.offsets.init_zero(store);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let off = self.offsets.forward(g, x);
        let (w, b) = (g.param(&self.conv.weight), g.param(&self.conv.bias));
        g.deform_conv2d(x, off, w, Some(b), self.conv.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn new(name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
            din,
            dout,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng, gain: f64) {
        store.insert(&self.weight, init::he_uniform(rng, &[self.dout, self.din], self.din, gain));
        store.insert(&self.bias, Tensor::zeros(&[self.dout]));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (w, b) = (g.param(&self.weight), g.param(&self.bias));
        g.linear(x, w, Some(b))
    }
}
