use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::nn::graph::{GatherMap, Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::spatial;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[din, dout], din, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([dout]));
        Self { w, b: Some(b) }
    }

    /// Zero weights and bias: the layer outputs exactly zero until trained.
    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([din, dout]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([dout]));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full([dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        let y = g.mul_bias(n, gain)?;
        g.add_bias(y, bias)
    }
}

/// Same-padded `k×k` convolution on channels-last `[B, h, w, c]` tensors.
#[derive(Clone, Debug)]
pub struct Conv {
    map: Arc<GatherMap>,
    pub lin: Linear,
    h: usize,
    w: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let map = Arc::new(spatial::im2col(h, w, cin, k));
        let lin = Linear::new(store, name, k * k * cin, cout, rng);
        Self { map, lin, h, w }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.gather(x, &self.map)?;
        let y = self.lin.forward(g, cols)?;
        let batch = g.shape(y)[0];
        let cout = g.value(y).last_dim();
        g.reshape(y, &[batch, self.h, self.w, cout])
    }
}
