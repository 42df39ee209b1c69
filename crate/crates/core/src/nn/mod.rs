//! A small tape-based autodiff engine with the layers the models need.

pub mod check;
mod graph;
mod layers;
mod optim;
mod params;
pub mod spatial;

pub use graph::{GatherMap, Gradients, Graph, Var};
pub use layers::{Conv, LayerNorm, Linear};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore};

/// Sinusoidal embedding of a (possibly fractional) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
