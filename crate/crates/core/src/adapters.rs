//! Post-denoising residual calibration of predicted latents.
//!
//! Each modality has a pointwise two-layer adapter whose output is added to
//! the predicted latent before decoding. The last layer starts at zero, so a
//! fresh adapter is an exact identity. Adapters read the predicted latent
//! through a stop-gradient: the calibration loss trains the adapters only.

use serde::{Deserialize, Serialize};

use crate::codecs::{split_latents, CodecSet, Modality};
use crate::corpus::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ResidualAdapter {
    pub modality: Modality,
    pub channels: usize,
    fc1: Linear,
    fc2: Linear,
}

impl ResidualAdapter {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let name = format!("adapter.{modality}");
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng);
        let fc2 = Linear::zeros(store, &format!("{name}.fc2"), hidden, channels);
        Self { modality, channels, fc1, fc2 }
    }

    pub fn param_ids(&self) -> Vec<crate::nn::ParamId> {
        [self.fc1.w, self.fc2.w].into_iter().chain(self.fc1.b).chain(self.fc2.b).collect()
    }

    /// The bias of the last layer; a constant residual when the weights are zero.
    pub fn output_bias(&self) -> crate::nn::ParamId {
        self.fc2.b.expect("adapter layers carry a bias")
    }

    /// `A(z)` for channels-last `z`.
    pub fn residual(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let c = g.value(z).last_dim();
        if c != self.channels {
            return Err(Error::Shape(format!("{} adapter expects {} channels, got {c}", self.modality, self.channels)));
        }
        let h = self.fc1.forward(g, z)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    /// `z + A(z)`.
    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let r = self.residual(g, z)?;
        g.add(z, r)
    }
}

/// One adapter per modality.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub vis: ResidualAdapter,
    pub ir: ResidualAdapter,
    pub label: ResidualAdapter,
}

impl AdapterSet {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            vis: ResidualAdapter::new(store, Modality::Vis, channels, hidden, rng),
            ir: ResidualAdapter::new(store, Modality::Ir, channels, hidden, rng),
            label: ResidualAdapter::new(store, Modality::Label, channels, hidden, rng),
        }
    }

    pub fn get(&self, m: Modality) -> &ResidualAdapter {
        match m {
            Modality::Vis => &self.vis,
            Modality::Ir => &self.ir,
            Modality::Label => &self.label,
        }
    }

    pub fn param_ids(&self) -> Vec<crate::nn::ParamId> {
        Modality::ALL.iter().flat_map(|&m| self.get(m).param_ids()).collect()
    }

    /// Binds the adapters to the store holding their parameters.
    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundAdapters<'a> {
        BoundAdapters { store, set: self }
    }
}

/// Applies `ẑ + A(ẑ)` to a batch of one modality's latents.
pub trait Calibrate {
    fn calibrate(&self, modality: Modality, z_hat: &Tensor) -> Result<Tensor>;
}

pub struct BoundAdapters<'a> {
    pub store: &'a ParamStore,
    pub set: &'a AdapterSet,
}

impl Calibrate for BoundAdapters<'_> {
    fn calibrate(&self, modality: Modality, z_hat: &Tensor) -> Result<Tensor> {
        calibrate(self.store, self.set.get(modality), modality, z_hat)
    }
}

/// `z̃ = ẑ + A(ẑ)` with a check that the adapter belongs to `modality`.
pub fn calibrate(store: &ParamStore, adapter: &ResidualAdapter, modality: Modality, z_hat: &Tensor) -> Result<Tensor> {
    if adapter.modality != modality {
        return Err(Error::config(format!("{} adapter applied to a {modality} latent", adapter.modality)));
    }
    let mut g = Graph::new(store);
    let z = g.input(z_hat.clone());
    let y = adapter.forward(&mut g, z)?;
    Ok(g.value(y).clone())
}

/// Adds `mean_b Σ_m ‖sg(ẑ_m) + A_m(sg(ẑ_m)) − z_m‖²` to `g`. `z_hat` and `z`
/// are concatenated `[B, h, w, 3c]` latents; `z_hat` is detached here.
pub fn calib_loss(g: &mut Graph, adapters: &AdapterSet, z_hat: Var, z: &Tensor) -> Result<Var> {
    let shape = g.shape(z_hat).to_vec();
    if shape != z.shape() || shape.len() != 4 || shape[3] % 3 != 0 {
        return Err(Error::Shape(format!(
            "calibration needs matching [B, h, w, 3c] latents, got {shape:?} and {:?}",
            z.shape()
        )));
    }
    let c = shape[3] / 3;
    let frozen = g.detach(z_hat);
    let target = g.constant(z.clone());
    let mut total: Option<Var> = None;
    for m in Modality::ALL {
        let zh = g.narrow(frozen, 3, m.slot() * c, c)?;
        let zt = g.narrow(target, 3, m.slot() * c, c)?;
        let cal = adapters.get(m).forward(g, zh)?;
        let term = crate::diffusion::batch_sq_error(g, cal, zt)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three modalities"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedLoss {
    pub loss_denoise: f64,
    pub loss_calib: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn combined_loss(loss_denoise: f64, loss_calib: f64, lambda: f64) -> Result<CombinedLoss> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    Ok(CombinedLoss { loss_denoise, loss_calib, lambda, total: loss_denoise + lambda * loss_calib })
}

/// A decoded triplet without prompt metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTriplet {
    pub vis: Image,
    pub ir: Image,
    pub label: LabelMap,
}

/// Splits `[B, h, w, 3c]` latents, calibrates each modality once and decodes.
pub fn decode_triplet(adapters: &dyn Calibrate, codecs: &CodecSet, z0_hat: &Tensor) -> Result<Vec<DecodedTriplet>> {
    let (zv, zi, zl) = split_latents(z0_hat)?;
    let zv = adapters.calibrate(Modality::Vis, &zv)?;
    let zi = adapters.calibrate(Modality::Ir, &zi)?;
    let zl = adapters.calibrate(Modality::Label, &zl)?;
    let vis = codecs.vis.decode_images(&zv)?;
    let ir = codecs.ir.decode_images(&zi)?;
    let label = codecs.label.decode_labels(&zl)?;
    Ok(vis
        .into_iter()
        .zip(ir)
        .zip(label)
        .map(|((vis, ir), label)| DecodedTriplet { vis, ir, label })
        .collect())
}

/// Identity calibration, i.e. decoding without adapters.
pub struct NoCalibration;

impl Calibrate for NoCalibration {
    fn calibrate(&self, _: Modality, z_hat: &Tensor) -> Result<Tensor> {
        Ok(z_hat.clone())
    }
}
