//! Per-modality latent codecs.
//!
//! Each codec folds `2^d × 2^d` pixel blocks into channels, mixes them with a
//! small convolutional network and projects to `c` latent channels. Decoders
//! mirror the encoder. The three codecs share an architecture and latent
//! geometry but never weights. Latents are standardized per channel with
//! statistics gathered on the training set, so the diffusion model sees
//! roughly unit-scale inputs.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Image, LabelMap, Triplet};
use crate::error::{Error, Result};
use crate::nn::{spatial, AdamW, Conv, GatherMap, Graph, Linear, ParamStore, Var};
use crate::tensor::Tensor;
use crate::util::{json_digest, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vis,
    Ir,
    Label,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vis, Modality::Ir, Modality::Label];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir => "ir",
            Modality::Label => "label",
        }
    }

    /// Position of this modality's slice in a concatenated triplet latent.
    pub fn slot(self) -> usize {
        match self {
            Modality::Vis => 0,
            Modality::Ir => 1,
            Modality::Label => 2,
        }
    }

    /// Input (and output) channels: RGB, intensity, or one-hot classes.
    pub fn channels(self, n_classes: usize) -> usize {
        match self {
            Modality::Vis => 3,
            Modality::Ir => 1,
            Modality::Label => n_classes + 1,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    /// Number of 2× downsamplings between image and latent.
    pub depth: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// Variational mode: the encoder also predicts a log-variance and training
    /// adds a KL penalty. Inference always uses the mean.
    pub vae: bool,
    pub kl_weight: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            depth: 3,
            latent_channels: 4,
            hidden: 64,
            n_classes: 5,
            vae: false,
            kl_weight: 1e-4,
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            seed: 11,
        }
    }
}

impl CodecConfig {
    pub fn factor(&self) -> usize {
        1 << self.depth
    }

    /// `(h, w, c)` of one modality's latent.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let f = self.factor();
        (self.height / f, self.width / f, self.latent_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if self.height % f != 0 || self.width % f != 0 || self.height < f || self.width < f {
            return Err(Error::config(format!(
                "image size {}x{} is not a multiple of the codec factor {f}",
                self.height, self.width
            )));
        }
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::config("codec channel counts must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("codec training needs positive steps, batch size and learning rate"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::config("KL weight must be non-negative"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_digest(self)
    }
}

/// Model input of one modality: channels-last `[H, W, C]` values.
pub fn modality_input(t: &Triplet, modality: Modality, n_classes: usize) -> Result<Vec<f64>> {
    match modality {
        Modality::Vis => check_image(&t.vis, 3).map(|_| t.vis.data.clone()),
        Modality::Ir => check_image(&t.ir, 1).map(|_| t.ir.data.clone()),
        Modality::Label => one_hot(&t.label, n_classes),
    }
}

fn check_image(img: &Image, channels: usize) -> Result<()> {
    if img.channels != channels || img.data.len() != img.height * img.width * channels {
        return Err(Error::Shape(format!(
            "expected a {channels}-channel image, got {} channels and {} values for {}x{}",
            img.channels,
            img.data.len(),
            img.height,
            img.width
        )));
    }
    Ok(())
}

pub fn one_hot(label: &LabelMap, n_classes: usize) -> Result<Vec<f64>> {
    let c = n_classes + 1;
    let mut out = vec![0.0; label.data.len() * c];
    for (i, &v) in label.data.iter().enumerate() {
        if v as usize >= c {
            return Err(Error::data(format!("class id {v} outside 0..={n_classes}")));
        }
        out[i * c + v as usize] = 1.0;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct CodecNet {
    s2d: Arc<GatherMap>,
    enc_in: Linear,
    enc_conv: Conv,
    enc_mu: Linear,
    enc_logvar: Option<Linear>,
    dec_in: Linear,
    dec_conv1: Conv,
    dec_conv2: Conv,
    dec_out: Linear,
    d2s: Arc<GatherMap>,
}

impl CodecNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &CodecConfig, cin: usize, rng: &mut R) -> Self {
        let f = cfg.factor();
        let (h, w, c) = cfg.latent_shape();
        let hid = cfg.hidden;
        Self {
            s2d: Arc::new(spatial::space_to_depth(cfg.height, cfg.width, cin, f)),
            enc_in: Linear::new(store, "enc.in", f * f * cin, hid, rng),
            enc_conv: Conv::new(store, "enc.conv", h, w, hid, hid, 3, rng),
            enc_mu: Linear::new(store, "enc.mu", hid, c, rng),
            enc_logvar: cfg.vae.then(|| Linear::zeros(store, "enc.logvar", hid, c)),
            dec_in: Linear::new(store, "dec.in", c, hid, rng),
            dec_conv1: Conv::new(store, "dec.conv1", h, w, hid, hid, 3, rng),
            dec_conv2: Conv::new(store, "dec.conv2", h, w, hid, hid, 3, rng),
            dec_out: Linear::new(store, "dec.out", hid, f * f * cin, rng),
            d2s: Arc::new(spatial::depth_to_space(h, w, cin, f)),
        }
    }

    /// `x: [B, H, W, Cin]` → `(mu, logvar)`, each `[B, h, w, c]`.
    fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        let y = g.gather(x, &self.s2d)?;
        let y = self.enc_in.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.enc_conv.forward(g, y)?;
        let y = g.gelu(y);
        let mu = self.enc_mu.forward(g, y)?;
        let logvar = match &self.enc_logvar {
            Some(l) => Some(l.forward(g, y)?),
            None => None,
        };
        Ok((mu, logvar))
    }

    /// `z: [B, h, w, c]` → `[B, H, W, Cout]` (unclipped).
    fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let y = self.dec_in.forward(g, z)?;
        let y = g.gelu(y);
        let y = self.dec_conv1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.dec_conv2.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.dec_out.forward(g, y)?;
        g.gather(y, &self.d2s)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityCodec {
    pub modality: Modality,
    pub config: CodecConfig,
    store: ParamStore,
    net: CodecNet,
    /// Per-channel latent mean and standard deviation over the training set.
    shift: Vec<f64>,
    scale: Vec<f64>,
}

const INFER_CHUNK: usize = 64;

impl ModalityCodec {
    /// A freshly initialized codec with identity latent standardization.
    pub fn new(modality: Modality, config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = CodecNet::new(&mut store, &config, modality.channels(config.n_classes), &mut rng(seed));
        let c = config.latent_channels;
        Ok(Self { modality, config, store, net, shift: vec![0.0; c], scale: vec![1.0; c] })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.config.latent_shape()
    }

    pub fn out_channels(&self) -> usize {
        self.modality.channels(self.config.n_classes)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars(&self.store.ids())
    }

    fn input_batch(&self, triplets: &[&Triplet]) -> Result<Tensor> {
        let (hh, ww) = (self.config.height, self.config.width);
        let cin = self.out_channels();
        let mut data = Vec::with_capacity(triplets.len() * hh * ww * cin);
        for t in triplets {
            if t.height() != hh || t.width() != ww {
                return Err(Error::Shape(format!(
                    "{} codec expects {hh}x{ww} inputs, got {}x{}",
                    self.modality,
                    t.height(),
                    t.width()
                )));
            }
            data.extend(modality_input(t, self.modality, self.config.n_classes)?);
        }
        Tensor::new([triplets.len(), hh, ww, cin], data)
    }

    fn standardize(&self, raw: &Tensor) -> Tensor {
        let c = self.config.latent_channels;
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.shift[i % c]) / self.scale[i % c];
        }
        out
    }

    fn destandardize(&self, z: &Tensor) -> Tensor {
        let c = self.config.latent_channels;
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % c] + self.shift[i % c];
        }
        out
    }

    fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let (mu, _) = self.net.encode(&mut g, xv)?;
        Ok(g.value(mu).clone())
    }

    /// Deterministic (posterior-mean) latents `[B, h, w, c]` of this
    /// modality's slice of each triplet.
    pub fn encode_triplets(&self, triplets: &[&Triplet]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in triplets.chunks(INFER_CHUNK) {
            let x = self.input_batch(chunk)?;
            parts.push(self.standardize(&self.encode_raw(&x)?));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Latent `[h, w, c]` of one triplet.
    pub fn encode(&self, t: &Triplet) -> Result<Tensor> {
        let (h, w, c) = self.latent_shape();
        self.encode_triplets(&[t])?.reshape([h, w, c])
    }

    /// Reparameterized sample `mu + exp(logvar / 2) · n` (training only). In
    /// deterministic mode this equals [`Self::encode_triplets`].
    pub fn encode_stochastic<R: Rng + ?Sized>(&self, triplets: &[&Triplet], rng: &mut R) -> Result<Tensor> {
        let x = self.input_batch(triplets)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x);
        let (mu, logvar) = self.net.encode(&mut g, xv)?;
        let mut raw = g.value(mu).clone();
        if let Some(lv) = logvar {
            let noise = Tensor::randn(raw.shape().to_vec(), 1.0, rng);
            for ((z, l), n) in raw.data_mut().iter_mut().zip(g.value(lv).data()).zip(noise.data()) {
                *z += (0.5 * l).exp() * n;
            }
        }
        Ok(self.standardize(&raw))
    }

    fn check_latent(&self, z: &Tensor) -> Result<usize> {
        let (h, w, c) = self.latent_shape();
        let s = z.shape();
        let ok = match s.len() {
            3 => s == [h, w, c],
            4 => s[1..] == [h, w, c],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!("{} codec expects latents of shape {:?}, got {s:?}", self.modality, (h, w, c))));
        }
        Ok(if s.len() == 3 { 1 } else { s[0] })
    }

    /// Decodes `[B, h, w, c]` (or `[h, w, c]`) latents to `[B, H, W, C]`:
    /// values clipped to `[0, 1]` for images, raw logits for labels.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let b = self.check_latent(z)?;
        let (h, w, c) = self.latent_shape();
        let z = z.clone().reshape([b, h, w, c])?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < b {
            let n = INFER_CHUNK.min(b - start);
            let chunk = self.destandardize(&z.narrow(0, start, n)?);
            let mut g = Graph::new(&self.store);
            let zv = g.input(chunk);
            let y = self.net.decode(&mut g, zv)?;
            let y = g.value(y).clone();
            parts.push(match self.modality {
                Modality::Label => y,
                _ => y.map(|v| v.clamp(0.0, 1.0)),
            });
            start += n;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let out = Tensor::concat(&refs, 0)?;
        out.reshape([b, self.config.height, self.config.width, self.out_channels()])
    }

    pub fn decode_images(&self, z: &Tensor) -> Result<Vec<Image>> {
        if self.modality == Modality::Label {
            return Err(Error::config("the label codec decodes to logits, not images"));
        }
        let y = self.decode(z)?;
        let (hh, ww, c) = (self.config.height, self.config.width, self.out_channels());
        Ok(y.data()
            .chunks(hh * ww * c)
            .map(|d| Image { height: hh, width: ww, channels: c, data: d.to_vec() })
            .collect())
    }

    pub fn decode_labels(&self, z: &Tensor) -> Result<Vec<LabelMap>> {
        if self.modality != Modality::Label {
            return Err(Error::config(format!("the {} codec does not decode labels", self.modality)));
        }
        argmax_label(&self.decode(z)?)
    }

    /// Mean reconstruction error on `triplets`: squared error per value for
    /// images, per-pixel misclassification rate for labels.
    pub fn reconstruction_error(&self, triplets: &[&Triplet]) -> Result<f64> {
        let z = self.encode_triplets(triplets)?;
        match self.modality {
            Modality::Label => {
                let labels = self.decode_labels(&z)?;
                let (mut wrong, mut total) = (0usize, 0usize);
                for (l, t) in labels.iter().zip(triplets) {
                    wrong += l.data.iter().zip(&t.label.data).filter(|(a, b)| a != b).count();
                    total += l.data.len();
                }
                Ok(wrong as f64 / total as f64)
            }
            _ => {
                let y = self.decode(&z)?;
                let x = self.input_batch(triplets)?;
                Ok(y.sub(&x)?.sq_norm() / x.len() as f64)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "codec",
            "modality": self.modality,
            "config": self.config,
            "config_hash": self.config.hash(),
        });
        let c = self.config.latent_channels;
        let shift = Tensor::new([c], self.shift.clone())?;
        let scale = Tensor::new([c], self.scale.clone())?;
        let stats = [(LATENT_SHIFT, &shift), (LATENT_SCALE, &scale)];
        checkpoint::save(path, meta, self.store.named().chain(stats))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let bad = |what: &str| Error::data(format!("{}: codec checkpoint {what}", path.display()));
        if loaded.meta["kind"] != "codec" {
            return Err(bad("is not a codec checkpoint"));
        }
        let modality: Modality = serde_json::from_value(loaded.meta["modality"].clone()).map_err(|_| bad("has no modality"))?;
        let config: CodecConfig = serde_json::from_value(loaded.meta["config"].clone()).map_err(|_| bad("has no config"))?;
        let mut codec = Self::new(modality, config, 0)?;
        let (stats, params): (Vec<_>, Vec<_>) =
            loaded.tensors.into_iter().partition(|(n, _)| n == LATENT_SHIFT || n == LATENT_SCALE);
        let c = codec.config.latent_channels;
        for (name, t) in stats {
            if t.len() != c {
                return Err(bad("has latent statistics of the wrong length"));
            }
            if name == LATENT_SHIFT {
                codec.shift = t.into_data();
            } else {
                codec.scale = t.into_data();
            }
        }
        codec.store.load_from(&params)?;
        Ok(codec)
    }
}

const LATENT_SHIFT: &str = "latent.shift";
const LATENT_SCALE: &str = "latent.scale";

/// Per-pixel argmax of `[B, H, W, C]` logits.
pub fn argmax_label(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [B, H, W, C] logits, got {s:?}")));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    Ok(logits
        .data()
        .chunks(h * w * c)
        .map(|item| LabelMap {
            height: h,
            width: w,
            data: item
                .chunks(c)
                .map(|px| {
                    let mut best = 0;
                    for k in 1..c {
                        if px[k] > px[best] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect(),
        })
        .collect())
}

/// Channel-wise concatenation `[z_V; z_I; z_L]` of equally shaped latents.
pub fn concat_latents(z_v: &Tensor, z_i: &Tensor, z_l: &Tensor) -> Result<Tensor> {
    if z_v.shape() != z_i.shape() || z_v.shape() != z_l.shape() {
        return Err(Error::Shape(format!(
            "latent shapes differ: {:?}, {:?}, {:?}",
            z_v.shape(),
            z_i.shape(),
            z_l.shape()
        )));
    }
    let axis = z_v.shape().len().checked_sub(1).ok_or_else(|| Error::Shape("scalar latent".into()))?;
    Tensor::concat(&[z_v, z_i, z_l], axis)
}

/// Inverse of [`concat_latents`].
pub fn split_latents(z: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let axis = z.shape().len().checked_sub(1).ok_or_else(|| Error::Shape("scalar latent".into()))?;
    let total = z.shape()[axis];
    if total % 3 != 0 {
        return Err(Error::Shape(format!("{total} latent channels do not split into three modalities")));
    }
    let c = total / 3;
    Ok((z.narrow(axis, 0, c)?, z.narrow(axis, c, c)?, z.narrow(axis, 2 * c, c)?))
}

/// Losses recorded while training one codec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub modality: Option<Modality>,
    /// Mean training loss over each pass's worth of steps.
    pub epoch_losses: Vec<f64>,
    /// Mean KL penalty per pass (variational mode only).
    pub epoch_kl: Vec<f64>,
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains one modality codec on `triplets` and fits its latent standardization.
pub fn train_codec(modality: Modality, triplets: &[Triplet], config: &CodecConfig) -> Result<(ModalityCodec, TrainCurve)> {
    if triplets.is_empty() {
        return Err(Error::data("codec training needs at least one triplet"));
    }
    let seed = crate::util::derive_seed(config.seed, modality.slot() as u64);
    let mut codec = ModalityCodec::new(modality, config.clone(), seed)?;
    let mut rng = rng(crate::util::derive_seed(seed, 1));
    let mut opt = AdamW::new(config.lr);
    let ids = codec.store.ids();
    let steps_per_epoch = triplets.len().div_ceil(config.batch_size).max(1);
    let mut curve = TrainCurve { modality: Some(modality), ..Default::default() };
    let (mut acc, mut acc_kl, mut acc_n) = (0.0, 0.0, 0usize);
    for step in 0..config.steps {
        let batch: Vec<&Triplet> =
            (0..config.batch_size).map(|_| &triplets[rng.random_range(0..triplets.len())]).collect();
        let x = codec.input_batch(&batch)?;
        let targets = match modality {
            Modality::Label => Some(Arc::new(
                batch.iter().flat_map(|t| t.label.data.iter().map(|&v| v as usize)).collect::<Vec<_>>(),
            )),
            _ => None,
        };
        let noise = config.vae.then(|| {
            let (h, w, c) = config.latent_shape();
            Tensor::randn([batch.len(), h, w, c], 1.0, &mut rng)
        });
        let (loss_value, kl_value, grads) = {
            let mut g = Graph::new(&codec.store);
            let xv = g.input(x.clone());
            let (mu, logvar) = codec.net.encode(&mut g, xv)?;
            let (z, kl) = match (logvar, noise) {
                (Some(lv), Some(n)) => {
                    let half = g.scale(lv, 0.5);
                    let std = g.exp(half);
                    let nv = g.constant(n);
                    let e = g.mul(std, nv)?;
                    let z = g.add(mu, e)?;
                    // KL(N(mu, s^2) || N(0, 1)) per element: (mu^2 + s^2 - 1 - log s^2) / 2
                    let m2 = g.square(mu);
                    let var = g.exp(lv);
                    let t = g.add(m2, var)?;
                    let t = g.sub(t, lv)?;
                    let kl = g.mean(t);
                    let kl = g.scale(kl, 0.5);
                    // The constant -1/2 does not affect gradients and is added back when reporting.
                    (z, Some(kl))
                }
                _ => (mu, None),
            };
            let y = codec.net.decode(&mut g, z)?;
            let rec = match &targets {
                Some(t) => {
                    let c = codec.out_channels();
                    let n = g.value(y).len() / c;
                    let flat = g.reshape(y, &[n, c])?;
                    g.cross_entropy(flat, Arc::clone(t))?
                }
                None => {
                    let xt = g.constant(x);
                    let d = g.sub(y, xt)?;
                    let d = g.square(d);
                    g.mean(d)
                }
            };
            let (loss, kl_value) = match kl {
                Some(kl) => {
                    let kv = g.value(kl).item() - 0.5;
                    let w = g.scale(kl, config.kl_weight);
                    (g.add(rec, w)?, kv)
                }
                None => (rec, 0.0),
            };
            (g.value(rec).item(), kl_value, g.backward(loss)?)
        };
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "{modality} codec loss became {loss_value} at step {step} (last epoch mean {:?})",
                curve.epoch_losses.last()
            )));
        }
        opt.lr = cosine_lr(config.lr, step, config.steps);
        opt.step(&mut codec.store, &grads, &ids);
        acc += loss_value;
        acc_kl += kl_value;
        acc_n += 1;
        if acc_n == steps_per_epoch || step + 1 == config.steps {
            curve.epoch_losses.push(acc / acc_n as f64);
            if config.vae {
                curve.epoch_kl.push(acc_kl / acc_n as f64);
            }
            (acc, acc_kl, acc_n) = (0.0, 0.0, 0);
        }
    }
    fit_standardization(&mut codec, triplets)?;
    Ok((codec, curve))
}

fn fit_standardization(codec: &mut ModalityCodec, triplets: &[Triplet]) -> Result<()> {
    let c = codec.config.latent_channels;
    let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
    for chunk in triplets.chunks(INFER_CHUNK) {
        let refs: Vec<&Triplet> = chunk.iter().collect();
        let raw = codec.encode_raw(&codec.input_batch(&refs)?)?;
        for (i, v) in raw.data().iter().enumerate() {
            sum[i % c] += v;
            sq[i % c] += v * v;
        }
        n += raw.len() / c;
    }
    for k in 0..c {
        let mean = sum[k] / n as f64;
        let var = (sq[k] / n as f64 - mean * mean).max(0.0);
        codec.shift[k] = mean;
        codec.scale[k] = var.sqrt().max(1e-6);
    }
    Ok(())
}

/// The three codecs of a triplet, with a shared latent geometry.
#[derive(Clone, Debug)]
pub struct CodecSet {
    pub vis: ModalityCodec,
    pub ir: ModalityCodec,
    pub label: ModalityCodec,
}

impl CodecSet {
    pub fn new(vis: ModalityCodec, ir: ModalityCodec, label: ModalityCodec) -> Result<Self> {
        let expect = [(Modality::Vis, &vis), (Modality::Ir, &ir), (Modality::Label, &label)];
        for (m, codec) in expect {
            if codec.modality != m {
                return Err(Error::config(format!("{} codec supplied in the {m} slot", codec.modality)));
            }
        }
        if vis.latent_shape() != ir.latent_shape() || vis.latent_shape() != label.latent_shape() {
            return Err(Error::config(format!(
                "codec latent shapes differ: {:?}, {:?}, {:?}",
                vis.latent_shape(),
                ir.latent_shape(),
                label.latent_shape()
            )));
        }
        Ok(Self { vis, ir, label })
    }

    pub fn get(&self, m: Modality) -> &ModalityCodec {
        match m {
            Modality::Vis => &self.vis,
            Modality::Ir => &self.ir,
            Modality::Label => &self.label,
        }
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.vis.latent_shape()
    }

    /// Concatenated latents `[B, h, w, 3c]` of a batch of triplets.
    pub fn encode_triplets(&self, triplets: &[&Triplet]) -> Result<Tensor> {
        concat_latents(
            &self.vis.encode_triplets(triplets)?,
            &self.ir.encode_triplets(triplets)?,
            &self.label.encode_triplets(triplets)?,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for m in Modality::ALL {
            self.get(m).save(&dir.join(format!("{m}.codec")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(
            ModalityCodec::load(&dir.join("vis.codec"))?,
            ModalityCodec::load(&dir.join("ir.codec"))?,
            ModalityCodec::load(&dir.join("label.codec"))?,
        )
    }
}

/// Trains all three codecs with the same configuration.
pub fn train_codecs(triplets: &[Triplet], config: &CodecConfig) -> Result<(CodecSet, Vec<TrainCurve>)> {
    let (vis, a) = train_codec(Modality::Vis, triplets, config)?;
    let (ir, b) = train_codec(Modality::Ir, triplets, config)?;
    let (label, c) = train_codec(Modality::Label, triplets, config)?;
    Ok((CodecSet::new(vis, ir, label)?, vec![a, b, c]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_samples, CorpusConfig};

    fn tiny() -> CodecConfig {
        CodecConfig { height: 16, width: 16, depth: 2, hidden: 8, steps: 3, batch_size: 2, ..Default::default() }
    }

    #[test]
    fn split_inverts_concat_and_rejects_mismatch() {
        let mut r = rng(0);
        let a = Tensor::randn([2, 4, 4, 3], 1.0, &mut r);
        let b = Tensor::randn([2, 4, 4, 3], 1.0, &mut r);
        let c = Tensor::randn([2, 4, 4, 3], 1.0, &mut r);
        let z = concat_latents(&a, &b, &c).unwrap();
        assert_eq!(z.shape(), &[2, 4, 4, 9]);
        assert_eq!(split_latents(&z).unwrap(), (a.clone(), b, c));
        assert!(concat_latents(&a, &Tensor::zeros([2, 4, 4, 2]), &a).is_err());
        let zero = Tensor::zeros([4, 4, 3]);
        assert!(concat_latents(&zero, &zero, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_clipping_contracts() {
        let cfg = tiny();
        let corpus = generate_samples(&CorpusConfig::with_size(16, 16), 2, 1).unwrap();
        for m in Modality::ALL {
            let codec = ModalityCodec::new(m, cfg.clone(), 3).unwrap();
            let z = codec.encode(&corpus[0]).unwrap();
            assert_eq!(z.shape(), &[4, 4, 4]);
            assert_eq!(z, codec.encode(&corpus[0]).unwrap());
            let random = Tensor::randn([3, 4, 4, 4], 3.0, &mut rng(5));
            let y = codec.decode(&random).unwrap();
            assert_eq!(y.shape(), &[3, 16, 16, m.channels(5)]);
            if m != Modality::Label {
                assert!(y.min() >= 0.0 && y.max() <= 1.0);
            }
            assert!(codec.decode(&Tensor::zeros([4, 4, 3])).is_err());
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let codec = ModalityCodec::new(Modality::Label, tiny(), 0).unwrap();
        let mut t = generate_samples(&CorpusConfig::with_size(16, 16), 1, 1).unwrap().remove(0);
        t.label.data[0] = 9;
        assert!(matches!(codec.encode(&t), Err(Error::Data(_))));
        let big = generate_samples(&CorpusConfig::with_size(32, 32), 1, 1).unwrap().remove(0);
        assert!(matches!(codec.encode(&big), Err(Error::Shape(_))));
        let bad = CodecConfig { height: 18, ..tiny() };
        assert!(ModalityCodec::new(Modality::Vis, bad, 0).is_err());
    }

    #[test]
    fn mismatched_latent_geometry_fails_construction() {
        let a = ModalityCodec::new(Modality::Vis, tiny(), 0).unwrap();
        let b = ModalityCodec::new(Modality::Ir, tiny(), 0).unwrap();
        let c = ModalityCodec::new(Modality::Label, CodecConfig { latent_channels: 3, ..tiny() }, 0).unwrap();
        assert!(CodecSet::new(a.clone(), b.clone(), c).is_err());
        assert!(CodecSet::new(b.clone(), a.clone(), ModalityCodec::new(Modality::Label, tiny(), 0).unwrap()).is_err());
    }

    #[test]
    fn argmax_picks_largest_logit() {
        let logits = Tensor::new([1, 1, 2, 3], vec![0.1, 2.0, -1.0, 5.0, 4.0, 4.5]).unwrap();
        assert_eq!(argmax_label(&logits).unwrap()[0].data, vec![1, 0]);
    }

    #[test]
    fn vae_training_reports_nonnegative_kl_and_checkpoints_round_trip() {
        let cfg = CodecConfig { vae: true, steps: 6, ..tiny() };
        let corpus = generate_samples(&CorpusConfig::with_size(16, 16), 4, 2).unwrap();
        let (codec, curve) = train_codec(Modality::Ir, &corpus, &cfg).unwrap();
        assert!(!curve.epoch_kl.is_empty());
        assert!(curve.epoch_kl.iter().all(|&k| k >= 0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ir.codec");
        codec.save(&p).unwrap();
        let back = ModalityCodec::load(&p).unwrap();
        let z = codec.encode(&corpus[1]).unwrap();
        assert_eq!(back.encode(&corpus[1]).unwrap(), z);
        assert_eq!(back.decode(&z).unwrap(), codec.decode(&z).unwrap());
    }
}
