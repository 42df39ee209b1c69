//! Joint latent diffusion over concatenated triplet latents.
//!
//! Conventions: steps run `1..=T`; `alpha_bar(0) = 1`; the reverse chain adds
//! noise with variance `σ_t² = β_t` on every step except the last.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Conditioner, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{spatial, timestep_embedding, GatherMap, Graph, LayerNorm, Linear, ParamId, ParamStore, Var};
use crate::tensor::Tensor;
use crate::util::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub t_steps: usize,
    /// `beta[t - 1]` is `β_t`; the other tables follow the same indexing.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
}

pub fn build_schedule(kind: ScheduleKind, t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::config("a noise schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / t_steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=t_steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma2 = beta.clone();
    Ok(NoiseSchedule { kind, t_steps, beta, alpha, alpha_bar, sigma2 })
}

impl NoiseSchedule {
    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// The same schedule with a noiseless reverse chain.
    pub fn without_sampling_noise(mut self) -> Self {
        self.sigma2.iter_mut().for_each(|s| *s = 0.0);
        self
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.t_steps || (!allow_zero && t == 0) {
            let lo = if allow_zero { 0 } else { 1 };
            return Err(Error::config(format!("timestep {t} outside {lo}..={}", self.t_steps)));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t z_0 + √(1 − ᾱ_t) ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t, true)?;
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Forward diffusion of a batch `[B, ...]` with one step per item.
pub fn forward_diffuse_batch(z0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    z0.check_same_shape(eps)?;
    let per = per_item(z0, t.len())?;
    let mut out = z0.clone();
    for (i, &ti) in t.iter().enumerate() {
        s.check_step(ti, true)?;
        let ab = s.alpha_bar_at(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + b * e;
        }
    }
    Ok(out)
}

fn per_item(x: &Tensor, batch: usize) -> Result<usize> {
    if batch == 0 || x.shape().first() != Some(&batch) {
        return Err(Error::Shape(format!("{batch} timesteps for a batch of shape {:?}", x.shape())));
    }
    Ok(x.len() / batch)
}

/// `μ = (z_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t`.
pub fn reverse_mean(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t, false)?;
    let (a, ab) = (s.alpha[t - 1], s.alpha_bar[t - 1]);
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    z_t.zip_map(eps_hat, |z, e| inv * (z - c * e))
}

/// One-step inversion of the forward process: `(z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn estimate_z0(z_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_step(t, true)?;
    let ab = s.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)
}

/// [`estimate_z0`] for a batch with one step per item.
pub fn estimate_z0_batch(z_t: &Tensor, eps_hat: &Tensor, t: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    z_t.check_same_shape(eps_hat)?;
    let per = per_item(z_t, t.len())?;
    let mut out = z_t.clone();
    for (i, &ti) in t.iter().enumerate() {
        s.check_step(ti, true)?;
        let ab = s.alpha_bar_at(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, e) in out.data_mut()[range.clone()].iter_mut().zip(&eps_hat.data()[range]) {
            *o = (*o - b * e) / a;
        }
    }
    Ok(out)
}

/// `z_{t−1} = μ + σ_t g` with `g ~ N(0, I)` for `t > 1`, and `μ` at `t = 1`.
pub fn posterior_step<R: Rng + ?Sized>(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let mut mu = reverse_mean(z_t, eps_hat, t, s)?;
    let sigma = s.sigma2[t - 1].sqrt();
    if t > 1 && sigma > 0.0 {
        let g = Tensor::randn(mu.shape().to_vec(), sigma, rng);
        mu.add_assign(&g);
    }
    Ok(mu)
}

/// Condition inputs of a batch: padded token ids and 1-based scene groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CondBatch {
    pub ids: Vec<Vec<u32>>,
    pub scenes: Vec<usize>,
}

impl CondBatch {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> CondBatch {
        CondBatch {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            scenes: idx.iter().map(|&i| self.scenes[i]).collect(),
        }
    }
}

/// Anything that predicts the injected noise of a batch of latents.
pub trait NoiseModel {
    fn params(&self) -> &ParamStore;

    /// Adds `ε̂(z_t, cond, t)` for a `[B, ...]` batch to `g`.
    fn predict(&self, g: &mut Graph, z_t: Var, cond: &CondBatch, t: &[usize]) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    /// Channels of the concatenated latent (three times one modality's).
    pub latent_c: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub scene_groups: usize,
    /// Learned positions for condition tokens; without them the condition is
    /// an unordered set.
    pub cond_positional: bool,
    /// Also add the time embedding to every latent token.
    #[serde(default)]
    pub time_to_latents: bool,
}

impl DenoiserConfig {
    pub fn n_latent_tokens(&self) -> usize {
        (self.latent_h / self.patch) * (self.latent_w / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        1 + self.text_len + 1 + self.n_latent_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.latent_h % self.patch != 0 || self.latent_w % self.patch != 0 {
            return Err(Error::config(format!(
                "patch size {} does not tile a {}x{} latent",
                self.patch, self.latent_h, self.latent_w
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 || self.width % 2 != 0 {
            return Err(Error::config(format!("width {} must be even and divisible by {} heads", self.width, self.heads)));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.scene_groups == 0 || self.latent_c == 0 {
            return Err(Error::config("denoiser sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer over `[time; text; scene; latent patches]` tokens.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    pub cond: Conditioner,
    time1: Linear,
    time2: Linear,
    patch_in: Linear,
    pos_latent: ParamId,
    pos_cond: Option<ParamId>,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Linear,
    patchify: Arc<GatherMap>,
    unpatchify: Arc<GatherMap>,
    split: [Arc<GatherMap>; 3],
    merge: Arc<GatherMap>,
    repeat_time: Arc<GatherMap>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let w = c.width;
        let p = c.patch;
        let pdim = p * p * c.latent_c;
        let vocab = Vocabulary::from_tokens((0..c.vocab_size).map(|i| i.to_string()).collect(), c.text_len);
        let cond = Conditioner::new(&mut store, &vocab, c.scene_groups, w, &mut r);
        let time1 = Linear::new(&mut store, "time.fc1", w, w, &mut r);
        let time2 = Linear::new(&mut store, "time.fc2", w, w, &mut r);
        let patch_in = Linear::new(&mut store, "patch.in", pdim, w, &mut r);
        let n_lat = c.n_latent_tokens();
        let pos_latent = store.add("pos.latent", Tensor::randn([n_lat * w], 0.1, &mut r));
        let pos_cond = c.cond_positional.then(|| store.add("pos.cond", Tensor::randn([(c.text_len + 1) * w], 0.1, &mut r)));
        let blocks = (0..c.blocks)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut store, &format!("block{i}.ln1"), w),
                qkv: Linear::new(&mut store, &format!("block{i}.qkv"), w, 3 * w, &mut r),
                proj: Linear::new(&mut store, &format!("block{i}.proj"), w, w, &mut r),
                ln2: LayerNorm::new(&mut store, &format!("block{i}.ln2"), w),
                fc1: Linear::new(&mut store, &format!("block{i}.fc1"), w, c.mlp_ratio * w, &mut r),
                fc2: Linear::new(&mut store, &format!("block{i}.fc2"), c.mlp_ratio * w, w, &mut r),
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "out.ln", w);
        let head = Linear::zeros(&mut store, "out.head", w, pdim);
        let n = c.n_tokens();
        let dh = w / c.heads;
        let (hp, wp) = (c.latent_h / p, c.latent_w / p);
        Ok(Self {
            patchify: Arc::new(spatial::space_to_depth(c.latent_h, c.latent_w, c.latent_c, p)),
            unpatchify: Arc::new(spatial::depth_to_space(hp, wp, c.latent_c, p)),
            split: [0, 1, 2].map(|which| Arc::new(spatial::split_heads(n, c.heads, dh, which))),
            merge: Arc::new(spatial::merge_heads(n, c.heads, dh)),
            repeat_time: Arc::new(GatherMap::new(
                w,
                vec![c.n_latent_tokens(), w],
                (0..c.n_latent_tokens() * w).map(|i| (i % w) as u32).collect(),
            )),
            config,
            store,
            cond,
            time1,
            time2,
            patch_in,
            pos_latent,
            pos_cond,
            blocks,
            ln_out,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars(&self.store.ids())
    }

    fn attention(&self, g: &mut Graph, blk: &Block, x: Var, batch: usize) -> Result<Var> {
        let c = &self.config;
        let (n, heads, dh) = (c.n_tokens(), c.heads, c.width / c.heads);
        let qkv = blk.qkv.forward(g, x)?;
        let mut qkv_h = Vec::with_capacity(3);
        for map in &self.split {
            let y = g.gather(qkv, map)?;
            qkv_h.push(g.reshape(y, &[batch * heads, n, dh])?);
        }
        let scores = g.bmm(qkv_h[0], qkv_h[1], true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax(scores);
        let y = g.bmm(att, qkv_h[2], false)?;
        let y = g.reshape(y, &[batch, heads * n * dh])?;
        let y = g.gather(y, &self.merge)?;
        blk.proj.forward(g, y)
    }
}

impl NoiseModel for Denoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn predict(&self, g: &mut Graph, z_t: Var, cond: &CondBatch, t: &[usize]) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(z_t).to_vec();
        let b = t.len();
        if shape != [b, c.latent_h, c.latent_w, c.latent_c] {
            return Err(Error::Shape(format!(
                "denoiser expects [{b}, {}, {}, {}] latents, got {shape:?}",
                c.latent_h, c.latent_w, c.latent_c
            )));
        }
        if cond.len() != b {
            return Err(Error::Shape(format!("{} conditions for a batch of {b}", cond.len())));
        }
        let w = c.width;
        let emb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti as f64, w)).collect();
        let temb = g.input(Tensor::new([b, w], emb)?);
        let h = self.time1.forward(g, temb)?;
        let h = g.silu(h);
        let h = self.time2.forward(g, h)?;
        let time_tok = g.reshape(h, &[b, 1, w])?;

        let mut cond_tok = self.cond.forward(g, &cond.ids, &cond.scenes)?;
        if let Some(pos) = self.pos_cond {
            let flat = g.reshape(cond_tok, &[b, (c.text_len + 1) * w])?;
            let pos = g.param(pos)?;
            let flat = g.add_bias(flat, pos)?;
            cond_tok = g.reshape(flat, &[b, c.text_len + 1, w])?;
        }

        let n_lat = c.n_latent_tokens();
        let patches = g.gather(z_t, &self.patchify)?;
        let lat = self.patch_in.forward(g, patches)?;
        let lat = g.reshape(lat, &[b, n_lat * w])?;
        let pos = g.param(self.pos_latent)?;
        let lat = g.add_bias(lat, pos)?;
        let mut lat_tok = g.reshape(lat, &[b, n_lat, w])?;
        if c.time_to_latents {
            let rep = g.gather(h, &self.repeat_time)?;
            lat_tok = g.add(lat_tok, rep)?;
        }

        let mut x = g.concat(&[time_tok, cond_tok, lat_tok], 1)?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, x)?;
            let h = self.attention(g, blk, h, b)?;
            x = g.add(x, h)?;
            let h = blk.ln2.forward(g, x)?;
            let h = blk.fc1.forward(g, h)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.ln_out.forward(g, x)?;
        let lat_out = g.narrow(x, 1, c.n_tokens() - n_lat, n_lat)?;
        let y = self.head.forward(g, lat_out)?;
        let y = g.reshape(y, &[b, n_lat * c.patch * c.patch * c.latent_c])?;
        let y = g.gather(y, &self.unpatchify)?;
        g.reshape(y, &shape)
    }
}

/// `ε̂` as a plain tensor (no gradients kept).
pub fn predict_noise<M: NoiseModel + ?Sized>(model: &M, z_t: &Tensor, cond: &CondBatch, t: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(model.params());
    let z = g.input(z_t.clone());
    let e = model.predict(&mut g, z, cond, t)?;
    Ok(g.value(e).clone())
}

/// Per-item squared error summed over elements and averaged over the batch.
pub fn batch_sq_error(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let b = g.shape(pred)[0].max(1) as f64;
    let d = g.sub(pred, target)?;
    let d = g.square(d);
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / b))
}

/// Graph nodes of one noise-prediction loss evaluation.
pub struct DenoiseTerms {
    pub loss: Var,
    pub eps_hat: Var,
    pub z_t: Tensor,
}

/// Adds `mean_b ‖ε_θ(z_t, c, t) − ε‖²` with explicit steps and noise to `g`.
pub fn denoise_terms<M: NoiseModel + ?Sized>(
    g: &mut Graph,
    model: &M,
    z0: &Tensor,
    cond: &CondBatch,
    t: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<DenoiseTerms> {
    if t.is_empty() {
        return Err(Error::data("denoise loss of an empty batch"));
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > s.t_steps) {
        return Err(Error::config(format!("timestep {bad} outside 1..={}", s.t_steps)));
    }
    let z_t = forward_diffuse_batch(z0, t, eps, s)?;
    let zv = g.input(z_t.clone());
    let eps_hat = model.predict(g, zv, cond, t)?;
    let target = g.constant(eps.clone());
    let loss = batch_sq_error(g, eps_hat, target)?;
    Ok(DenoiseTerms { loss, eps_hat, z_t })
}

/// Uniform steps in `1..=T` and standard normal noise for a batch.
pub fn draw_noise<R: Rng + ?Sized>(z0: &Tensor, s: &NoiseSchedule, rng: &mut R) -> (Vec<usize>, Tensor) {
    let b = z0.shape().first().copied().unwrap_or(0);
    let t = (0..b).map(|_| rng.random_range(1..=s.t_steps)).collect();
    let eps = Tensor::randn(z0.shape().to_vec(), 1.0, rng);
    (t, eps)
}

/// Noise-prediction loss with freshly drawn steps and noise.
pub fn denoise_loss<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z0: &Tensor,
    cond: &CondBatch,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (t, eps) = draw_noise(z0, s, rng);
    let mut g = Graph::new(model.params());
    let terms = denoise_terms(&mut g, model, z0, cond, &t, &eps, s)?;
    let v = g.value(terms.loss).item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("denoise loss is {v}")));
    }
    Ok(v)
}

/// Classifier-free guidance: `ε̂ = ε̂_∅ + s (ε̂_c − ε̂_∅)` with the text replaced
/// by the null condition.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub scale: f64,
    pub null_ids: Vec<u32>,
}

/// One reverse step `z_t → z_{t−1}` for a batch sharing the step `t`.
pub fn sample_step<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z_t: &Tensor,
    cond: &CondBatch,
    t: usize,
    s: &NoiseSchedule,
    guidance: Option<&Guidance>,
    rng: &mut R,
) -> Result<Tensor> {
    let b = z_t.shape().first().copied().unwrap_or(0);
    let steps = vec![t; b];
    let mut eps = predict_noise(model, z_t, cond, &steps)?;
    if let Some(gd) = guidance {
        let uncond = CondBatch { ids: vec![gd.null_ids.clone(); b], scenes: cond.scenes.clone() };
        let eu = predict_noise(model, z_t, &uncond, &steps)?;
        eps = eu.zip_map(&eps, |u, c| u + gd.scale * (c - u))?;
    }
    posterior_step(z_t, &eps, t, s, rng)
}

/// Runs the full ancestral chain from `z_T ~ N(0, I)` and returns `ẑ_0` with
/// shape `[B, ...item_shape]`.
pub fn generate_latents<M: NoiseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &CondBatch,
    item_shape: &[usize],
    s: &NoiseSchedule,
    guidance: Option<&Guidance>,
    rng: &mut R,
) -> Result<Tensor> {
    let mut shape = vec![cond.len()];
    shape.extend_from_slice(item_shape);
    let mut z = Tensor::randn(shape, 1.0, rng);
    for t in (1..=s.t_steps).rev() {
        z = sample_step(model, &z, cond, t, s, guidance, rng)?;
    }
    if !z.all_finite() {
        return Err(Error::Numerical("reverse chain produced non-finite latents".into()));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(t: usize) -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, t, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(ScheduleKind::Linear, 1, 0.01, 0.01).unwrap();
        assert!((s.alpha_bar[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 0.01, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Cosine, 10, 0.01, 1.0).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = build_schedule(ScheduleKind::Cosine, 100, 1e-4, 0.5).unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[99] < 0.01);
    }

    #[test]
    fn scalar_forward_and_reverse() {
        let s = build_schedule(ScheduleKind::Linear, 1, 0.01, 0.01).unwrap();
        let z0 = Tensor::scalar(1.0);
        let eps = Tensor::scalar(0.5);
        let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        assert!((zt.item() - 1.04499).abs() < 1e-5);
        let mu = reverse_mean(&zt, &eps, 1, &s).unwrap();
        assert!((mu.item() - 1.0).abs() < 1e-12);
        assert_eq!(forward_diffuse(&z0, 0, &eps, &s).unwrap(), z0);
        assert!(forward_diffuse(&z0, 2, &eps, &s).is_err());
        assert!(reverse_mean(&zt, &eps, 0, &s).is_err());
    }

    #[test]
    fn zero_noise_prediction_scales_by_inverse_sqrt_alpha() {
        let s = lin(20);
        let zt = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let mu = reverse_mean(&zt, &Tensor::zeros([3]), 7, &s).unwrap();
        for (m, z) in mu.data().iter().zip(zt.data()) {
            assert!((m - z / s.alpha[6].sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn final_step_adds_no_noise() {
        let s = lin(5);
        let zt = Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let eps = Tensor::new([4], vec![0.5, -0.5, 0.0, 1.0]).unwrap();
        let a = posterior_step(&zt, &eps, 1, &s, &mut rng(1)).unwrap();
        let b = posterior_step(&zt, &eps, 1, &s, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, reverse_mean(&zt, &eps, 1, &s).unwrap());
        let c = posterior_step(&zt, &eps, 3, &s, &mut rng(1)).unwrap();
        assert_ne!(c, posterior_step(&zt, &eps, 3, &s, &mut rng(2)).unwrap());
    }

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_h: 2,
            latent_w: 2,
            latent_c: 3,
            patch: 1,
            width: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 6,
            text_len: 3,
            scene_groups: 2,
            cond_positional: true,
            time_to_latents: true,
        }
    }

    fn tiny_cond(b: usize) -> CondBatch {
        CondBatch { ids: (0..b).map(|i| vec![3, (i % 3) as u32 + 3, 0]).collect(), scenes: (0..b).map(|i| i % 2 + 1).collect() }
    }

    #[test]
    fn denoiser_output_matches_latent_shape() {
        let mut cfg = tiny_config();
        cfg.latent_h = 4;
        cfg.latent_w = 4;
        cfg.patch = 2;
        let d = Denoiser::new(cfg, 0).unwrap();
        let z = Tensor::randn([3, 4, 4, 3], 1.0, &mut rng(0));
        let e = predict_noise(&d, &z, &tiny_cond(3), &[1, 5, 9]).unwrap();
        assert_eq!(e.shape(), z.shape());
        assert!(predict_noise(&d, &z, &tiny_cond(2), &[1, 5, 9]).is_err());
        let bad = Tensor::zeros([3, 4, 4, 2]);
        assert!(predict_noise(&d, &bad, &tiny_cond(3), &[1, 5, 9]).is_err());
    }

    #[test]
    fn noiseless_chain_is_reproducible() {
        let d = Denoiser::new(tiny_config(), 4).unwrap();
        let s = lin(6).without_sampling_noise();
        let a = generate_latents(&d, &tiny_cond(2), &[2, 2, 3], &s, None, &mut rng(9)).unwrap();
        let b = generate_latents(&d, &tiny_cond(2), &[2, 2, 3], &s, None, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }
}
