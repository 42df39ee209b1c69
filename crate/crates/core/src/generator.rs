//! The trained triplet generator: denoiser, adapters, vocabulary, scene
//! groups and the training sampler, with training, sampling and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{calib_loss, combined_loss, decode_triplet, AdapterSet, CombinedLoss};
use crate::checkpoint;
use crate::codecs::CodecSet;
use crate::conditioning::{group_triplets, SceneGroups, Vocabulary};
use crate::corpus::{CorpusConfig, PromptRecord, Triplet};
use crate::diffusion::{
    build_schedule, denoise_terms, draw_noise, estimate_z0_batch, generate_latents, CondBatch, Denoiser,
    DenoiserConfig, Guidance, NoiseSchedule, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Graph};
use crate::sbca::{compute_class_stats, compute_weights, SamplingWeightTable, WeightedSampler};
use crate::tensor::Tensor;
use crate::util::{derive_seed, json_digest, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.t_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbcaConfig {
    /// Off: uniform batches and a single shared scene token.
    pub enabled: bool,
    pub alpha: f64,
    pub epsilon_floor: f64,
    /// Number of scene groups.
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub schedule: ScheduleConfig,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub cond_positional: bool,
    pub adapter_hidden: usize,
    /// Weight of the calibration loss.
    pub lambda: f64,
    /// Calibrate on latents from the full reverse chain instead of the
    /// one-step estimate (much slower).
    pub calib_at_full_denoise: bool,
    /// Train the denoiser alone first, then the adapters alone for
    /// `adapter_steps` steps.
    pub two_stage: bool,
    pub adapter_steps: usize,
    pub sbca: SbcaConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a training prompt with the null prompt.
    pub cond_dropout: f64,
    /// Classifier-free guidance scale at sampling time (off when `None`).
    pub guidance: Option<f64>,
    /// Decay of the weight average used for sampling (0 keeps the raw weights).
    pub ema_decay: f64,
    /// Add the time embedding to every latent token, not only the time token.
    pub time_to_latents: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig { kind: ScheduleKind::Linear, t_steps: 200, beta_min: 1e-4, beta_max: 0.05 },
            width: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 2,
            patch: 1,
            cond_positional: true,
            adapter_hidden: 16,
            lambda: 0.5,
            calib_at_full_denoise: false,
            two_stage: false,
            adapter_steps: 500,
            sbca: SbcaConfig { enabled: true, alpha: 0.5, epsilon_floor: 0.05, k: 4 },
            steps: 4000,
            batch_size: 32,
            lr: 1e-3,
            cond_dropout: 0.0,
            guidance: None,
            ema_decay: 0.999,
            time_to_latents: true,
            log_every: 50,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn hash(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("generator training needs positive steps, batch size and learning rate"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("EMA decay must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("condition dropout must lie in [0, 1)"));
        }
        if self.sbca.k == 0 {
            return Err(Error::config("number of scene groups must be at least 1"));
        }
        if !(self.sbca.alpha >= 0.0) || !(self.sbca.epsilon_floor >= 0.0) {
            return Err(Error::config("SBCA alpha and epsilon floor must be non-negative"));
        }
        if self.adapter_hidden == 0 || self.log_every == 0 {
            return Err(Error::config("adapter width and log interval must be positive"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss_denoise: f64,
    pub loss_calib: f64,
    pub lr: f64,
}

/// A training prompt kept for automatic prompt drawing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEntry {
    pub prompt: String,
    pub group: usize,
    pub scene_id: usize,
    pub classes: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct TripletGenerator {
    pub config: GeneratorConfig,
    pub corpus: CorpusConfig,
    pub vocab: Vocabulary,
    pub groups: SceneGroups,
    pub denoiser: Denoiser,
    pub adapters: AdapterSet,
    pub schedule: NoiseSchedule,
    pub table: SamplingWeightTable,
    pub entries: Vec<TrainEntry>,
    /// Scene description → scene group (the most common group among
    /// training samples with that description).
    pub scene_group: BTreeMap<String, usize>,
    pub steps_trained: usize,
}

/// A sampling request: what to ask for and under which scene group.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub prompt: PromptRecord,
    pub group: usize,
}

fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let p = (step - warm) as f64 / (total - warm).max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

impl TripletGenerator {
    fn build(
        config: GeneratorConfig,
        corpus: CorpusConfig,
        codecs_latent: (usize, usize, usize),
        vocab: Vocabulary,
        groups: SceneGroups,
        table: SamplingWeightTable,
        entries: Vec<TrainEntry>,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = codecs_latent;
        let scene_k = if config.sbca.enabled { config.sbca.k } else { 1 };
        let dcfg = DenoiserConfig {
            latent_h: h,
            latent_w: w,
            latent_c: 3 * c,
            patch: config.patch,
            width: config.width,
            blocks: config.blocks,
            heads: config.heads,
            mlp_ratio: config.mlp_ratio,
            vocab_size: vocab.len(),
            text_len: vocab.max_len,
            scene_groups: scene_k,
            cond_positional: config.cond_positional,
            time_to_latents: config.time_to_latents,
        };
        let mut denoiser = Denoiser::new(dcfg, derive_seed(config.seed, 1))?;
        let adapters = AdapterSet::new(&mut denoiser.store, c, config.adapter_hidden, &mut rng(derive_seed(config.seed, 2)));
        let mut votes: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
        for e in &entries {
            let desc = PromptRecord::parse(&e.prompt).scene_desc;
            *votes.entry(desc).or_default().entry(e.group).or_default() += 1;
        }
        let scene_group = votes
            .into_iter()
            .map(|(d, v)| {
                let best = v.iter().max_by_key(|(g, n)| (**n, std::cmp::Reverse(**g))).map(|(g, _)| *g).unwrap_or(1);
                (d, best)
            })
            .collect();
        let schedule = config.schedule.build()?;
        Ok(Self {
            config,
            corpus,
            vocab,
            groups,
            denoiser,
            adapters,
            schedule,
            table,
            entries,
            scene_group,
            steps_trained: 0,
        })
    }

    pub fn latent_item_shape(&self) -> [usize; 3] {
        let c = &self.denoiser.config;
        [c.latent_h, c.latent_w, c.latent_c]
    }

    /// Scene group used for a prompt: the group most associated with its scene
    /// description in training, or 1 when the description was never seen.
    pub fn group_for(&self, prompt: &PromptRecord) -> usize {
        if !self.config.sbca.enabled {
            return 1;
        }
        self.scene_group.get(&prompt.scene_desc).copied().unwrap_or(1)
    }

    pub fn request(&self, prompt: PromptRecord) -> Request {
        let group = self.group_for(&prompt);
        Request { prompt, group }
    }

    /// Draws training prompts with the generator's own training sampler:
    /// the scene-balanced table when enabled, uniformly otherwise.
    pub fn auto_requests<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Request>> {
        let picks = WeightedSampler::new(&self.table)?.sample(n, rng)?;
        Ok(picks
            .into_iter()
            .map(|i| Request { prompt: PromptRecord::parse(&self.entries[i].prompt), group: self.entries[i].group })
            .collect())
    }

    fn cond_batch(&self, requests: &[Request]) -> Result<CondBatch> {
        let mut ids = Vec::with_capacity(requests.len());
        for r in requests {
            ids.push(self.vocab.encode(&r.prompt)?);
        }
        Ok(CondBatch { ids, scenes: requests.iter().map(|r| r.group).collect() })
    }

    fn guidance(&self) -> Option<Guidance> {
        self.config.guidance.map(|scale| Guidance { scale, null_ids: self.vocab.null_ids() })
    }

    /// Runs the reverse chain for every request and returns `ẑ_0` latents.
    pub fn sample_latents<R: Rng + ?Sized>(&self, requests: &[Request], rng: &mut R) -> Result<Tensor> {
        if requests.is_empty() {
            return Err(Error::config("nothing to sample"));
        }
        let guidance = self.guidance();
        let mut parts = Vec::new();
        for chunk in requests.chunks(64) {
            let cond = self.cond_batch(chunk)?;
            parts.push(generate_latents(&self.denoiser, &cond, &self.latent_item_shape(), &self.schedule, guidance.as_ref(), rng)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Generates one triplet per request: reverse chain, then a single
    /// calibration and decode per modality.
    pub fn generate<R: Rng + ?Sized>(&self, codecs: &CodecSet, requests: &[Request], rng: &mut R) -> Result<Vec<Triplet>> {
        let z = self.sample_latents(requests, rng)?;
        let decoded = decode_triplet(&self.adapters.bind(&self.denoiser.store), codecs, &z)?;
        decoded
            .into_iter()
            .zip(requests)
            .map(|(d, r)| {
                let scene_id = self
                    .corpus
                    .scenes
                    .iter()
                    .position(|s| s.description == r.prompt.scene_desc)
                    .map_or(0, |i| i + 1);
                Ok(Triplet { vis: d.vis, ir: d.ir, label: d.label, prompt: r.prompt.clone(), scene_id })
            })
            .collect()
    }

    /// `n` triplets for prompts drawn with [`Self::auto_requests`].
    pub fn synthesize(&self, codecs: &CodecSet, n: usize, seed: u64) -> Result<Vec<Triplet>> {
        if n == 0 {
            return Err(Error::config("number of samples must be positive"));
        }
        let mut r = rng(seed);
        let requests = self.auto_requests(n, &mut r)?;
        self.generate(codecs, &requests, &mut r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "generator",
            "config": self.config,
            "config_hash": self.config.hash(),
            "corpus": self.corpus,
            "vocab": self.vocab,
            "groups": self.groups,
            "table": self.table,
            "entries": self.entries,
            "latent": self.latent_item_shape(),
            "schedule": {
                "kind": self.schedule.kind,
                "t_steps": self.schedule.t_steps,
                "beta_min": self.config.schedule.beta_min,
                "beta_max": self.config.schedule.beta_max,
            },
            "steps_trained": self.steps_trained,
        });
        checkpoint::save(path, meta, self.denoiser.store.named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let m = &loaded.meta;
        if m["kind"] != "generator" {
            return Err(Error::data(format!("{} is not a generator checkpoint", path.display())));
        }
        macro_rules! get {
            ($name:literal) => {
                serde_json::from_value(m.get($name).cloned().unwrap_or_default()).map_err(|e| {
                    Error::data(format!("{}: bad or missing {} in generator checkpoint: {e}", path.display(), $name))
                })?
            };
        }
        let config: GeneratorConfig = get!("config");
        let corpus: CorpusConfig = get!("corpus");
        let vocab: Vocabulary = get!("vocab");
        let groups: SceneGroups = get!("groups");
        let table: SamplingWeightTable = get!("table");
        let entries: Vec<TrainEntry> = get!("entries");
        let latent: [usize; 3] = get!("latent");
        let steps_trained: usize = get!("steps_trained");
        if latent[2] % 3 != 0 {
            return Err(Error::data(format!("{}: latent channels {} are not a multiple of 3", path.display(), latent[2])));
        }
        let mut g = Self::build(config, corpus, (latent[0], latent[1], latent[2] / 3), vocab.reindex(), groups, table, entries)?;
        g.denoiser.store.load_from(&loaded.tensors)?;
        g.steps_trained = steps_trained;
        Ok(g)
    }
}

/// Everything training produced besides the generator itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    /// Mean losses over the last tenth of training.
    pub final_loss: Option<CombinedLoss>,
}

/// Trains the denoiser and adapters on `triplets` (encoded with `codecs`).
pub fn train_generator(
    triplets: &[Triplet],
    codecs: &CodecSet,
    corpus: &CorpusConfig,
    config: &GeneratorConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(TripletGenerator, TrainSummary)> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::data("generator training needs at least one triplet"));
    }
    let vocab = Vocabulary::from_config(corpus);
    let k = if config.sbca.enabled { config.sbca.k } else { 1 };
    let groups = group_triplets(triplets, k.min(triplets.len()), derive_seed(config.seed, 3))?;
    let class_lists: Vec<Vec<u8>> = triplets.iter().map(Triplet::class_ids).collect();
    let table = if config.sbca.enabled {
        let stats = compute_class_stats(&class_lists, config.sbca.alpha, config.sbca.epsilon_floor)?;
        compute_weights(&stats, &groups.assignment, groups.k, &class_lists)?
    } else {
        SamplingWeightTable::uniform(triplets.len())?
    };
    let entries: Vec<TrainEntry> = triplets
        .iter()
        .zip(&groups.assignment)
        .map(|(t, &g)| TrainEntry { prompt: t.prompt.rendered.clone(), group: g, scene_id: t.scene_id, classes: t.class_ids() })
        .collect();
    let mut gen = TripletGenerator::build(config.clone(), corpus.clone(), codecs.latent_shape(), vocab, groups, table, entries)?;

    let refs: Vec<&Triplet> = triplets.iter().collect();
    let z_all = codecs.encode_triplets(&refs)?;
    let cond_all = CondBatch {
        ids: triplets.iter().map(|t| gen.vocab.encode(&t.prompt)).collect::<Result<_>>()?,
        scenes: gen.entries.iter().map(|e| e.group).collect(),
    };
    let per = z_all.len() / triplets.len();
    let item_shape = gen.latent_item_shape();

    let sampler = WeightedSampler::new(&gen.table)?;
    let mut r = rng(derive_seed(config.seed, 4));
    let all_ids = gen.denoiser.store.ids();
    let adapter_ids = gen.adapters.param_ids();
    let denoiser_ids: Vec<_> = all_ids.iter().copied().filter(|id| !adapter_ids.contains(id)).collect();
    let mut opt = AdamW::new(config.lr);
    let mut summary = TrainSummary::default();
    let total_steps = config.steps + if config.two_stage { config.adapter_steps } else { 0 };
    let tail_start = total_steps - (total_steps / 10).max(1);
    let (mut tail_d, mut tail_c, mut tail_n) = (0.0, 0.0, 0usize);
    let (mut acc_d, mut acc_c, mut acc_n) = (0.0, 0.0, 0usize);
    let mut ema: Vec<Tensor> = all_ids.iter().map(|&id| gen.denoiser.store.get(id).clone()).collect();

    for step in 0..total_steps {
        let adapter_stage = config.two_stage && step >= config.steps;
        let lambda = if config.two_stage && !adapter_stage { 0.0 } else { config.lambda };
        let idx = sampler.sample(config.batch_size, &mut r)?;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in &idx {
            data.extend_from_slice(&z_all.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&item_shape);
        let z0 = Tensor::new(shape, data)?;
        let mut cond = cond_all.select(&idx);
        if config.cond_dropout > 0.0 {
            for ids in cond.ids.iter_mut() {
                if r.random::<f64>() < config.cond_dropout {
                    *ids = gen.vocab.null_ids();
                }
            }
        }
        let (t, eps) = draw_noise(&z0, &gen.schedule, &mut r);
        let full_chain = if config.calib_at_full_denoise {
            Some(generate_latents(&gen.denoiser, &cond, &item_shape, &gen.schedule, None, &mut r)?)
        } else {
            None
        };

        let (ld, lc, grads) = {
            let mut g = Graph::new(&gen.denoiser.store);
            let terms = denoise_terms(&mut g, &gen.denoiser, &z0, &cond, &t, &eps, &gen.schedule)?;
            let z_hat = match &full_chain {
                Some(z) => z.clone(),
                None => estimate_z0_batch(&terms.z_t, g.value(terms.eps_hat), &t, &gen.schedule)?,
            };
            let zh = g.input(z_hat);
            let calib = calib_loss(&mut g, &gen.adapters, zh, &z0)?;
            let (ld, lc) = (g.value(terms.loss).item(), g.value(calib).item());
            let loss = if adapter_stage {
                calib
            } else {
                let weighted = g.scale(calib, lambda);
                g.add(terms.loss, weighted)?
            };
            (ld, lc, g.backward(loss)?)
        };
        if !ld.is_finite() || !lc.is_finite() {
            return Err(Error::Numerical(format!(
                "generator loss became non-finite at step {step} (denoise {ld}, calib {lc}); last record {:?}",
                summary.records.last()
            )));
        }
        opt.lr = if config.two_stage && adapter_stage {
            lr_at(config.lr, step - config.steps, config.adapter_steps)
        } else {
            lr_at(config.lr, step.min(config.steps - 1), config.steps)
        };
        let ids: &[_] = if adapter_stage {
            &adapter_ids
        } else if config.two_stage {
            &denoiser_ids
        } else {
            &all_ids
        };
        opt.step(&mut gen.denoiser.store, &grads, ids);
        if config.ema_decay > 0.0 {
            let d = config.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
            for (avg, &id) in ema.iter_mut().zip(&all_ids) {
                let cur = gen.denoiser.store.get(id).data();
                for (a, &x) in avg.data_mut().iter_mut().zip(cur) {
                    *a = d * *a + (1.0 - d) * x;
                }
            }
        }

        acc_d += ld;
        acc_c += lc;
        acc_n += 1;
        if step >= tail_start {
            tail_d += ld;
            tail_c += lc;
            tail_n += 1;
        }
        if (step + 1) % config.log_every == 0 || step + 1 == total_steps {
            let rec = TrainRecord { step: step + 1, loss_denoise: acc_d / acc_n as f64, loss_calib: acc_c / acc_n as f64, lr: opt.lr };
            on_record(&rec);
            summary.records.push(rec);
            (acc_d, acc_c, acc_n) = (0.0, 0.0, 0);
        }
    }
    if config.ema_decay > 0.0 {
        for (avg, &id) in ema.into_iter().zip(&all_ids) {
            *gen.denoiser.store.get_mut(id) = avg;
        }
    }
    gen.steps_trained = total_steps;
    summary.final_loss = Some(combined_loss(tail_d / tail_n as f64, tail_c / tail_n as f64, config.lambda)?);
    Ok((gen, summary))
}
