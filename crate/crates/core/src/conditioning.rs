//! Text and scene conditioning.
//!
//! Prompts are tokenized over a closed vocabulary built from the corpus
//! configuration (scene-description words, one token per class name and a few
//! reserved tokens) and embedded with a table trained together with the
//! denoiser. Training samples are grouped into `K` scene groups by k-means over
//! colour and intensity histograms, and a learned embedding of the group is
//! appended to the token sequence as its final condition token.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, PromptRecord, Triplet};
use crate::error::{Error, Result};
use crate::nn::{GatherMap, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;
use crate::util::rng;

pub const PAD: &str = "[PAD]";
pub const NULL: &str = "[NULL]";
pub const SEP: &str = "[SEP]";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
    /// Every encoded prompt is padded to this many tokens.
    pub max_len: usize,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const NULL_ID: u32 = 1;
    pub const SEP_ID: u32 = 2;

    /// Reserved tokens, then the lower-cased words of every scene description,
    /// then the class names (each a single token even if it contains spaces).
    pub fn from_config(config: &CorpusConfig) -> Self {
        let mut tokens: Vec<String> = vec![PAD.into(), NULL.into(), SEP.into()];
        let mut longest = 0;
        for scene in &config.scenes {
            let words = split_words(&scene.description);
            longest = longest.max(words.len());
            for w in words {
                if !tokens.contains(&w) {
                    tokens.push(w);
                }
            }
        }
        for class in &config.classes {
            if !tokens.contains(&class.name) {
                tokens.push(class.name.clone());
            }
        }
        Self::from_tokens(tokens, longest + 1 + config.n_classes())
    }

    pub fn from_tokens(tokens: Vec<String>, max_len: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index, max_len }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_tokens(self.tokens, self.max_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token ids of `prompt`, padded with `[PAD]` to `max_len`: scene words,
    /// then `[SEP]` and the class tokens when the prompt names any class.
    pub fn encode(&self, prompt: &PromptRecord) -> Result<Vec<u32>> {
        let words = split_words(&prompt.scene_desc);
        if words.is_empty() && prompt.class_names.is_empty() {
            return Err(Error::data("cannot encode an empty prompt"));
        }
        let lookup = |t: &str| self.id(t).ok_or_else(|| Error::data(format!("token {t:?} is not in the vocabulary")));
        let mut ids = words.iter().map(|w| lookup(w)).collect::<Result<Vec<_>>>()?;
        if !prompt.class_names.is_empty() {
            ids.push(Self::SEP_ID);
            for c in &prompt.class_names {
                ids.push(lookup(c)?);
            }
        }
        if ids.len() > self.max_len {
            return Err(Error::data(format!("prompt has {} tokens, more than the limit of {}", ids.len(), self.max_len)));
        }
        ids.resize(self.max_len, Self::PAD_ID);
        Ok(ids)
    }

    /// The unconditional token sequence.
    pub fn null_ids(&self) -> Vec<u32> {
        let mut ids = vec![Self::PAD_ID; self.max_len];
        ids[0] = Self::NULL_ID;
        ids
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.trim()
        .trim_end_matches('.')
        .split_whitespace()
        .map(str::to_lowercase)
        .collect()
}

/// Learned token and scene embedding tables living in the denoiser's store.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub text_table: ParamId,
    pub scene_table: ParamId,
    pub dim: usize,
    pub k: usize,
    pub seq_len: usize,
}

impl Conditioner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, vocab: &Vocabulary, k: usize, dim: usize, rng: &mut R) -> Self {
        let text_table = store.add("cond.text", Tensor::randn([vocab.len(), dim], 0.5, rng));
        let scene_table = store.add("cond.scene", Tensor::randn([k, dim], 0.5, rng));
        Self { text_table, scene_table, dim, k, seq_len: vocab.max_len }
    }

    /// Number of condition tokens: the text tokens plus the scene token.
    pub fn n_tokens(&self) -> usize {
        self.seq_len + 1
    }

    /// Text embeddings `[B, L, D]` for padded id sequences.
    pub fn text_tokens(&self, g: &mut Graph, ids: &[Vec<u32>]) -> Result<Var> {
        let table = g.param(self.text_table)?;
        let vocab = g.shape(table)[0];
        let (b, l, d) = (ids.len(), self.seq_len, self.dim);
        let mut index = Vec::with_capacity(b * l * d);
        for seq in ids {
            if seq.len() != l {
                return Err(Error::Shape(format!("token sequence of length {} where {l} is expected", seq.len())));
            }
            for &t in seq {
                if t as usize >= vocab {
                    return Err(Error::data(format!("token id {t} outside a vocabulary of {vocab}")));
                }
                index.extend((0..d).map(|j| t * d as u32 + j as u32));
            }
        }
        // The whole table is one gather item, so the result has a leading 1.
        let y = g.gather(table, &Arc::new(GatherMap::new(vocab * d, vec![b, l, d], index)))?;
        g.reshape(y, &[b, l, d])
    }

    /// Scene embeddings `[B, 1, D]` for 1-based scene group ids.
    pub fn scene_tokens(&self, g: &mut Graph, scenes: &[usize]) -> Result<Var> {
        let table = g.param(self.scene_table)?;
        let d = self.dim;
        let mut index = Vec::with_capacity(scenes.len() * d);
        for &s in scenes {
            if s == 0 || s > self.k {
                return Err(Error::config(format!("scene id {s} outside 1..={}", self.k)));
            }
            index.extend((0..d).map(|j| ((s - 1) * d + j) as u32));
        }
        let y = g.gather(table, &Arc::new(GatherMap::new(self.k * d, vec![scenes.len(), 1, d], index)))?;
        g.reshape(y, &[scenes.len(), 1, d])
    }

    /// `[z_T; e_s]` for a batch: `[B, L + 1, D]`.
    pub fn forward(&self, g: &mut Graph, ids: &[Vec<u32>], scenes: &[usize]) -> Result<Var> {
        if ids.len() != scenes.len() {
            return Err(Error::Shape(format!("{} prompts but {} scene ids", ids.len(), scenes.len())));
        }
        let text = self.text_tokens(g, ids)?;
        let scene = self.scene_tokens(g, scenes)?;
        g.concat(&[text, scene], 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `[L, D]`
    pub token_embeddings: Tensor,
    /// `[D]`
    pub scene_token: Tensor,
    /// `[L + 1, D]`, the token embeddings with the scene token appended.
    pub combined: Tensor,
}

pub fn encode_text(prompt: &PromptRecord, vocab: &Vocabulary, store: &ParamStore, cond: &Conditioner) -> Result<Tensor> {
    let ids = vocab.encode(prompt)?;
    let mut g = Graph::new(store);
    let v = cond.text_tokens(&mut g, &[ids])?;
    g.value(v).clone().reshape([cond.seq_len, cond.dim])
}

pub fn build_condition(
    prompt: &PromptRecord,
    scene_id: usize,
    vocab: &Vocabulary,
    store: &ParamStore,
    cond: &Conditioner,
) -> Result<ConditionBundle> {
    let ids = vocab.encode(prompt)?;
    let mut g = Graph::new(store);
    let text = cond.text_tokens(&mut g, std::slice::from_ref(&ids))?;
    let scene = cond.scene_tokens(&mut g, &[scene_id])?;
    let combined = cond.forward(&mut g, &[ids], &[scene_id])?;
    Ok(ConditionBundle {
        token_embeddings: g.value(text).clone().reshape([cond.seq_len, cond.dim])?,
        scene_token: g.value(scene).clone().reshape([cond.dim])?,
        combined: g.value(combined).clone().reshape([cond.seq_len + 1, cond.dim])?,
    })
}

const HIST_BINS: usize = 8;

/// Length of [`extract_scene_features`] vectors.
pub const SCENE_FEATURE_DIM: usize = 3 * HIST_BINS + HIST_BINS + 4;

/// Per-channel VIS histograms, an IR histogram (all normalized to unit mass),
/// then the mean background colour and mean background IR.
pub fn extract_scene_features(t: &Triplet) -> Vec<f64> {
    let n = t.label.data.len();
    let mut f = vec![0.0; SCENE_FEATURE_DIM];
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    let unit = 1.0 / n.max(1) as f64;
    for i in 0..n {
        for ch in 0..3 {
            f[ch * HIST_BINS + bin(t.vis.data[i * 3 + ch])] += unit;
        }
        f[3 * HIST_BINS + bin(t.ir.data[i])] += unit;
    }
    let mut bg = [0.0; 4];
    let mut count = 0usize;
    for i in 0..n {
        if t.label.data[i] == 0 {
            for ch in 0..3 {
                bg[ch] += t.vis.data[i * 3 + ch];
            }
            bg[3] += t.ir.data[i];
            count += 1;
        }
    }
    if count > 0 {
        for (dst, v) in f[4 * HIST_BINS..].iter_mut().zip(bg) {
            *dst = v / count as f64;
        }
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGroups {
    pub k: usize,
    /// 1-based group of every clustered sample.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub feature_kind: String,
}

impl SceneGroups {
    /// 1-based group of the nearest centroid.
    pub fn predict(&self, feature: &[f64]) -> usize {
        nearest(&self.centroids, feature).0 + 1
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &g in &self.assignment {
            sizes[g - 1] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. A cluster left empty is reseeded
/// with the point farthest from its current centroid.
pub fn cluster_scenes(features: &[Vec<f64>], k: usize, seed: u64) -> Result<SceneGroups> {
    let n = features.len();
    if k == 0 {
        return Err(Error::config("number of scene groups must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("cannot form {k} scene groups from {n} samples")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("scene features differ in length".into()));
    }
    let mut rng = rng(seed);

    let mut centroids = vec![features[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = features.iter().map(|f| nearest(&centroids, f).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // Every point coincides with a centroid; the repair step below
            // keeps the resulting duplicate centroid from staying empty.
            rng.random_range(0..n)
        };
        centroids.push(features[next].clone());
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let j = nearest(&centroids, f).0;
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        repair_empty(features, &mut centroids, &mut assign);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in features.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        for j in 0..k {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    Ok(SceneGroups {
        k,
        assignment: assign.iter().map(|a| a + 1).collect(),
        centroids,
        feature_kind: format!("vis_hist{HIST_BINS}x3+ir_hist{HIST_BINS}+background_mean4"),
    })
}

fn repair_empty(features: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        // Farthest point among clusters that can spare one.
        let far = (0..features.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&features[a], &centroids[assign[a]]).total_cmp(&sq_dist(&features[b], &centroids[assign[b]]))
            })
            .expect("k <= n leaves a cluster with two or more points");
        centroids[empty] = features[far].clone();
        assign[far] = empty;
    }
}

/// Scene features of every triplet followed by k-means into `k` groups.
pub fn group_triplets(triplets: &[Triplet], k: usize, seed: u64) -> Result<SceneGroups> {
    let feats: Vec<Vec<f64>> = triplets.iter().map(extract_scene_features).collect();
    cluster_scenes(&feats, k, seed)
}
