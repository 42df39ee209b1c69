//! Downstream evaluation: a small RGB-T segmenter, mIoU, cross-modal
//! consistency of generated triplets, generated-set diversity, and the
//! real / syn / real+syn protocol with ratio and scaling sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{extract_scene_features, SceneGroups};
use crate::corpus::{CorpusConfig, LabelMap, Triplet};
use crate::error::{Error, Result};
use crate::nn::spatial::{pool2, upsample2};
use crate::nn::{AdamW, Conv, GatherMap, Graph, Linear, ParamStore, Var};
use crate::tensor::Tensor;
use crate::util::{derive_seed, rng};

/// A class counts as present in a label map when it covers at least this many pixels.
pub const PRESENCE_MIN_PIXELS: usize = 4;

pub fn is_present(label: &LabelMap, class: u8) -> bool {
    label.count(class) >= PRESENCE_MIN_PIXELS
}

/// Anything that maps triplets to predicted label maps.
pub trait Segmenter {
    fn predict(&self, triplets: &[&Triplet]) -> Result<Vec<LabelMap>>;
}

/// Predicts the ground-truth label.
pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn predict(&self, triplets: &[&Triplet]) -> Result<Vec<LabelMap>> {
        Ok(triplets.iter().map(|t| t.label.clone()).collect())
    }
}

/// Predicts background everywhere.
pub struct BackgroundSegmenter;

impl Segmenter for BackgroundSegmenter {
    fn predict(&self, triplets: &[&Triplet]) -> Result<Vec<LabelMap>> {
        Ok(triplets.iter().map(|t| LabelMap::background(t.height(), t.width())).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { width: 16, steps: 600, batch_size: 16, lr: 3e-3 }
    }
}

/// Two-level encoder-decoder with one skip connection over VIS ⊕ IR input.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub store: ParamStore,
    enc1: Conv,
    enc2: Conv,
    dec: Conv,
    head: Linear,
    pool: Arc<GatherMap>,
    up: Arc<GatherMap>,
}

fn seg_input(triplets: &[&Triplet]) -> Result<Tensor> {
    let (h, w) = (triplets[0].height(), triplets[0].width());
    let mut data = Vec::with_capacity(triplets.len() * h * w * 4);
    for t in triplets {
        if t.height() != h || t.width() != w || t.vis.channels != 3 || t.ir.channels != 1 {
            return Err(Error::Shape(format!("segmenter expects {h}x{w} RGB + thermal triplets")));
        }
        for (rgb, ir) in t.vis.data.chunks(3).zip(&t.ir.data) {
            data.extend_from_slice(rgb);
            data.push(*ir);
        }
    }
    Tensor::new([triplets.len(), h, w, 4], data)
}

impl SegModel {
    /// `n_classes` counts object classes; logits have `n_classes + 1` channels.
    pub fn new(height: usize, width: usize, n_classes: usize, config: SegConfig, seed: u64) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 || config.width == 0 {
            return Err(Error::config("segmenter needs even image sides and a positive width"));
        }
        let mut store = ParamStore::new();
        let r = &mut rng(seed);
        let c = config.width;
        let (h2, w2) = (height / 2, width / 2);
        Ok(Self {
            enc1: Conv::new(&mut store, "seg.enc1", height, width, 4, c, 3, r),
            enc2: Conv::new(&mut store, "seg.enc2", h2, w2, c, 2 * c, 3, r),
            dec: Conv::new(&mut store, "seg.dec", height, width, 3 * c, c, 3, r),
            head: Linear::new(&mut store, "seg.head", c, n_classes + 1, r),
            pool: Arc::new(pool2(height, width, c)),
            up: Arc::new(upsample2(h2, w2, 2 * c)),
            config,
            height,
            width,
            n_classes,
            store,
        })
    }

    /// `[B, h, w, 4] -> [B, h, w, n_classes + 1]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let e1 = self.enc1.forward(g, x)?;
        let e1 = g.gelu(e1);
        let p = g.gather(e1, &self.pool)?;
        let p = g.sum_last(p)?;
        let p = g.scale(p, 0.25);
        let e2 = self.enc2.forward(g, p)?;
        let e2 = g.gelu(e2);
        let u = g.gather(e2, &self.up)?;
        let cat = g.concat(&[e1, u], 3)?;
        let d = self.dec.forward(g, cat)?;
        let d = g.gelu(d);
        self.head.forward(g, d)
    }
}

impl Segmenter for SegModel {
    fn predict(&self, triplets: &[&Triplet]) -> Result<Vec<LabelMap>> {
        let mut out = Vec::with_capacity(triplets.len());
        for chunk in triplets.chunks(32) {
            let mut g = Graph::new(&self.store);
            let x = g.input(seg_input(chunk)?);
            let y = self.logits(&mut g, x)?;
            let k = self.n_classes + 1;
            let pix = self.height * self.width;
            for item in g.value(y).data().chunks(pix * k) {
                let data = item
                    .chunks(k)
                    .map(|row| {
                        let mut best = 0;
                        for (i, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = i;
                            }
                        }
                        best as u8
                    })
                    .collect();
                out.push(LabelMap { height: self.height, width: self.width, data });
            }
        }
        Ok(out)
    }
}

/// Trains a segmenter on the union of `sets` for a fixed number of steps.
pub fn train_segmenter(sets: &[&[Triplet]], n_classes: usize, config: &SegConfig, seed: u64) -> Result<SegModel> {
    let pool: Vec<&Triplet> = sets.iter().flat_map(|s| s.iter()).collect();
    let first = pool.first().ok_or_else(|| Error::data("segmenter training set is empty"))?;
    if config.steps == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::config("segmenter needs positive steps, batch size and learning rate"));
    }
    let mut model = SegModel::new(first.height(), first.width(), n_classes, config.clone(), derive_seed(seed, 1))?;
    let ids = model.store.ids();
    let mut opt = AdamW::new(config.lr);
    let mut r = rng(derive_seed(seed, 2));
    for step in 0..config.steps {
        let batch: Vec<&Triplet> = (0..config.batch_size).map(|_| pool[r.random_range(0..pool.len())]).collect();
        let mut targets = Vec::with_capacity(batch.len() * first.height() * first.width());
        for t in &batch {
            if let Some(&bad) = t.label.data.iter().find(|&&v| v as usize > n_classes) {
                return Err(Error::data(format!("label id {bad} exceeds the {n_classes} configured classes")));
            }
            targets.extend(t.label.data.iter().map(|&v| v as usize));
        }
        let grads = {
            let mut g = Graph::new(&model.store);
            let x = g.input(seg_input(&batch)?);
            let y = model.logits(&mut g, x)?;
            let loss = g.cross_entropy(y, Arc::new(targets))?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::Numerical(format!("segmenter loss became non-finite at step {step}")));
            }
            g.backward(loss)?
        };
        let p = step as f64 / config.steps as f64;
        opt.lr = config.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()));
        opt.step(&mut model.store, &grads, &ids);
    }
    Ok(model)
}

/// Square confusion matrix indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, counts: vec![0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { n, counts: rows.concat() })
    }

    pub fn add(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.data.len() != pred.data.len() {
            return Err(Error::Shape("prediction and ground truth differ in size".into()));
        }
        for (&t, &p) in truth.data.iter().zip(&pred.data) {
            let (t, p) = (t as usize, p as usize);
            if t >= self.n || p >= self.n {
                return Err(Error::data(format!("class id {} outside the {}-class confusion matrix", t.max(p), self.n)));
            }
            self.counts[t * self.n + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class appears in neither truth nor prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.counts[c * self.n + c];
                let row: u64 = self.counts[c * self.n..(c + 1) * self.n].iter().sum();
                let col: u64 = (0..self.n).map(|r| self.counts[r * self.n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let defined: Vec<f64> = self.iou().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// Index 0 is background.
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn miou(model: &dyn Segmenter, test: &[Triplet], n_classes: usize) -> Result<MiouResult> {
    let refs: Vec<&Triplet> = test.iter().collect();
    let preds = model.predict(&refs)?;
    let mut cm = ConfusionMatrix::new(n_classes + 1);
    for (t, p) in test.iter().zip(&preds) {
        cm.add(&t.label, p)?;
    }
    Ok(MiouResult { miou: cm.miou(), per_class_iou: cm.iou() })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if a.len() != b.len() || a.len() < 2 {
        return 0.0;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Fixed threshold on the normalized Sobel magnitude (a step of height `d`
/// has magnitude `d`).
pub const EDGE_THRESHOLD: f64 = 0.1;

/// Normalized Sobel gradient magnitude of one channel of a channels-last plane.
fn sobel(h: usize, w: usize, at: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let px = |y: isize, x: isize| at(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt() / 4.0;
        }
    }
    out
}

/// Pixels whose label differs from the right or lower neighbour.
pub fn label_edges(label: &LabelMap) -> Vec<bool> {
    let (h, w) = (label.height, label.width);
    let mut e = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            if (x + 1 < w && label.get(y, x + 1) != v) || (y + 1 < h && label.get(y + 1, x) != v) {
                e[y * w + x] = true;
            }
        }
    }
    e
}

/// Thresholded Sobel edges of the IR image or of the VIS luminance.
pub fn image_edges(t: &Triplet) -> Vec<bool> {
    let (h, w) = (t.height(), t.width());
    let ir = sobel(h, w, |y, x| t.ir.data[y * w + x]);
    let vis = sobel(h, w, |y, x| t.vis.pixel(y, x).iter().sum::<f64>() / 3.0);
    ir.iter().zip(&vis).map(|(a, b)| a.max(*b) > EDGE_THRESHOLD).collect()
}

/// Counts of `a` pixels lying within one pixel (8-neighbourhood) of a `b` pixel.
fn matched(a: &[bool], b: &[bool], h: usize, w: usize) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for y in 0..h {
        for x in 0..w {
            if !a[y * w + x] {
                continue;
            }
            total += 1;
            let near = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| b[yy * w + xx]));
            if near {
                hit += 1;
            }
        }
    }
    (hit, total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub class_ir_ordering_corr: f64,
    pub boundary_f1: f64,
    pub prompt_recall: f64,
}

impl Consistency {
    pub fn get(&self, metric: ConsistencyMetric) -> f64 {
        match metric {
            ConsistencyMetric::Ordering => self.class_ir_ordering_corr,
            ConsistencyMetric::Boundary => self.boundary_f1,
            ConsistencyMetric::Recall => self.prompt_recall,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMetric {
    Ordering,
    Boundary,
    Recall,
}

impl ConsistencyMetric {
    pub const ALL: [ConsistencyMetric; 3] = [Self::Ordering, Self::Boundary, Self::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ordering => "class_ir_ordering_corr",
            Self::Boundary => "boundary_f1",
            Self::Recall => "prompt_recall",
        }
    }
}

/// Spearman correlation between per-class mean IR (over the label's class
/// regions, pooled across the set) and the configured thermal offsets.
pub fn class_ir_ordering_corr(triplets: &[Triplet], corpus: &CorpusConfig) -> f64 {
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for t in triplets {
        for (&c, &v) in t.label.data.iter().zip(&t.ir.data) {
            if c != 0 {
                let e = sums.entry(c).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let (mut means, mut offsets) = (Vec::new(), Vec::new());
    for (c, (s, n)) in sums {
        if let Some(spec) = corpus.class(c) {
            means.push(s / n as f64);
            offsets.push(spec.ir_offset);
        }
    }
    spearman(&means, &offsets)
}

/// Pooled F1 between label edges and image edges with a one-pixel tolerance.
pub fn boundary_f1(triplets: &[Triplet]) -> f64 {
    let (mut ph, mut pt, mut rh, mut rt) = (0, 0, 0, 0);
    for t in triplets {
        let (h, w) = (t.height(), t.width());
        let le = label_edges(&t.label);
        let ie = image_edges(t);
        let (a, b) = matched(&ie, &le, h, w);
        let (c, d) = matched(&le, &ie, h, w);
        ph += a;
        pt += b;
        rh += c;
        rt += d;
    }
    if pt == 0 || rt == 0 {
        return 0.0;
    }
    let p = ph as f64 / pt as f64;
    let r = rh as f64 / rt as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of prompted classes present in the label map, pooled over the set.
pub fn prompt_recall(triplets: &[Triplet], corpus: &CorpusConfig) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in triplets {
        for name in &t.prompt.class_names {
            if let Some(id) = corpus.class_id_by_name(name) {
                total += 1;
                hit += is_present(&t.label, id) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn consistency_metrics(triplets: &[Triplet], corpus: &CorpusConfig) -> Result<Consistency> {
    if triplets.is_empty() {
        return Err(Error::data("consistency metrics need at least one triplet"));
    }
    Ok(Consistency {
        class_ir_ordering_corr: class_ir_ordering_corr(triplets, corpus),
        boundary_f1: boundary_f1(triplets),
        prompt_recall: prompt_recall(triplets, corpus),
    })
}

/// The set with label maps permuted across triplets; images and prompts stay.
pub fn shuffle_labels<R: Rng + ?Sized>(triplets: &[Triplet], rng: &mut R) -> Vec<Triplet> {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(rng);
    triplets
        .iter()
        .zip(&order)
        .map(|(t, &j)| Triplet { label: triplets[j].label.clone(), ..t.clone() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullComparison {
    pub observed: f64,
    pub null_mean: f64,
    pub null_std: f64,
    /// `(1 + #{null ≥ observed}) / (1 + shuffles)`.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyNull {
    pub shuffles: usize,
    pub metrics: BTreeMap<String, NullComparison>,
}

impl ConsistencyNull {
    pub fn get(&self, metric: ConsistencyMetric) -> &NullComparison {
        &self.metrics[metric.name()]
    }
}

/// Compares each consistency metric with its label-shuffled null distribution.
pub fn permutation_null(triplets: &[Triplet], corpus: &CorpusConfig, shuffles: usize, seed: u64) -> Result<ConsistencyNull> {
    permutation_null_pooled(&[triplets], corpus, shuffles, seed)
}

/// Permutation test on the mean of each metric over several generated sets
/// (for instance one per seed). Every shuffle permutes labels within each
/// set independently.
pub fn permutation_null_pooled(
    sets: &[&[Triplet]],
    corpus: &CorpusConfig,
    shuffles: usize,
    seed: u64,
) -> Result<ConsistencyNull> {
    if shuffles == 0 || sets.is_empty() {
        return Err(Error::config("permutation null needs at least one set and one shuffle"));
    }
    let pooled = |cs: &[Consistency], m: ConsistencyMetric| cs.iter().map(|c| c.get(m)).sum::<f64>() / cs.len() as f64;
    let observed: Vec<Consistency> = sets.iter().map(|s| consistency_metrics(s, corpus)).collect::<Result<_>>()?;
    let mut r = rng(seed);
    let mut null: Vec<Vec<Consistency>> = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        null.push(
            sets.iter()
                .map(|s| consistency_metrics(&shuffle_labels(s, &mut r), corpus))
                .collect::<Result<_>>()?,
        );
    }
    let metrics = ConsistencyMetric::ALL
        .iter()
        .map(|&m| {
            let xs: Vec<f64> = null.iter().map(|cs| pooled(cs, m)).collect();
            let (mean, std) = mean_std(&xs);
            let obs = pooled(&observed, m);
            let ge = xs.iter().filter(|&&x| x >= obs).count();
            let cmp = NullComparison {
                observed: obs,
                null_mean: mean,
                null_std: std,
                p_value: (1 + ge) as f64 / (1 + shuffles) as f64,
            };
            (m.name().to_owned(), cmp)
        })
        .collect();
    Ok(ConsistencyNull { shuffles, metrics })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    /// Shannon entropy (bits) of the predicted scene-group histogram.
    pub scene_entropy: f64,
    pub class_coverage: f64,
    /// Fraction of triplets containing at least one class with base
    /// frequency at most 0.1.
    pub rare_class_rate: f64,
    pub scene_histogram: Vec<usize>,
}

pub const RARE_FREQUENCY: f64 = 0.1;

pub fn diversity_metrics(triplets: &[Triplet], scenes: &SceneGroups, corpus: &CorpusConfig) -> Result<Diversity> {
    if triplets.is_empty() {
        return Err(Error::data("diversity metrics need at least one triplet"));
    }
    let mut hist = vec![0usize; scenes.k];
    for t in triplets {
        hist[scenes.predict(&extract_scene_features(t)) - 1] += 1;
    }
    let n = triplets.len() as f64;
    let scene_entropy = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    let covered = corpus
        .classes
        .iter()
        .filter(|c| triplets.iter().any(|t| is_present(&t.label, c.class_id)))
        .count();
    let rare: Vec<u8> = corpus.classes.iter().filter(|c| c.base_frequency <= RARE_FREQUENCY).map(|c| c.class_id).collect();
    let with_rare = triplets.iter().filter(|t| rare.iter().any(|&c| is_present(&t.label, c))).count();
    Ok(Diversity {
        scene_entropy: scene_entropy.max(0.0),
        class_coverage: covered as f64 / corpus.classes.len().max(1) as f64,
        rare_class_rate: with_rare as f64 / n,
        scene_histogram: hist,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Real,
    Syn,
    RealSyn,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Real => "real",
            Regime::Syn => "syn",
            Regime::RealSyn => "real+syn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Regime::Real),
            "syn" => Ok(Regime::Syn),
            "real+syn" | "real_syn" => Ok(Regime::RealSyn),
            _ => Err(Error::config(format!("unknown regime {s:?} (expected real, syn or real+syn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub regime: Regime,
    pub seed: u64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub regime: Regime,
    pub mean: f64,
    pub std: f64,
    pub cells: Vec<ProtocolCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolReport {
    pub fn row(&self, regime: Regime) -> Option<&ProtocolRow> {
        self.rows.iter().find(|r| r.regime == regime)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("regime      mIoU mean   std     per-seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.cells.iter().map(|c| format!("{:.4}", c.miou)).collect();
            let _ = writeln!(s, "{:<10}  {:.4}      {:.4}  {}", r.regime.name(), r.mean, r.std, seeds.join(" "));
        }
        s
    }
}

/// Trains one segmenter per (regime, seed) and scores it on `test`.
pub fn run_protocol(
    real: &[Triplet],
    syn: &[Triplet],
    test: &[Triplet],
    regimes: &[Regime],
    seeds: &[u64],
    n_classes: usize,
    config: &SegConfig,
) -> Result<ProtocolReport> {
    if seeds.is_empty() || regimes.is_empty() {
        return Err(Error::config("protocol needs at least one regime and one seed"));
    }
    if test.is_empty() {
        return Err(Error::data("protocol needs a non-empty test set"));
    }
    let mut rows = Vec::new();
    for &regime in regimes {
        let sets: Vec<&[Triplet]> = match regime {
            Regime::Real => vec![real],
            Regime::Syn => vec![syn],
            Regime::RealSyn => vec![real, syn],
        };
        let mut cells = Vec::new();
        for &seed in seeds {
            let model = train_segmenter(&sets, n_classes, config, seed)?;
            let m = miou(&model, test, n_classes)?;
            cells.push(ProtocolCell { regime, seed, miou: m.miou, per_class_iou: m.per_class_iou });
        }
        let (mean, std) = mean_std(&cells.iter().map(|c| c.miou).collect::<Vec<_>>());
        rows.push(ProtocolRow { regime, mean, std, cells });
    }
    Ok(ProtocolReport { rows })
}

/// Deterministic subsample of `ceil(ratio · n)` triplets (at least one).
pub fn subsample(real: &[Triplet], ratio: f64, seed: u64) -> Result<Vec<Triplet>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let n = ((real.len() as f64 * ratio).ceil() as usize).clamp(1, real.len().max(1));
    let mut idx: Vec<usize> = (0..real.len()).collect();
    idx.shuffle(&mut rng(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| real[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Real-data ratio or synthetic multiple.
    pub setting: f64,
    pub real: Option<(f64, f64)>,
    pub real_syn: (f64, f64),
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn render(&self) -> String {
        let mut s = format!("{:<10}  real mIoU        real+syn mIoU\n", self.kind);
        for r in &self.rows {
            let real = r.real.map_or_else(|| "-".to_owned(), |(m, sd)| format!("{m:.4} ± {sd:.4}"));
            let _ = writeln!(s, "{:<10}  {:<15}  {:.4} ± {:.4}", r.setting, real, r.real_syn.0, r.real_syn.1);
        }
        s
    }
}

/// For each ratio, subsamples the real set, obtains a synthetic set from
/// `make_syn(subset, seed)` and compares real against real+syn.
pub fn ratio_sweep(
    real: &[Triplet],
    test: &[Triplet],
    ratios: &[f64],
    seeds: &[u64],
    n_classes: usize,
    config: &SegConfig,
    mut make_syn: impl FnMut(&[Triplet], u64) -> Result<Vec<Triplet>>,
) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        let (mut r_scores, mut rs_scores) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let subset = subsample(real, ratio, derive_seed(seed, 17))?;
            let syn = make_syn(&subset, seed)?;
            let rep = run_protocol(&subset, &syn, test, &[Regime::Real, Regime::RealSyn], &[seed], n_classes, config)?;
            r_scores.push(rep.rows[0].mean);
            rs_scores.push(rep.rows[1].mean);
        }
        rows.push(SweepRow { setting: ratio, real: Some(mean_std(&r_scores)), real_syn: mean_std(&rs_scores), per_seed: rs_scores });
    }
    Ok(SweepReport { kind: "ratio".into(), rows })
}

/// For each multiple `k`, obtains `make_syn(k, seed)` and scores real+syn.
pub fn scaling_sweep(
    real: &[Triplet],
    test: &[Triplet],
    multiples: &[usize],
    seeds: &[u64],
    n_classes: usize,
    config: &SegConfig,
    mut make_syn: impl FnMut(usize, u64) -> Result<Vec<Triplet>>,
) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &k in multiples {
        let mut scores = Vec::new();
        for &seed in seeds {
            let syn = make_syn(k, seed)?;
            let rep = run_protocol(real, &syn, test, &[Regime::RealSyn], &[seed], n_classes, config)?;
            scores.push(rep.rows[0].mean);
        }
        rows.push(SweepRow { setting: k as f64, real: None, real_syn: mean_std(&scores), per_seed: scores });
    }
    Ok(SweepReport { kind: "scale".into(), rows })
}

/// Everything reported about one generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub consistency: Consistency,
    pub diversity: Diversity,
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    pub fn render(&self, corpus: &CorpusConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}  seeds {:?}", self.config_hash, self.seeds);
        let _ = writeln!(s, "mIoU                    {:.4}", self.miou);
        for (i, iou) in self.per_class_iou.iter().enumerate() {
            let name = if i == 0 { "background" } else { corpus.class_name(i as u8).unwrap_or("?") };
            let v = iou.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "  {name:<20}  {v}");
        }
        let c = &self.consistency;
        let _ = writeln!(s, "class_ir_ordering_corr  {:.4}", c.class_ir_ordering_corr);
        let _ = writeln!(s, "boundary_f1             {:.4}", c.boundary_f1);
        let _ = writeln!(s, "prompt_recall           {:.4}", c.prompt_recall);
        let d = &self.diversity;
        let _ = writeln!(s, "scene_entropy           {:.4}", d.scene_entropy);
        let _ = writeln!(s, "class_coverage          {:.4}", d.class_coverage);
        let _ = writeln!(s, "rare_class_rate         {:.4}", d.rare_class_rate);
        s
    }
}
