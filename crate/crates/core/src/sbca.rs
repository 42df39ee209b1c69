//! Scene-balanced class-aware sampling.
//!
//! Every scene group gets the same probability budget `1/K`. Inside a group
//! the budget is split in proportion to each sample's rarity
//! `r_i = ε + max_{c ∈ C_i} N_c^{-α}`, where `N_c` counts the training samples
//! that contain class `c`. Samples without any object class get `r_i = ε`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Number of samples containing each class; absent classes are not listed.
    pub counts: BTreeMap<u8, usize>,
    pub alpha: f64,
    pub epsilon_floor: f64,
}

impl ClassStats {
    /// Rarity weight `w_c = N_c^{-α}`, or `None` for a class never seen.
    pub fn rarity(&self, class: u8) -> Option<f64> {
        self.counts.get(&class).map(|&n| (n as f64).powf(-self.alpha))
    }
}

/// Counts, per class, the samples whose class list contains it.
pub fn compute_class_stats(class_lists: &[Vec<u8>], alpha: f64, epsilon_floor: f64) -> Result<ClassStats> {
    if class_lists.is_empty() {
        return Err(Error::data("cannot compute class statistics of an empty sample set"));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    if !epsilon_floor.is_finite() || epsilon_floor < 0.0 {
        return Err(Error::config(format!("epsilon floor must be finite and non-negative, got {epsilon_floor}")));
    }
    let mut counts = BTreeMap::new();
    for list in class_lists {
        let mut seen = list.clone();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    Ok(ClassStats { counts, alpha, epsilon_floor })
}

pub fn class_stats_from_manifest(manifest: &DatasetManifest, alpha: f64, epsilon_floor: f64) -> Result<ClassStats> {
    let lists: Vec<Vec<u8>> = manifest.entries.iter().map(|e| e.classes.clone()).collect();
    compute_class_stats(&lists, alpha, epsilon_floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub sample: usize,
    /// 1-based scene group.
    pub group: usize,
    pub r: f64,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeightTable {
    pub k: usize,
    pub rows: Vec<WeightRow>,
}

impl SamplingWeightTable {
    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.w).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `sample_id,group_id,r,W` with one line per sample; `ids` names the samples.
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("sample_id,group_id,r,W\n");
        for row in &self.rows {
            let id = ids.get(row.sample).cloned().unwrap_or_else(|| row.sample.to_string());
            writeln!(out, "{},{},{:e},{:e}", id, row.group, row.r, row.w).expect("write to string");
        }
        out
    }

    /// A table giving every sample the same weight.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::data("cannot build a sampling table over zero samples"));
        }
        let w = 1.0 / n as f64;
        Ok(Self { k: 1, rows: (0..n).map(|i| WeightRow { sample: i, group: 1, r: 1.0, w }).collect() })
    }
}

/// Evaluates the hierarchical weights for samples with 1-based `groups` in
/// `1..=k` and the given class lists.
pub fn compute_weights(
    stats: &ClassStats,
    groups: &[usize],
    k: usize,
    class_lists: &[Vec<u8>],
) -> Result<SamplingWeightTable> {
    if groups.len() != class_lists.len() {
        return Err(Error::config(format!(
            "{} group assignments for {} class lists",
            groups.len(),
            class_lists.len()
        )));
    }
    if k == 0 {
        return Err(Error::config("number of scene groups must be at least 1"));
    }
    let mut r = Vec::with_capacity(groups.len());
    for (i, list) in class_lists.iter().enumerate() {
        let mut best: Option<f64> = None;
        for &c in list {
            let w = stats
                .rarity(c)
                .ok_or_else(|| Error::config(format!("sample {i} lists class {c}, which has no count")))?;
            best = Some(best.map_or(w, |b| b.max(w)));
        }
        r.push(stats.epsilon_floor + best.unwrap_or(0.0));
    }
    let mut group_total = vec![0.0; k + 1];
    for (i, &g) in groups.iter().enumerate() {
        if g == 0 || g > k {
            return Err(Error::config(format!("sample {i} is in group {g}, outside 1..={k}")));
        }
        group_total[g] += r[i];
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (i, &g) in groups.iter().enumerate() {
        if group_total[g] <= 0.0 {
            return Err(Error::config(format!("scene group {g} has zero total rarity")));
        }
        rows.push(WeightRow { sample: i, group: g, r: r[i], w: r[i] / group_total[g] / k as f64 });
    }
    Ok(SamplingWeightTable { k, rows })
}

/// I.i.d. draws with replacement, `P(i) = W_i`.
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(table: &SamplingWeightTable) -> Result<Self> {
        let dist = WeightedIndex::new(table.weights())
            .map_err(|e| Error::config(format!("invalid sampling weights: {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok((0..batch_size).map(|_| self.dist.sample(rng)).collect())
    }
}

pub fn weighted_sample<R: Rng + ?Sized>(table: &SamplingWeightTable, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    WeightedSampler::new(table)?.sample(batch_size, rng)
}
