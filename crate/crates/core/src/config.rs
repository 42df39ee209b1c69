//! The complete, serializable configuration of a run, with two presets.

use serde::{Deserialize, Serialize};

use crate::codecs::CodecConfig;
use crate::corpus::CorpusConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::eval::{Regime, SegConfig};
use crate::generator::{GeneratorConfig, SbcaConfig, ScheduleConfig};
use crate::util::json_digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Image size, scene types and classes of the procedural world.
    pub world: CorpusConfig,
    /// Training (few-shot) split size and seed.
    pub n_samples: usize,
    pub seed: u64,
    /// Held-out test split, regenerated on demand from its own seed.
    pub n_test: usize,
    pub test_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub segmenter: SegConfig,
    /// Label shuffles for the consistency null.
    pub null_shuffles: usize,
    /// Real-data ratios for the ratio sweep.
    pub ratios: Vec<f64>,
    /// Synthetic-to-real multiples for the scaling sweep.
    pub multiples: Vec<usize>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Synthetic set size as a multiple of the real set, where one is needed.
    pub syn_multiple: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub codec: CodecConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    /// 64×64 images, 8×8×4 latents per modality, T = 200, a 4-block width-128
    /// denoiser over 1×1 patches.
    fn default() -> Self {
        let world = CorpusConfig::with_size(64, 64);
        Self {
            codec: CodecConfig { height: 64, width: 64, depth: 3, n_classes: world.n_classes(), ..CodecConfig::default() },
            corpus: CorpusSection { world, n_samples: 342, seed: 1, n_test: 142, test_seed: 1001 },
            generator: GeneratorConfig::default(),
            eval: EvalSection {
                regimes: vec![Regime::Real, Regime::Syn, Regime::RealSyn],
                seeds: vec![1, 2, 3],
                segmenter: SegConfig::default(),
                null_shuffles: 200,
                ratios: vec![0.25, 0.5, 1.0],
                multiples: vec![1, 10, 20],
                alphas: vec![0.0, 0.5, 1.0],
                lambdas: vec![0.0, 0.1, 1.0],
                syn_multiple: 1,
            },
        }
    }
}

impl RunConfig {
    /// The desk-scale reference: 32×32 images, 8×8×4 latents per modality,
    /// T = 50, a 2-block width-64 denoiser over 2×2 patches.
    pub fn tiny() -> Self {
        let world = CorpusConfig::with_size(32, 32);
        let base = Self::default();
        Self {
            codec: CodecConfig {
                height: 32,
                width: 32,
                depth: 2,
                hidden: 64,
                steps: 2000,
                n_classes: world.n_classes(),
                ..CodecConfig::default()
            },
            corpus: CorpusSection { world, ..base.corpus },
            generator: GeneratorConfig {
                schedule: ScheduleConfig { kind: ScheduleKind::Linear, t_steps: 50, beta_min: 1e-3, beta_max: 0.2 },
                width: 64,
                blocks: 2,
                heads: 4,
                mlp_ratio: 2,
                patch: 2,
                steps: 10000,
                batch_size: 16,
                lr: 3e-3,
                sbca: SbcaConfig { enabled: true, alpha: 0.5, epsilon_floor: 0.05, k: 4 },
                ..GeneratorConfig::default()
            },
            eval: EvalSection { multiples: vec![1, 10], ..base.eval },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "reference" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::config(format!("unknown preset {name:?} (expected default or tiny)"))),
        }
    }

    /// Hash over every semantically meaningful field (the log interval is not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.generator.log_every = 0;
        json_digest(&c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.corpus.world;
        w.validate()?;
        self.codec.validate()?;
        self.generator.validate()?;
        if (self.codec.height, self.codec.width) != (w.height, w.width) {
            return Err(Error::config(format!(
                "codec size {}x{} differs from corpus size {}x{}",
                self.codec.height, self.codec.width, w.height, w.width
            )));
        }
        if self.codec.n_classes != w.n_classes() {
            return Err(Error::config("codec class count differs from the corpus"));
        }
        let (lh, lw, _) = self.codec.latent_shape();
        let p = self.generator.patch;
        if p == 0 || lh % p != 0 || lw % p != 0 {
            return Err(Error::config(format!("patch {p} does not tile the {lh}x{lw} latent")));
        }
        if self.corpus.n_samples == 0 || self.corpus.n_test == 0 {
            return Err(Error::config("corpus splits must be non-empty"));
        }
        if self.generator.sbca.enabled && self.generator.sbca.k > self.corpus.n_samples {
            return Err(Error::config("more scene groups than training samples"));
        }
        let e = &self.eval;
        if e.seeds.is_empty() || e.regimes.is_empty() || e.null_shuffles == 0 || e.syn_multiple == 0 {
            return Err(Error::config("evaluation needs seeds, regimes, shuffles and a positive synthetic multiple"));
        }
        if e.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::config("sweep ratios must lie in (0, 1]"));
        }
        if e.multiples.contains(&0) {
            return Err(Error::config("sweep multiples must be positive"));
        }
        if e.segmenter.steps == 0 || e.segmenter.batch_size == 0 || e.segmenter.width == 0 || !(e.segmenter.lr > 0.0) {
            return Err(Error::config("segmenter budget must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::tiny();
        assert_eq!(a.hash(), RunConfig::tiny().hash());
        let mut b = a.clone();
        b.generator.lambda = 0.25;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.generator.log_every = 7;
        assert_eq!(a.hash(), c.hash());
        let mut d = a.clone();
        d.corpus.world.classes[4].base_frequency = 0.09;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn json_round_trip() {
        let a = RunConfig::tiny();
        let s = serde_json::to_string(&a).unwrap();
        let b: RunConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let mut c = RunConfig::tiny();
        c.codec.height = 64;
        assert!(c.validate().is_err());
        let mut c = RunConfig::tiny();
        c.generator.patch = 3;
        assert!(c.validate().is_err());
    }
}
