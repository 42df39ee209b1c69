use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;

use super::{io, CorpusConfig, DatasetManifest, Image, LabelMap, PromptRecord, SceneSpec, ShapeFamily, Triplet};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng};

/// One shape to rasterize. Coordinates are in pixels; the shape covers pixel
/// centres within the half-extents around `(cy, cx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub class_id: u8,
    pub family: ShapeFamily,
    pub cy: f64,
    pub cx: f64,
    pub half_h: f64,
    pub half_w: f64,
}

impl Placement {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.half_h;
        let dx = (x as f64 + 0.5 - self.cx) / self.half_w;
        match self.family {
            ShapeFamily::Ellipse => dy * dy + dx * dx <= 1.0,
            ShapeFamily::Rectangle | ShapeFamily::ThinBar => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }

    fn area(&self) -> f64 {
        let box_area = 4.0 * self.half_h * self.half_w;
        match self.family {
            ShapeFamily::Ellipse => box_area * std::f64::consts::FRAC_PI_4,
            _ => box_area,
        }
    }
}

/// Draws each configured class independently with its base frequency and
/// gives it a random in-bounds geometry. Placements come back ordered by
/// decreasing area, which is also the occlusion order (later wins), so a
/// smaller shape is never fully hidden by a larger one.
pub fn sample_placements<R: Rng + ?Sized>(config: &CorpusConfig, rng: &mut R) -> Vec<Placement> {
    let (h, w) = (config.height as f64, config.width as f64);
    let s = h.min(w);
    let mut out = Vec::new();
    for class in &config.classes {
        if rng.random::<f64>() >= class.base_frequency {
            continue;
        }
        let (hh, hw) = match class.shape_family {
            ShapeFamily::Rectangle => (rng.random_range(0.08..0.18) * s, rng.random_range(0.10..0.22) * s),
            ShapeFamily::Ellipse => (rng.random_range(0.10..0.17) * s, rng.random_range(0.06..0.10) * s),
            ShapeFamily::ThinBar => (rng.random_range(0.20..0.35) * s, rng.random_range(0.03..0.05) * s),
        };
        let (hh, hw) = (hh.max(1.0), hw.max(1.0));
        out.push(Placement {
            class_id: class.class_id,
            family: class.shape_family,
            cy: rng.random_range(hh..=h - hh),
            cx: rng.random_range(hw..=w - hw),
            half_h: hh,
            half_w: hw,
        });
    }
    out.sort_by(|a, b| b.area().total_cmp(&a.area()));
    out
}

/// Rasterizes `placements` (in order; later shapes occlude earlier ones) over
/// a background of `scene` and renders the VIS and IR images with per-pixel
/// Gaussian noise.
pub fn render_triplet<R: Rng + ?Sized>(
    config: &CorpusConfig,
    scene_id: usize,
    placements: &[Placement],
    rng: &mut R,
) -> Result<Triplet> {
    let (h, w) = (config.height, config.width);
    if h < 16 || w < 16 {
        return Err(Error::DegenerateInput(format!("image size {h}x{w} is too small to place shapes")));
    }
    let scene = scene_by_id(config, scene_id)?;
    for p in placements {
        if config.class(p.class_id).is_none() {
            return Err(Error::config(format!("placement refers to unknown class {}", p.class_id)));
        }
    }

    let mut label = LabelMap::background(h, w);
    for p in placements {
        for y in 0..h {
            for x in 0..w {
                if p.covers(y, x) {
                    label.data[y * w + x] = p.class_id;
                }
            }
        }
    }

    // One colour per image for the background and one per placed instance.
    let bg = jitter(&scene.background_palette.mean, &scene.background_palette.var, rng);
    let mut class_colour = vec![bg.clone(); config.n_classes() + 1];
    for p in placements {
        let spec = config.class(p.class_id).expect("checked above");
        class_colour[p.class_id as usize] = jitter(&spec.vis_palette.mean, &spec.vis_palette.var, rng);
    }

    let vis_noise = Normal::new(0.0, config.vis_noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let ir_noise = Normal::new(0.0, config.ir_noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut vis = Image::filled(h, w, 3, 0.0);
    let mut ir = Image::filled(h, w, 1, 0.0);
    for (i, &c) in label.data.iter().enumerate() {
        let colour = &class_colour[c as usize];
        for ch in 0..3 {
            vis.data[i * 3 + ch] = (colour[ch] + vis_noise.sample(rng)).clamp(0.0, 1.0);
        }
        let offset = if c == 0 { 0.0 } else { config.class(c).expect("label from config").ir_offset };
        ir.data[i] = (scene.ir_base + offset + ir_noise.sample(rng)).clamp(0.0, 1.0);
    }

    let prompt = PromptRecord::for_classes(config, &scene.description, &label.present_classes())?;
    Ok(Triplet { vis, ir, label, prompt, scene_id })
}

/// Samples placements for `scene_id` and renders them; a pure function of
/// `(config, scene_id, seed)`.
pub fn generate_triplet(config: &CorpusConfig, scene_id: usize, seed: u64) -> Result<Triplet> {
    if config.classes.is_empty() {
        return Err(Error::config("triplet generation needs at least one class"));
    }
    let mut rng = rng(seed);
    let placements = sample_placements(config, &mut rng);
    render_triplet(config, scene_id, &placements, &mut rng)
}

/// Draws the scene type of sample `index` from the configured scene
/// frequencies and generates it. Sample `i` depends only on `(config, seed, i)`.
pub fn generate_sample(config: &CorpusConfig, seed: u64, index: u64) -> Result<Triplet> {
    let item_seed = derive_seed(seed, index);
    let mut rng = rng(item_seed);
    let weights: Vec<f64> = config.scenes.iter().map(|s| s.frequency).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::config(format!("scene frequencies: {e}")))?;
    let scene_id = dist.sample(&mut rng) + 1;
    generate_triplet(config, scene_id, derive_seed(item_seed, 0x5ce1e))
}

pub fn generate_samples(config: &CorpusConfig, n_samples: usize, seed: u64) -> Result<Vec<Triplet>> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    (0..n_samples as u64).map(|i| generate_sample(config, seed, i)).collect()
}

/// Generates `n_samples` triplets and writes them with their manifest under `root`.
pub fn generate_corpus(config: &CorpusConfig, n_samples: usize, seed: u64, root: &Path) -> Result<DatasetManifest> {
    let triplets = generate_samples(config, n_samples, seed)?;
    io::write_dataset(root, &triplets, seed, &config.config_hash())
}

fn scene_by_id(config: &CorpusConfig, scene_id: usize) -> Result<&SceneSpec> {
    scene_id
        .checked_sub(1)
        .and_then(|i| config.scenes.get(i))
        .ok_or_else(|| Error::config(format!("scene id {scene_id} is not in 1..={}", config.scenes.len())))
}

fn jitter<R: Rng + ?Sized>(mean: &[f64], var: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| {
            let n: f64 = rand_distr::StandardNormal.sample(rng);
            (m + v.sqrt() * n).clamp(0.0, 1.0)
        })
        .collect()
}
