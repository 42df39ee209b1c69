//! Procedural aligned VIS-IR-Label triplets with known ground truth.
//!
//! Every triplet is rendered from an explicit list of shape placements, so the
//! label map is exact, the thermal image is a known function of the label, and
//! the prompt names precisely the classes that ended up visible.

mod io;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_triplet, save_triplet, write_dataset, DatasetManifest, ManifestEntry};
pub use render::{generate_corpus, generate_sample, generate_samples, generate_triplet, render_triplet, sample_placements, Placement};

/// Per-channel mean and variance of a colour, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Palette {
    pub fn rgb(mean: [f64; 3], var: f64) -> Self {
        Self { mean: mean.to_vec(), var: vec![var; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub scene_type: String,
    pub background_palette: Palette,
    pub ir_base: f64,
    pub description: String,
    /// Relative frequency of this scene type in generated corpora.
    pub frequency: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    ThinBar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    /// 1-based; 0 is background.
    pub class_id: u8,
    pub name: String,
    pub shape_family: ShapeFamily,
    pub vis_palette: Palette,
    pub ir_offset: f64,
    pub base_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub vis_noise: f64,
    pub ir_noise: f64,
    pub scenes: Vec<SceneSpec>,
    pub classes: Vec<ClassSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self::with_size(64, 64)
    }
}

impl CorpusConfig {
    /// The reference world: four scene types with skewed frequencies and five
    /// object classes with a long-tailed occurrence distribution.
    pub fn with_size(height: usize, width: usize) -> Self {
        let scene = |scene_type: &str, bg: [f64; 3], ir_base: f64, description: &str, frequency: f64| SceneSpec {
            scene_type: scene_type.into(),
            background_palette: Palette::rgb(bg, 0.0009),
            ir_base,
            description: description.into(),
            frequency,
        };
        let class = |class_id: u8, name: &str, shape_family, rgb: [f64; 3], ir_offset: f64, base_frequency: f64| ClassSpec {
            class_id,
            name: name.into(),
            shape_family,
            vis_palette: Palette::rgb(rgb, 0.0016),
            ir_offset,
            base_frequency,
        };
        Self {
            height,
            width,
            vis_noise: 0.02,
            ir_noise: 0.02,
            scenes: vec![
                scene("night_lot", [0.10, 0.12, 0.25], 0.36, "Nighttime parking area adjacent to a dense forest background", 0.40),
                scene("road", [0.50, 0.50, 0.50], 0.50, "Daytime urban road between tall buildings", 0.35),
                scene("field", [0.30, 0.60, 0.25], 0.43, "Open grass field under a clear sky", 0.17),
                scene("tunnel", [0.45, 0.30, 0.10], 0.40, "Dim tunnel interior with artificial lighting", 0.08),
            ],
            classes: vec![
                class(1, "car", ShapeFamily::Rectangle, [0.80, 0.15, 0.15], 0.15, 0.60),
                class(2, "traffic light", ShapeFamily::Rectangle, [0.10, 0.75, 0.30], 0.25, 0.25),
                class(3, "pole", ShapeFamily::ThinBar, [0.70, 0.70, 0.75], -0.12, 0.50),
                class(4, "curve", ShapeFamily::Rectangle, [0.90, 0.85, 0.20], -0.24, 0.30),
                class(5, "person", ShapeFamily::Ellipse, [0.85, 0.65, 0.50], 0.38, 0.08),
            ],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, id: u8) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.class(id).map(|c| c.name.as_str())
    }

    pub fn class_id_by_name(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.class_id)
    }

    pub fn config_hash(&self) -> String {
        crate::util::json_digest(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::DegenerateInput(format!(
                "image size {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.scenes.is_empty() {
            return Err(Error::config("corpus needs at least one scene type"));
        }
        for s in &self.scenes {
            if !(0.0..=1.0).contains(&s.ir_base) {
                return Err(Error::config(format!("scene {} has ir_base outside [0,1]", s.scene_type)));
            }
            if s.description.trim().is_empty() {
                return Err(Error::config(format!("scene {} has an empty description", s.scene_type)));
            }
            if !(s.frequency > 0.0) {
                return Err(Error::config(format!("scene {} needs a positive frequency", s.scene_type)));
            }
            check_palette(&s.background_palette, 3, &s.scene_type)?;
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id as usize != i + 1 {
                return Err(Error::config("class ids must be unique and contiguous from 1"));
            }
            if !(-1.0..=1.0).contains(&c.ir_offset) {
                return Err(Error::config(format!("class {} has ir_offset outside [-1,1]", c.name)));
            }
            if !(c.base_frequency > 0.0 && c.base_frequency <= 1.0) {
                return Err(Error::config(format!("class {} has base_frequency outside (0,1]", c.name)));
            }
            if c.name.contains(',') || c.name.contains(';') || c.name.trim().is_empty() {
                return Err(Error::config(format!("class name {:?} is not a valid prompt token", c.name)));
            }
            check_palette(&c.vis_palette, 3, &c.name)?;
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.ir_offset == b.ir_offset {
                    return Err(Error::config(format!(
                        "classes {} and {} share an ir_offset; thermal ordering would be ambiguous",
                        a.name, b.name
                    )));
                }
            }
        }
        if !self.classes.is_empty() && !self.classes.iter().any(|c| c.base_frequency <= 0.1) {
            return Err(Error::config("class frequencies need a long tail (some base_frequency <= 0.1)"));
        }
        Ok(())
    }
}

fn check_palette(p: &Palette, channels: usize, owner: &str) -> Result<()> {
    let ok = p.mean.len() == channels
        && p.var.len() == channels
        && p.mean.iter().all(|m| (0.0..=1.0).contains(m))
        && p.var.iter().all(|v| (0.0..=1.0).contains(v));
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("palette of {owner} must hold {channels} means/variances in [0,1]")))
    }
}

/// Channels-last image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn background(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Sorted distinct non-background class ids.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

/// A structured scene-class prompt: `"<scene description>; <class>, <class>, ..."`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub scene_desc: String,
    pub class_names: Vec<String>,
    pub rendered: String,
}

impl PromptRecord {
    pub fn new(scene_desc: impl Into<String>, class_names: Vec<String>) -> Self {
        let scene_desc = scene_desc.into();
        let rendered = Self::render(&scene_desc, &class_names);
        Self { scene_desc, class_names, rendered }
    }

    /// Prompt for the given class ids (deduplicated and ordered by id).
    pub fn for_classes(config: &CorpusConfig, scene_desc: &str, ids: &[u8]) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let names = ids
            .iter()
            .map(|&id| {
                config
                    .class_name(id)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::config(format!("unknown class id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(scene_desc, names))
    }

    /// With no classes the prompt is the scene description alone.
    pub fn render(scene_desc: &str, class_names: &[String]) -> String {
        if class_names.is_empty() {
            scene_desc.to_owned()
        } else {
            format!("{}; {}", scene_desc, class_names.join(", "))
        }
    }

    pub fn parse(rendered: &str) -> Self {
        match rendered.split_once("; ") {
            Some((scene, classes)) => Self::new(
                scene,
                classes
                    .trim_end_matches('.')
                    .split(", ")
                    .map(|s| s.trim().to_owned())
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
            None => Self::new(rendered, Vec::new()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub vis: Image,
    pub ir: Image,
    pub label: LabelMap,
    pub prompt: PromptRecord,
    /// 1-based index of the scene type in the corpus configuration.
    pub scene_id: usize,
}

impl Triplet {
    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn class_ids(&self) -> Vec<u8> {
        self.label.present_classes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_renders_with_separators_and_parses_back() {
        let p = PromptRecord::new("Open field", vec!["car".into(), "traffic light".into()]);
        assert_eq!(p.rendered, "Open field; car, traffic light");
        assert_eq!(PromptRecord::parse(&p.rendered), p);
        let empty = PromptRecord::new("Open field", vec![]);
        assert_eq!(empty.rendered, "Open field");
        assert_eq!(PromptRecord::parse("Open field"), empty);
    }

    #[test]
    fn default_config_is_valid() {
        CorpusConfig::default().validate().unwrap();
        CorpusConfig::with_size(32, 32).validate().unwrap();
    }

    #[test]
    fn validation_rejects_broken_configs() {
        let mut c = CorpusConfig::default();
        c.classes[1].ir_offset = c.classes[0].ir_offset;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = CorpusConfig::default();
        c.classes.iter_mut().for_each(|k| k.base_frequency = 0.5);
        assert!(c.validate().is_err());

        let mut c = CorpusConfig::default();
        c.classes[2].class_id = 7;
        assert!(c.validate().is_err());

        let c = CorpusConfig::with_size(8, 8);
        assert!(matches!(c.validate(), Err(Error::DegenerateInput(_))));
    }
}
