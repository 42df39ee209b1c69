//! On-disk dataset layout:
//!
//! ```text
//! <root>/vis/<id>.png     8-bit RGB
//! <root>/ir/<id>.png      8-bit grayscale
//! <root>/label/<id>.png   8-bit grayscale holding raw class ids
//! <root>/manifest.json    {seed, config_hash, entries: [{id, scene_id, classes, prompt}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Image, LabelMap, PromptRecord, Triplet};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MODALITY_DIRS: [&str; 3] = ["vis", "ir", "label"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub scene_id: usize,
    pub classes: Vec<u8>,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::io(&path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Checks that every modality directory holds exactly one file per entry.
    pub fn verify(&self) -> Result<()> {
        for dir in MODALITY_DIRS {
            let d = self.root.join(dir);
            let count = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?.count();
            if count != self.entries.len() {
                return Err(Error::data(format!(
                    "{} holds {count} files but the manifest lists {} entries",
                    d.display(),
                    self.entries.len()
                )));
            }
            for e in &self.entries {
                let p = d.join(format!("{}.png", e.id));
                if !p.is_file() {
                    return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn invalid(path: &Path, msg: impl ToString) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string()))
}

/// Writes the three modality images of `t` under `root` as `<id>.png`.
pub fn save_triplet(t: &Triplet, root: &Path, id: &str) -> Result<ManifestEntry> {
    let (h, w) = (t.height() as u32, t.width() as u32);
    for dir in MODALITY_DIRS {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let file = |dir: &str| root.join(dir).join(format!("{id}.png"));

    let vis = RgbImage::from_raw(w, h, t.vis.data.iter().map(|&v| quantize(v)).collect())
        .ok_or_else(|| Error::Shape("VIS buffer does not match its size".into()))?;
    let p = file("vis");
    vis.save(&p).map_err(|e| invalid(&p, e))?;

    let ir = GrayImage::from_raw(w, h, t.ir.data.iter().map(|&v| quantize(v)).collect())
        .ok_or_else(|| Error::Shape("IR buffer does not match its size".into()))?;
    let p = file("ir");
    ir.save(&p).map_err(|e| invalid(&p, e))?;

    let label = GrayImage::from_raw(w, h, t.label.data.clone())
        .ok_or_else(|| Error::Shape("label buffer does not match its size".into()))?;
    let p = file("label");
    label.save(&p).map_err(|e| invalid(&p, e))?;

    Ok(ManifestEntry {
        id: id.to_owned(),
        scene_id: t.scene_id,
        classes: t.label.present_classes(),
        prompt: t.prompt.rendered.clone(),
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| invalid(path, e))
}

pub fn load_triplet(root: &Path, entry: &ManifestEntry) -> Result<Triplet> {
    let file = |dir: &str| root.join(dir).join(format!("{}.png", entry.id));

    let p = file("vis");
    let vis = open(&p)?.to_rgb8();
    let (w, h) = vis.dimensions();
    let vis = Image {
        height: h as usize,
        width: w as usize,
        channels: 3,
        data: vis.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };

    let p = file("ir");
    let ir = open(&p)?.to_luma8();
    if ir.dimensions() != (w, h) {
        return Err(invalid(&p, "IR size differs from VIS size"));
    }
    let ir = Image {
        height: h as usize,
        width: w as usize,
        channels: 1,
        data: ir.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };

    let p = file("label");
    let label = open(&p)?.to_luma8();
    if label.dimensions() != (w, h) {
        return Err(invalid(&p, "label size differs from VIS size"));
    }
    let label = LabelMap { height: h as usize, width: w as usize, data: label.into_raw() };
    if label.present_classes() != entry.classes {
        return Err(invalid(&p, format!("label classes {:?} disagree with manifest {:?}", label.present_classes(), entry.classes)));
    }

    Ok(Triplet { vis, ir, label, prompt: PromptRecord::parse(&entry.prompt), scene_id: entry.scene_id })
}

/// Writes `triplets` (ids `000000`, `000001`, ...) and the manifest under `root`.
pub fn write_dataset(root: &Path, triplets: &[Triplet], seed: u64, config_hash: &str) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = triplets
        .iter()
        .enumerate()
        .map(|(i, t)| save_triplet(t, root, &format!("{i:06}")))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { root: root.to_path_buf(), seed, config_hash: config_hash.to_owned(), entries };
    manifest.save()?;
    Ok(manifest)
}

/// Loads the manifest under `root` and every triplet it lists.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Triplet>)> {
    let manifest = DatasetManifest::load(root)?;
    let triplets = manifest
        .entries
        .iter()
        .map(|e| load_triplet(root, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, triplets))
}
