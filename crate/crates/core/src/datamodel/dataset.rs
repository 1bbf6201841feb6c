use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::label::{Image, LabelMap};
use super::schedule::TaskSchedule;
use crate::error::{Error, Result};

/// A labeled image. `id` is the file stem for on-disk data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, labels: LabelMap) -> Result<Self> {
        let id = id.into();
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(Error::Format {
                stem: id,
                reason: format!(
                    "image is {}x{} but labels are {}x{}",
                    image.height(),
                    image.width(),
                    labels.height(),
                    labels.width()
                ),
            });
        }
        Ok(Self { id, image, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem {
    /// Stable 1-based identifier within the pool.
    pub id: u32,
    pub stem: String,
    pub image: Image,
}

/// Unlabeled images U_t with ids `1..=M_t` in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnlabeledPool {
    items: Vec<PoolItem>,
}

impl UnlabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_images(images: impl IntoIterator<Item = (String, Image)>) -> Self {
        let mut pool = Self::new();
        for (stem, image) in images {
            pool.push(stem, image);
        }
        pool
    }

    pub fn push(&mut self, stem: impl Into<String>, image: Image) -> u32 {
        let id = self.items.len() as u32 + 1;
        self.items.push(PoolItem {
            id,
            stem: stem.into(),
            image,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|i| i.id).collect()
    }

    pub fn get(&self, id: u32) -> Option<&PoolItem> {
        if id == 0 {
            return None;
        }
        self.items.get(id as usize - 1)
    }
}

/// File stems per split. `base` holds fully labeled base-task images;
/// `labeled` is the split few-shot sets are drawn from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub base: Vec<String>,
    #[serde(default)]
    pub labeled: Vec<String>,
    #[serde(default)]
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    /// Layout archetype per stem, recorded for synthetic data.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub archetypes: BTreeMap<String, usize>,
}

impl Manifest {
    /// Reads a JSON manifest, or a plain-text one with `<split> <stem>` per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())));
        }
        Self::parse_text(&text)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(split), Some(stem), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Config(format!(
                    "manifest line {}: expected `<split> <stem>`",
                    lineno + 1
                )));
            };
            let list = match split {
                "base" => &mut m.base,
                "labeled" => &mut m.labeled,
                "unlabeled" => &mut m.unlabeled,
                "validation" | "val" => &mut m.validation,
                other => {
                    return Err(Error::Config(format!(
                        "manifest line {}: unknown split `{other}`",
                        lineno + 1
                    )))
                }
            };
            list.push(stem.to_string());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub base: Vec<Sample>,
    pub labeled: Vec<Sample>,
    pub pool: UnlabeledPool,
    pub validation: Vec<Sample>,
}

pub fn read_image_png(path: &Path, stem: &str) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Load {
        stem: stem.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(h as usize, w as usize, rgb.into_raw())
}

pub fn read_label_png(path: &Path, stem: &str) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Load {
        stem: stem.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format {
                stem: stem.to_string(),
                reason: format!("label must be 8-bit single channel, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    LabelMap::new(h as usize, w as usize, gray.into_raw())
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    image::save_buffer(
        path,
        image.data(),
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    image::save_buffer(
        path,
        labels.values(),
        labels.width() as u32,
        labels.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn load_labeled(root: &Path, stem: &str, schedule: &TaskSchedule) -> Result<Sample> {
    let img_path = root.join("images").join(format!("{stem}.png"));
    let lbl_path = root.join("labels").join(format!("{stem}.png"));
    for p in [&img_path, &lbl_path] {
        if !p.is_file() {
            return Err(Error::Load {
                stem: stem.to_string(),
                reason: format!("missing file {}", p.display()),
            });
        }
    }
    let image = read_image_png(&img_path, stem)?;
    let labels = read_label_png(&lbl_path, stem)?;
    let sample = Sample::new(stem, image, labels)?;
    sample
        .labels
        .validate(&schedule.all_classes())
        .map_err(|e| Error::Validation(format!("stem `{stem}`: {e}")))?;
    Ok(sample)
}

/// Reads `images/<stem>.png` and `labels/<stem>.png` under `root` for each
/// split of the manifest. Unlabeled stems only need an image.
pub fn load_dataset(
    root: &Path,
    manifest: &Manifest,
    schedule: &TaskSchedule,
) -> Result<DatasetSplits> {
    for sub in ["images", "labels"] {
        if !root.join(sub).is_dir() {
            return Err(Error::Load {
                stem: String::new(),
                reason: format!("{} has no {sub}/ directory", root.display()),
            });
        }
    }
    let mut seen = HashSet::new();
    for stem in manifest
        .base
        .iter()
        .chain(&manifest.labeled)
        .chain(&manifest.unlabeled)
        .chain(&manifest.validation)
    {
        if !seen.insert(stem.as_str()) {
            return Err(Error::Validation(format!(
                "stem `{stem}` listed more than once in the manifest"
            )));
        }
    }
    let labeled_split = |stems: &[String]| -> Result<Vec<Sample>> {
        stems
            .iter()
            .map(|s| load_labeled(root, s, schedule))
            .collect()
    };
    let mut pool = UnlabeledPool::new();
    for stem in &manifest.unlabeled {
        let p = root.join("images").join(format!("{stem}.png"));
        if !p.is_file() {
            return Err(Error::Load {
                stem: stem.clone(),
                reason: format!("missing file {}", p.display()),
            });
        }
        pool.push(stem.clone(), read_image_png(&p, stem)?);
    }
    Ok(DatasetSplits {
        base: labeled_split(&manifest.base)?,
        labeled: labeled_split(&manifest.labeled)?,
        pool,
        validation: labeled_split(&manifest.validation)?,
    })
}
