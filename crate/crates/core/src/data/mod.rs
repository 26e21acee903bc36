//! Dataset discovery, preprocessing and augmentation.
//!
//! Layout under a dataset root:
//!
//! ```text
//! images/<id>.png      required, photo with makeup
//! masks/<id>.png       optional, 8-bit 0/255 ROI mask
//! bare/<id>.png        optional, makeup-removed photo
//! split.txt            optional, lines "<id> <train|test>"
//! cache/masks|bare/    derived masks and bare faces written by `prepare`
//! ```

pub mod augment;
pub mod preprocess;
mod sample;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use augment::{augment_flip, flip_coin, sample_rng};
pub use preprocess::{preprocess, preprocess_mask, resize_bilinear, resize_mask_nearest};
pub use sample::{make_sample, FaceServices, MakeupSample, SampleLoader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub resolution: usize,
    pub split_ratio: f64,
    /// Overrides `split_ratio`; defaults to `<root>/split.txt` when present.
    pub split_file: Option<PathBuf>,
    pub seed: u64,
    pub augment_flip: bool,
    /// Where derived masks and bare faces are cached; defaults to `<root>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            resolution: 256,
            split_ratio: 0.9,
            split_file: None,
            seed: 0,
            augment_flip: true,
            cache_dir: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            errors.push(format!("data.resolution must be a power of two >= 8, got {}", self.resolution));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            errors.push(format!("data.split_ratio must be in [0, 1], got {}", self.split_ratio));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Where a sample's mask or bare face comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Shipped with the dataset.
    Provided,
    /// Derived earlier and cached.
    Cached,
    /// Must be derived through the face-analysis adapters.
    Derive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub mask_source: Provenance,
    pub bare: Option<PathBuf>,
    pub bare_source: Provenance,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIssue {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub cache_dir: PathBuf,
    /// Sorted by id.
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<ManifestIssue>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Hex SHA-256 over ids and splits. Stable under cache population.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.id.as_bytes());
            h.update([0, e.split as u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mask_cache_path(&self, id: &str) -> PathBuf {
        self.cache_dir.join("masks").join(format!("{id}.png"))
    }

    pub fn bare_cache_path(&self, id: &str) -> PathBuf {
        self.cache_dir.join("bare").join(format!("{id}.png"))
    }
}

fn parse_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Dataset(format!(
                "{}:{}: expected `<id> <train|test>`",
                path.display(),
                lineno + 1
            )));
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Dataset(format!(
                    "{}:{}: unknown split `{other}`",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        if out.insert(id.to_string(), split).is_some() {
            return Err(Error::Dataset(format!("{}: duplicate id `{id}`", path.display())));
        }
    }
    Ok(out)
}

/// Number of training samples under a ratio split. The first `⌊n·ratio⌋` ids
/// in lexicographic order go to training.
pub fn ratio_split_point(n: usize, ratio: f64) -> usize {
    (((n as f64) * ratio + 1e-9).floor() as usize).min(n)
}

/// Enumerates a dataset root into a manifest.
pub fn load_dataset(root: &Path, config: &DataConfig) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let images_dir = root.join("images");
    let read = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let cache_dir = config.cache_dir.clone().unwrap_or_else(|| root.join("cache"));

    let mut candidates: Vec<(String, PathBuf)> = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        candidates.push((id.to_string(), path));
    }
    candidates.sort();

    let mut errors = Vec::new();
    let mut usable = Vec::new();
    for (id, path) in candidates {
        match image::image_dimensions(&path) {
            Ok(_) => usable.push((id, path)),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                errors.push(ManifestIssue {
                    path,
                    reason: e.to_string(),
                });
            }
        }
    }
    if usable.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", images_dir.display())));
    }

    let split_file = config
        .split_file
        .clone()
        .or_else(|| Some(root.join("split.txt")).filter(|p| p.is_file()));
    let explicit = split_file.as_deref().map(parse_split_file).transpose()?;
    let train_count = ratio_split_point(usable.len(), config.split_ratio);

    let mut entries = Vec::with_capacity(usable.len());
    for (i, (id, image)) in usable.into_iter().enumerate() {
        let split = match &explicit {
            Some(map) => match map.get(&id) {
                Some(s) => *s,
                None => {
                    errors.push(ManifestIssue {
                        path: image,
                        reason: "id not listed in split file".into(),
                    });
                    continue;
                }
            },
            None if i < train_count => Split::Train,
            None => Split::Test,
        };
        let (mask, mask_source) = locate(&root.join("masks"), &cache_dir.join("masks"), &id);
        let (bare, bare_source) = locate(&root.join("bare"), &cache_dir.join("bare"), &id);
        entries.push(ManifestEntry {
            id,
            image,
            mask,
            mask_source,
            bare,
            bare_source,
            split,
        });
    }
    if let Some(map) = &explicit {
        let known: HashSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        for id in map.keys().filter(|id| !known.contains(id.as_str())) {
            errors.push(ManifestIssue {
                path: images_dir.join(format!("{id}.png")),
                reason: "listed in split file but missing".into(),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", images_dir.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        cache_dir,
        entries,
        errors,
    })
}

fn locate(provided_dir: &Path, cache_dir: &Path, id: &str) -> (Option<PathBuf>, Provenance) {
    let provided = provided_dir.join(format!("{id}.png"));
    if provided.is_file() {
        return (Some(provided), Provenance::Provided);
    }
    let cached = cache_dir.join(format!("{id}.png"));
    if cached.is_file() {
        return (Some(cached), Provenance::Cached);
    }
    (None, Provenance::Derive)
}
