//! Labelled image folders, deterministic splits and nested subsets.
//!
//! A dataset root holds one directory per class. [`build_manifest`] lists
//! them in alphabetical order, checks that every file decodes and assigns a
//! quarter of each class to the test split by ranking file names under
//! SHA-256, so the split does not depend on directory iteration order.

pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex_string;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Batch4;
use crate::seed::{mix, stream};

pub use synthetic::{generate_synthetic, single_blob_image, BlobImage};

/// Fraction of every class held out for testing.
pub const TEST_FRACTION: f64 = 0.25;

/// Network inputs are `(x - INPUT_MEAN) / INPUT_STD` with `x` in `[0, 1]`.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestIssue {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Files that could not be read or decoded; excluded from `entries`.
    pub errors: Vec<ManifestIssue>,
    pub warnings: Vec<String>,
    /// SHA-256 over classes, entries and errors (not the root, so a moved
    /// tree keeps its checksum).
    pub checksum: String,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Entry counts per class for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.split(split) {
            counts[e.class] += 1;
        }
        counts
    }

    pub fn compute_checksum(&self) -> String {
        #[derive(Serialize)]
        struct Content<'a> {
            classes: &'a [String],
            entries: &'a [ManifestEntry],
            errors: &'a [ManifestIssue],
        }
        let body = serde_json::to_vec(&Content {
            classes: &self.classes,
            entries: &self.entries,
            errors: &self.errors,
        })
        .expect("manifest serialises");
        hex_string(&Sha256::digest(body))
    }

    fn refresh_checksum(&mut self) {
        self.checksum = self.compute_checksum();
    }

    /// Checks the structural invariants: contiguous class indices, at most
    /// one entry per path and a matching checksum.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.class >= self.classes.len() {
                return Err(Error::validation(format!(
                    "entry {} has class {} but only {} classes exist",
                    e.path,
                    e.class,
                    self.classes.len()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(Error::validation(format!("duplicate entry {}", e.path)));
            }
        }
        if self.checksum != self.compute_checksum() {
            return Err(Error::validation("manifest checksum does not match its content"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; a relative `root` is resolved against the manifest's
    /// own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if m.root.is_relative() {
            if let Some(dir) = path.parent() {
                m.root = dir.join(&m.root);
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// A manifest file, or a class-per-directory root scanned on the fly.
pub fn open_dataset(path: &Path) -> Result<DatasetManifest> {
    if path.is_dir() {
        build_manifest(path)
    } else {
        DatasetManifest::load(path)
    }
}

fn split_rank(class: &str, file: &str) -> [u8; 32] {
    Sha256::digest(format!("{class}/{file}").as_bytes()).into()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|r| r.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn decode_check(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Scans a directory-per-class tree.
pub fn build_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    for dir in dirs {
        let class_name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files = Vec::new();
        for path in read_dir_sorted(&dir)? {
            let is_image = path
                .extension()
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
                .unwrap_or(false);
            if !path.is_file() || !is_image {
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let rel = format!("{class_name}/{name}");
            match decode_check(&path) {
                Ok(()) => files.push(name),
                Err(reason) => errors.push(ManifestIssue { path: rel, reason }),
            }
        }
        if files.is_empty() {
            let msg = format!("class directory '{class_name}' has no readable images; excluded");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let class = classes.len();
        let n = files.len();
        let n_test = ((n as f64 * TEST_FRACTION).round() as usize).min(n - 1);
        let mut ranked: Vec<&String> = files.iter().collect();
        ranked.sort_by_key(|f| split_rank(&class_name, f));
        let test: std::collections::HashSet<&String> = ranked.into_iter().take(n_test).collect();
        for f in &files {
            entries.push(ManifestEntry {
                path: format!("{class_name}/{f}"),
                class,
                split: if test.contains(f) { Split::Test } else { Split::Train },
            });
        }
        classes.push(class_name);
    }
    if classes.is_empty() {
        return Err(Error::validation(format!("no classes found under {}", root.display())));
    }
    let mut m = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        entries,
        errors,
        warnings,
        checksum: String::new(),
    };
    m.refresh_checksum();
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl SubsetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::validation(format!(
                "fraction must lie in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Keeps `max(1, round(fraction * n))` training files of every class; test
/// entries are untouched. Each class is ranked by a permutation that depends
/// only on the seed and class, so smaller fractions are prefixes of larger
/// ones and the subsets nest.
pub fn stratified_subset(m: &DatasetManifest, s: SubsetSpec) -> Result<DatasetManifest> {
    s.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in m.entries.iter().enumerate() {
        if e.split == Split::Train {
            by_class.entry(e.class).or_default().push(i);
        }
    }
    let mut keep = vec![true; m.entries.len()];
    for (class, mut idx) in by_class {
        let n = idx.len();
        let k = ((s.fraction * n as f64).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[s.seed, stream::SUBSET, class as u64]));
        idx.shuffle(&mut rng);
        for &i in &idx[k..] {
            keep[i] = false;
        }
    }
    let mut out = m.clone();
    out.entries = m
        .entries
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    out.refresh_checksum();
    Ok(out)
}

/// Decoded images and labels of one split.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn load_split(m: &DatasetManifest, split: Split) -> Result<LoadedSplit> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for e in m.split(split) {
        images.push(Image::load(&m.path_of(e))?);
        labels.push(e.class);
    }
    Ok(LoadedSplit { images, labels })
}

/// Stacks same-sized images into a normalised network batch.
pub fn to_batch(images: &[&Image]) -> Batch4<f32> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        data.extend(img.data.iter().map(|&v| (v - INPUT_MEAN) / INPUT_STD));
    }
    Batch4 {
        n: images.len(),
        c: 3,
        h,
        w,
        data,
    }
}
