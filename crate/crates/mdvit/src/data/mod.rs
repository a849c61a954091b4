//! Dataset types, ingestion, fold assignment, and batch assembly.
//!
//! On-disk layout: `root/<domain_name>/images/*.png|jpg` with
//! filename-matched `root/<domain_name>/masks/*.png`; an optional
//! `split.json` in each domain directory maps sample id to fold index and
//! overrides the seeded default assignment.

mod augment;
mod sampler;
pub mod synthetic;

pub use augment::{augment, AugmentOptions};
pub use sampler::balanced_batches;
pub use synthetic::{make_synthetic, write_datasets, SyntheticOptions};

use crate::error::{MdvitError, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

pub const NUM_FOLDS: usize = 5;

/// One image/mask pair belonging to a single domain.
#[derive(Debug, Clone)]
pub struct Sample {
    /// RGB in [0, 1], shape (H, W, 3).
    pub image: Array3<f32>,
    /// Binary {0, 1}, shape (H, W).
    pub mask: Array2<f32>,
    /// Domain index in [0, M).
    pub domain: usize,
    pub id: String,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image.dim();
        if c != 3 || self.mask.dim() != (h, w) {
            return Err(MdvitError::shape(format!(
                "sample {}: image ({h}, {w}, {c}) and mask {:?} disagree",
                self.id,
                self.mask.dim()
            )));
        }
        if self.image.iter().any(|v| !v.is_finite()) {
            return Err(MdvitError::data(format!(
                "sample {}: non-finite pixel",
                self.id
            )));
        }
        if self.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MdvitError::data(format!(
                "sample {}: mask values outside {{0, 1}}",
                self.id
            )));
        }
        Ok(())
    }
}

/// All samples of one domain plus a 5-way fold partition.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    pub samples: Vec<Sample>,
    /// Fold index in [0, 5) per sample, aligned with `samples`.
    pub folds: Vec<usize>,
}

impl DomainDataset {
    /// Deterministic fold assignment: seeded shuffle, then near-equal
    /// contiguous chunks.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>, seed: u64) -> Self {
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut folds = vec![0usize; n];
        for (rank, &idx) in order.iter().enumerate() {
            folds[idx] = rank * NUM_FOLDS / n.max(1);
        }
        DomainDataset {
            name: name.into(),
            samples,
            folds,
        }
    }

    /// Sample indices outside fold `k` (training split).
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.folds[i] != fold)
            .collect()
    }

    /// Sample indices inside fold `k` (test split).
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.folds[i] == fold)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A mini-batch in network layout.
pub struct DomainBatch<T: Scalar> {
    /// (B, 3, H, W) in [0, 1].
    pub images: ArrayD<T>,
    /// (B, 1, H, W) in {0, 1}.
    pub masks: ArrayD<T>,
    /// Per-sample domain indices.
    pub domains: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Scalar> DomainBatch<T> {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        assert!(!samples.is_empty(), "empty batch");
        let (h, w, _) = samples[0].image.dim();
        let b = samples.len();
        let mut images = ArrayD::<T>::zeros(IxDyn(&[b, 3, h, w]));
        let mut masks = ArrayD::<T>::zeros(IxDyn(&[b, 1, h, w]));
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.image.dim(), (h, w, 3), "mixed sizes in one batch");
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        images[[i, c, y, x]] = T::from_f64(s.image[[y, x, c]] as f64);
                    }
                    masks[[i, 0, y, x]] = T::from_f64(s.mask[[y, x]] as f64);
                }
            }
        }
        DomainBatch {
            images,
            masks,
            domains: samples.iter().map(|s| s.domain).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// One-hot domain matrix (B, M).
    pub fn one_hot(&self, num_domains: usize) -> ArrayD<T> {
        let mut oh = ArrayD::<T>::zeros(IxDyn(&[self.len(), num_domains]));
        for (i, &d) in self.domains.iter().enumerate() {
            assert!(d < num_domains, "domain index out of range");
            oh[[i, d]] = T::one();
        }
        oh
    }

    /// Per-sample rows belonging to domain `m`.
    pub fn domain_rows(&self, m: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == m).collect()
    }
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| MdvitError::data(format!("bad file name: {}", path.display())))?;
        out.insert(stem.to_string(), path);
    }
    Ok(out)
}

/// Load one domain directory, resizing to `image_size` and binarizing masks
/// at the 127 gray threshold. Fold assignment comes from `split.json` when
/// present, else from a seeded shuffle.
pub fn load_domain(
    root: impl AsRef<Path>,
    domain: usize,
    image_size: (usize, usize),
    seed: u64,
) -> Result<DomainDataset> {
    let root = root.as_ref();
    let name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("domain")
        .to_string();
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(MdvitError::data(format!(
            "domain directory '{}' must contain images/ and masks/",
            root.display()
        )));
    }
    let images = list_stems(&images_dir)?;
    let masks = list_stems(&masks_dir)?;

    let (h, w) = image_size;
    let mut samples = Vec::with_capacity(images.len());
    for (id, img_path) in &images {
        let mask_path = masks
            .get(id)
            .ok_or_else(|| MdvitError::data(format!("image '{id}' has no matching mask")))?;
        let img = image::open(img_path)
            .map_err(|e| MdvitError::data(format!("cannot read image '{id}': {e}")))?
            .resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let mask = image::open(mask_path)
            .map_err(|e| MdvitError::data(format!("cannot read mask '{id}': {e}")))?
            .resize_exact(w as u32, h as u32, image::imageops::FilterType::Nearest)
            .to_luma8();

        let mut image_arr = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    image_arr[[y, x, c]] = p.0[c] as f32 / 255.0;
                }
            }
        }
        let mut mask_arr = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                mask_arr[[y, x]] = if mask.get_pixel(x as u32, y as u32).0[0] > 127 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        samples.push(Sample {
            image: image_arr,
            mask: mask_arr,
            domain,
            id: id.clone(),
        });
    }
    for s in &samples {
        s.validate()?;
    }

    let mut ds = DomainDataset::new(name, samples, seed);
    let split_path = root.join("split.json");
    apply_split(&mut ds, &split_path)?;
    Ok(ds)
}

fn apply_split(ds: &mut DomainDataset, split_path: &Path) -> Result<()> {
    if split_path.is_file() {
        let text = std::fs::read_to_string(split_path)?;
        let map: BTreeMap<String, usize> = serde_json::from_str(&text)
            .map_err(|e| MdvitError::data(format!("bad split.json: {e}")))?;
        for (i, s) in ds.samples.iter().enumerate() {
            let fold = *map
                .get(&s.id)
                .ok_or_else(|| MdvitError::data(format!("split.json missing id '{}'", s.id)))?;
            if fold >= NUM_FOLDS {
                return Err(MdvitError::data(format!(
                    "split.json fold {fold} out of range for id '{}'",
                    s.id
                )));
            }
            ds.folds[i] = fold;
        }
    }
    Ok(())
}

/// Load every domain directory under `root` (sorted by name; the position
/// becomes the domain index).
pub fn load_root(
    root: impl AsRef<Path>,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    let root = root.as_ref();
    let mut dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(MdvitError::data(format!(
            "no domain directories under '{}'",
            root.display()
        )));
    }
    dirs.iter()
        .enumerate()
        .map(|(m, dir)| load_domain(dir, m, image_size, seed.wrapping_add(m as u64)))
        .collect()
}
