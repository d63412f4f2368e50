//! Samples, dataset directories and the synthetic shapes generator.
//!
//! A dataset root holds `trainA`, `trainB` and optionally `testA`, `testB`,
//! `masksA`, `masksB`. `A` is domain X, `B` is domain Y. A mask pairs with
//! the image of the same file stem in either split of its domain.

pub mod augment;
pub mod codec;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentDraw};
pub use codec::{decode_image, decode_mask, encode_image, encode_mask};
pub use synth::{synth_generate, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    fn suffix(self) -> &'static str {
        match self {
            Domain::X => "A",
            Domain::Y => "B",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn split_dir(root: &Path, split: Split, domain: Domain) -> PathBuf {
    root.join(format!("{}{}", split.prefix(), domain.suffix()))
}

pub fn mask_dir(root: &Path, domain: Domain) -> PathBuf {
    root.join(format!("masks{}", domain.suffix()))
}

/// One image, `3×H×W` in `[-1, 1]`, with an optional `1×H×W` binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub domain: Domain,
    pub mask: Option<Tensor<f32>>,
    pub source_path: PathBuf,
}

impl Sample {
    pub fn load(path: &Path, mask: Option<&Path>, domain: Domain) -> Result<Self> {
        let image = decode_image(path)?;
        let mask = mask.map(decode_mask).transpose()?;
        if let Some(m) = &mask {
            if m.shape()[1..] != image.shape()[1..] {
                return Err(Error::ShapeMismatch {
                    op: "mask",
                    lhs: m.shape().to_vec(),
                    rhs: image.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            image,
            domain,
            mask,
            source_path: path.to_path_buf(),
        })
    }

    /// File stem used as the sample id in reports.
    pub fn id(&self) -> String {
        stem(&self.source_path)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// PNG files of a directory in lexicographic file-name order. A missing
/// directory yields `None`.
fn list_png(dir: &Path) -> Result<Option<Vec<PathBuf>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(Some(files))
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// File listings of a dataset root. Immutable after [`DatasetManifest::load`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train_a: Vec<PathBuf>,
    pub train_b: Vec<PathBuf>,
    pub test_a: Vec<PathBuf>,
    pub test_b: Vec<PathBuf>,
    /// Mask path by image stem, `None` when the directory is absent.
    pub masks_a: Option<BTreeMap<String, PathBuf>>,
    pub masks_b: Option<BTreeMap<String, PathBuf>>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::invalid(format!(
                "dataset root {} is not a directory",
                root.display()
            )));
        }
        let required = |split, domain| {
            let dir = split_dir(root, split, domain);
            list_png(&dir)?.ok_or_else(|| Error::invalid(format!("missing directory {}", dir.display())))
        };
        let optional = |split, domain| Ok::<_, Error>(list_png(&split_dir(root, split, domain))?.unwrap_or_default());
        let mut manifest = Self {
            root: root.to_path_buf(),
            train_a: required(Split::Train, Domain::X)?,
            train_b: required(Split::Train, Domain::Y)?,
            test_a: optional(Split::Test, Domain::X)?,
            test_b: optional(Split::Test, Domain::Y)?,
            masks_a: None,
            masks_b: None,
        };
        manifest.masks_a = manifest.pair_masks(Domain::X)?;
        manifest.masks_b = manifest.pair_masks(Domain::Y)?;
        Ok(manifest)
    }

    fn pair_masks(&self, domain: Domain) -> Result<Option<BTreeMap<String, PathBuf>>> {
        let dir = mask_dir(&self.root, domain);
        let Some(files) = list_png(&dir)? else {
            return Ok(None);
        };
        let images: Vec<&PathBuf> = self
            .images(Split::Train, domain)
            .iter()
            .chain(self.images(Split::Test, domain))
            .collect();
        let mut out = BTreeMap::new();
        for mask in files {
            let s = stem(&mask);
            let matches: Vec<&&PathBuf> = images.iter().filter(|p| stem(p) == s).collect();
            let [image] = matches.as_slice() else {
                return Err(Error::invalid(format!(
                    "mask {} pairs with {} images (expected exactly one)",
                    mask.display(),
                    matches.len()
                )));
            };
            let (mi, ii) = (dimensions(&mask)?, dimensions(image)?);
            if mi != ii {
                return Err(Error::invalid(format!(
                    "mask {} is {}×{} but {} is {}×{}",
                    mask.display(),
                    mi.0,
                    mi.1,
                    image.display(),
                    ii.0,
                    ii.1
                )));
            }
            out.insert(s, mask);
        }
        Ok(Some(out))
    }

    pub fn images(&self, split: Split, domain: Domain) -> &[PathBuf] {
        match (split, domain) {
            (Split::Train, Domain::X) => &self.train_a,
            (Split::Train, Domain::Y) => &self.train_b,
            (Split::Test, Domain::X) => &self.test_a,
            (Split::Test, Domain::Y) => &self.test_b,
        }
    }

    pub fn masks(&self, domain: Domain) -> Option<&BTreeMap<String, PathBuf>> {
        match domain {
            Domain::X => self.masks_a.as_ref(),
            Domain::Y => self.masks_b.as_ref(),
        }
    }

    pub fn mask_for(&self, domain: Domain, image: &Path) -> Option<&Path> {
        self.masks(domain)?.get(&stem(image)).map(PathBuf::as_path)
    }

    pub fn n_x(&self) -> usize {
        self.train_a.len()
    }

    pub fn n_y(&self) -> usize {
        self.train_b.len()
    }

    /// Whether every image of the split has a mask in both domains.
    pub fn fully_masked(&self, split: Split) -> bool {
        [Domain::X, Domain::Y].into_iter().all(|d| {
            self.images(split, d)
                .iter()
                .all(|p| self.mask_for(d, p).is_some())
        })
    }

    /// Decodes a whole split at native resolution.
    pub fn load_samples(&self, split: Split, domain: Domain) -> Result<Vec<Sample>> {
        self.images(split, domain)
            .iter()
            .map(|p| Sample::load(p, self.mask_for(domain, p), domain))
            .collect()
    }

    pub fn summary(&self) -> String {
        let masks = |d| self.masks(d).map_or(0, BTreeMap::len);
        format!(
            "{}: trainA {} trainB {} testA {} testB {} masksA {} masksB {}",
            self.root.display(),
            self.train_a.len(),
            self.train_b.len(),
            self.test_a.len(),
            self.test_b.len(),
            masks(Domain::X),
            masks(Domain::Y)
        )
    }
}
