use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgproc::{io, BinaryMask, RgbImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Ph2,
    Isic2017,
    Ham10000,
    Synthetic,
    #[default]
    Custom,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Ph2 => "ph2",
            SourceTag::Isic2017 => "isic2017",
            SourceTag::Ham10000 => "ham10000",
            SourceTag::Synthetic => "synthetic",
            SourceTag::Custom => "custom",
        })
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ph2" => Ok(SourceTag::Ph2),
            "isic2017" => Ok(SourceTag::Isic2017),
            "ham10000" => Ok(SourceTag::Ham10000),
            "synthetic" => Ok(SourceTag::Synthetic),
            "custom" => Ok(SourceTag::Custom),
            other => Err(invalid(format!("unknown dataset tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Image/mask pairs sorted by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub tag: SourceTag,
    pub entries: Vec<Entry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| {
                let image = io::load_rgb(&e.image)?;
                let mask = io::load_mask(&e.mask)?;
                if (mask.width(), mask.height()) != (image.width(), image.height()) {
                    return Err(invalid(format!(
                        "{}: mask is {}x{} but image is {}x{}",
                        e.id,
                        mask.width(),
                        mask.height(),
                        image.width(),
                        image.height()
                    )));
                }
                Ok(Sample {
                    id: e.id.clone(),
                    image,
                    mask,
                })
            })
            .collect()
    }
}

/// A decoded image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

/// Mask files may carry one of these suffixes after the image stem.
const MASK_SUFFIXES: [&str; 4] = ["", "_segmentation", "_lesion", "_mask"];

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    for path in paths {
        if !path.is_file() || !io::is_supported_image(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        if out.insert(stem.clone(), path).is_some() {
            return Err(Error::DuplicateStem(stem));
        }
    }
    Ok(out)
}

/// Indexes `root/images` against `root/masks`, matching masks by stem.
pub fn load_dataset(root: &Path, tag: SourceTag) -> Result<DatasetIndex> {
    let images = stems(&root.join("images"))?;
    let mut masks = stems(&root.join("masks"))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut missing = Vec::new();
    for (stem, image) in images {
        let found = MASK_SUFFIXES
            .iter()
            .find_map(|suffix| masks.remove(&format!("{stem}{suffix}")));
        match found {
            Some(mask) => entries.push(Entry {
                id: stem,
                image,
                mask,
            }),
            None => missing.push(stem),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingMasks(missing));
    }
    for stem in masks.keys() {
        log::warn!("mask {stem} has no matching image");
    }
    if entries.is_empty() {
        log::warn!("no image/mask pairs found under {}", root.display());
    }
    Ok(DatasetIndex { tag, entries })
}

/// `k` disjoint folds of entry indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Training indices for held-out fold `f`, in ascending order.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Seeded shuffle followed by a round-robin deal into `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(invalid(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(invalid(format!("cannot split {n} entries into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(FoldSplit { seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes() {
        let split = make_folds(200, 5, 1).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 40));
        let split = make_folds(7, 5, 1).unwrap();
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert_eq!(make_folds(7, 5, 1).unwrap(), split);
        assert!(make_folds(3, 5, 1).is_err());
    }

    #[test]
    fn dataset_matching() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), SourceTag::Custom)
            .unwrap()
            .is_empty());
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = RgbImage::filled(4, 4, [9, 9, 9]);
        let mask = BinaryMask::zeros(4, 4);
        io::save_rgb(&img, &dir.path().join("images/b.png")).unwrap();
        io::save_rgb(&img, &dir.path().join("images/a.png")).unwrap();
        io::save_mask(&mask, &dir.path().join("masks/a_segmentation.png")).unwrap();
        match load_dataset(dir.path(), SourceTag::Custom) {
            Err(Error::MissingMasks(m)) => assert_eq!(m, vec!["b".to_string()]),
            other => panic!("expected missing masks, got {other:?}"),
        }
        io::save_mask(&mask, &dir.path().join("masks/b.png")).unwrap();
        let idx = load_dataset(dir.path(), SourceTag::Custom).unwrap();
        let ids: Vec<&str> = idx.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(idx.load_samples().unwrap().len(), 2);
        io::save_rgb(&img, &dir.path().join("images/a.bmp")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), SourceTag::Custom),
            Err(Error::DuplicateStem(_))
        ));
    }
}
