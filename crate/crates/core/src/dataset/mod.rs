//! Class-organised segmentation datasets on disk.
//!
//! Layout: one directory per class, each holding `<stem>.<ext>` images and
//! `<stem>_mask.<ext>` masks. Images are converted to RGB in `[0, 1]`;
//! masks are thresholded at 0.5 after resizing.

mod shapes;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::seed;

pub use shapes::{generate_shapes_dataset, shape_class_name, MAX_SHAPE_CLASSES, SHAPE_FAMILIES};

pub const MASK_SUFFIX: &str = "_mask";
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// One labelled (image, mask) pair.
#[derive(Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub image: Image,
    pub mask: BinaryMask,
}

#[derive(Debug)]
pub struct ClassDataset {
    pub root: PathBuf,
    /// Sorted, unique class identifiers.
    pub classes: Vec<String>,
    /// `entries[i]` holds the samples of `classes[i]`, sorted by stem.
    pub entries: Vec<Vec<Arc<Sample>>>,
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub channels: usize,
}

impl ClassDataset {
    /// Builds a dataset from in-memory samples, checking every invariant.
    pub fn from_samples(
        root: impl Into<PathBuf>,
        classes: Vec<(String, Vec<Sample>)>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut size = None;
        let mut channels = None;
        let mut names = Vec::with_capacity(classes.len());
        let mut entries = Vec::with_capacity(classes.len());
        for (class, samples) in classes {
            if !seen.insert(class.clone()) {
                return Err(Error::DuplicateClass(class));
            }
            if samples.is_empty() {
                return Err(Error::EmptyClass { class });
            }
            for s in &samples {
                let dims = (s.image.height, s.image.width);
                if *size.get_or_insert(dims) != dims
                    || *channels.get_or_insert(s.image.channels) != s.image.channels
                    || (s.mask.height, s.mask.width) != dims
                {
                    return Err(Error::ShapeMismatch(format!(
                        "sample `{}` of class `{class}` does not match the dataset shape",
                        s.stem
                    )));
                }
                if !s.mask.is_binary() {
                    return Err(Error::NonBinaryInput);
                }
            }
            names.push(class);
            entries.push(samples.into_iter().map(Arc::new).collect());
        }
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.sort_by(|&a, &b| names[a].cmp(&names[b]));
        let mut slots: Vec<Option<Vec<Arc<Sample>>>> = entries.into_iter().map(Some).collect();
        Ok(Self {
            root: root.into(),
            classes: order.iter().map(|&i| names[i].clone()).collect(),
            entries: order.iter().map(|&i| slots[i].take().unwrap()).collect(),
            image_size: size.unwrap_or((0, 0)),
            channels: channels.unwrap_or(3),
        })
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(class))
            .ok()
    }

    pub fn samples(&self, class: &str) -> Option<&[Arc<Sample>]> {
        self.class_index(class).map(|i| self.entries[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint partition of class identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_classes: BTreeSet<String>,
    pub test_classes: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        self.train_classes.is_disjoint(&self.test_classes)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads an image as RGB in `[0, 1]`, bilinearly resized to `(H, W)`.
pub fn read_image(path: &Path, target: (usize, usize)) -> Result<Image> {
    let (h, w) = target;
    let mut rgb = decode(path)?.to_rgb8();
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Image::new(3, h, w, data)
}

/// Reads a mask, nearest-neighbour resized to `(H, W)` and thresholded at 0.5.
pub fn read_mask(path: &Path, target: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = target;
    let mut luma = decode(path)?.to_luma8();
    if luma.dimensions() != (w as u32, h as u32) {
        luma = image::imageops::resize(&luma, w as u32, h as u32, FilterType::Nearest);
    }
    let data = luma
        .pixels()
        .map(|p| (p[0] as f32 / 255.0 >= 0.5) as u8)
        .collect();
    BinaryMask::new(h, w, data)
}

/// Loads and validates a class-organised dataset, resizing to `target_size`.
pub fn load_class_dataset(root: &Path, target_size: (usize, usize)) -> Result<ClassDataset> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    if target_size.0 == 0 || target_size.1 == 0 {
        return Err(Error::config("image_size", "must be positive"));
    }
    let mut pending = Vec::new();
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::config("dataset", format!("non UTF-8 class directory {dir:?}")))?
            .to_string();
        let mut images = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for file in sorted_dir(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
        {
            let stem = file_stem(&file);
            match stem.strip_suffix(MASK_SUFFIX) {
                Some(base) => masks.insert(base.to_string(), file),
                None => images.insert(stem, file),
            };
        }
        if images.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        let mut pairs = Vec::with_capacity(images.len());
        for (stem, image_path) in images {
            let mask_path = masks.remove(&stem).ok_or_else(|| Error::MissingMask {
                class: class.clone(),
                stem: stem.clone(),
            })?;
            pairs.push((stem, image_path, mask_path));
        }
        pending.push((class, pairs));
    }
    let classes = pending
        .into_par_iter()
        .map(|(class, pairs)| {
            let samples = pairs
                .into_par_iter()
                .map(|(stem, image_path, mask_path)| {
                    Ok(Sample {
                        image: read_image(&image_path, target_size)?,
                        mask: read_mask(&mask_path, target_size)?,
                        stem,
                        image_path,
                        mask_path,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((class, samples))
        })
        .collect::<Result<Vec<_>>>()?;
    ClassDataset::from_samples(root, classes)
}

/// Deterministically partitions the classes of `dataset`.
///
/// The test side gets `floor(n · test_fraction)` classes, clamped so that each
/// side keeps at least one class.
pub fn split_classes(
    dataset: &ClassDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    split_class_names(&dataset.classes, test_fraction, seed)
}

pub fn split_class_names(
    classes: &[String],
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(
            "test_fraction",
            format!("{test_fraction} is not in (0, 1)"),
        ));
    }
    let degenerate = || Error::DegenerateSplit {
        n_classes: classes.len(),
        test_fraction,
    };
    let mut sorted: Vec<String> = classes.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if n < 2 {
        return Err(degenerate());
    }
    // The epsilon absorbs representation error, e.g. 12 · (1/3).
    let n_test = ((n as f64 * test_fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    sorted.shuffle(&mut seed::rng(seed::derive(seed, seed::STREAM_SPLIT, 0)));
    let test_classes: BTreeSet<String> = sorted[..n_test].iter().cloned().collect();
    let train_classes: BTreeSet<String> = sorted[n_test..].iter().cloned().collect();
    if test_classes.is_empty() || train_classes.is_empty() {
        return Err(degenerate());
    }
    Ok(DatasetSplit {
        train_classes,
        test_classes,
    })
}

/// Images used only for the self-supervised surrogate task. Masks are never
/// read.
#[derive(Debug)]
pub struct UnlabeledPool {
    pub root: PathBuf,
    /// `(path relative to root without extension, image)`, sorted.
    pub entries: Vec<(String, Arc<Image>)>,
}

impl UnlabeledPool {
    pub fn from_images(root: impl Into<PathBuf>, entries: Vec<(String, Image)>) -> Self {
        Self {
            root: root.into(),
            entries: entries.into_iter().map(|(s, i)| (s, Arc::new(i))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for path in sorted_dir(dir)? {
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_file(&path) && !file_stem(&path).ends_with(MASK_SUFFIX) {
            out.push(path);
        }
    }
    Ok(())
}

/// Recursively loads every non-mask image below `root`.
pub fn load_unlabeled_pool(root: &Path, target_size: (usize, usize)) -> Result<UnlabeledPool> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut paths = Vec::new();
    collect_images(root, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::EmptyUnlabeledPool);
    }
    let entries = paths
        .into_par_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(&p).with_extension("");
            Ok((
                rel.to_string_lossy().into_owned(),
                read_image(&p, target_size)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnlabeledPool::from_images(root, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("class{i:02}")).collect()
    }

    #[test]
    fn twelve_classes_third_split() {
        let split = split_class_names(&names(12), 1.0 / 3.0, 0).unwrap();
        assert_eq!(split.train_classes.len(), 8);
        assert_eq!(split.test_classes.len(), 4);
        assert!(split.is_disjoint());
    }

    #[test]
    fn boundary_rule_keeps_one_per_side() {
        let split = split_class_names(&names(2), 0.99, 3).unwrap();
        assert_eq!(
            (split.train_classes.len(), split.test_classes.len()),
            (1, 1)
        );
        let split = split_class_names(&names(10), 0.01, 3).unwrap();
        assert_eq!(split.test_classes.len(), 1);
    }

    #[test]
    fn degenerate_and_invalid_fractions() {
        assert!(matches!(
            split_class_names(&names(1), 0.5, 0),
            Err(Error::DegenerateSplit { .. })
        ));
        assert!(split_class_names(&names(4), 0.0, 0).is_err());
        assert!(split_class_names(&names(4), 1.0, 0).is_err());
    }

    #[test]
    fn thousand_class_layout_leaves_760_training_classes() {
        let split = split_class_names(&names(1000), 0.24, 0).unwrap();
        assert_eq!(split.train_classes.len(), 760);
        assert_eq!(split.test_classes.len(), 240);
    }

    #[test]
    fn duplicate_class_rejected() {
        let sample = || Sample {
            stem: "a".into(),
            image_path: PathBuf::new(),
            mask_path: PathBuf::new(),
            image: Image::filled(3, 4, 4, 0.5),
            mask: BinaryMask::ones(4, 4),
        };
        let err = ClassDataset::from_samples(
            "mem",
            vec![("x".into(), vec![sample()]), ("x".into(), vec![sample()])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateClass(_)));
    }
}
