//! Reader and writer for the public MVTec AD directory layout:
//! `<root>/<category>/{train/good, test/<defect>, ground_truth/<defect>}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

use super::{Dataset, Label, Sample, Split};

/// Side length every image and mask is resampled to on load.
pub const IMAGE_SIDE: usize = 256;

pub const TEXTURE_CATEGORIES: [&str; 5] = ["carpet", "grid", "leather", "tile", "wood"];
pub const OBJECT_CATEGORIES: [&str; 10] = [
    "bottle",
    "cable",
    "capsule",
    "hazelnut",
    "metal_nut",
    "pill",
    "screw",
    "toothbrush",
    "transistor",
    "zipper",
];

const NORMAL_DIR: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryKind {
    Texture,
    Object,
    Other,
}

pub fn category_kind(name: &str) -> CategoryKind {
    if TEXTURE_CATEGORIES.contains(&name) {
        CategoryKind::Texture
    } else if OBJECT_CATEGORIES.contains(&name) {
        CategoryKind::Object
    } else {
        CategoryKind::Other
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect())
}

fn sub_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn mask_path(root: &Path, defect: &str, image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    root.join("ground_truth").join(defect).join(format!("{stem}_mask.png"))
}

/// Category names under `root`, i.e. subdirectories that contain `train/good`.
pub fn list_categories(root: &Path) -> Result<Vec<String>> {
    Ok(sub_dirs(root)?
        .into_iter()
        .filter(|d| d.join("train").join(NORMAL_DIR).is_dir())
        .map(|d| file_name(&d))
        .collect())
}

/// Loads one category, resizing images bilinearly and masks by nearest neighbour to
/// `IMAGE_SIDE`. Normal test images get an empty mask.
pub fn load_mvtec_category(root: &Path, category: &str) -> Result<Dataset> {
    let base = root.join(category);
    let train_dir = base.join("train").join(NORMAL_DIR);
    let test_dir = base.join("test");
    for dir in [&train_dir, &test_dir] {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "{} is not an MVTec AD category: missing {}",
                base.display(),
                dir.display()
            )));
        }
    }

    let mut train = Vec::new();
    for path in image_files(&train_dir)? {
        train.push(Sample {
            image: Image::load_resized(&path, IMAGE_SIDE)?,
            label: Label::Normal,
            mask: None,
            category: category.to_string(),
            split: Split::Train,
            name: format!("train/{NORMAL_DIR}/{}", file_name(&path)),
        });
    }
    if train.is_empty() {
        return Err(Error::Dataset(format!("no training images in {}", train_dir.display())));
    }

    let mut test = Vec::new();
    for dir in sub_dirs(&test_dir)? {
        let defect = file_name(&dir);
        let label = if defect == NORMAL_DIR { Label::Normal } else { Label::Defective };
        for path in image_files(&dir)? {
            let mask = match label {
                Label::Normal => Mask::empty(IMAGE_SIDE, IMAGE_SIDE),
                Label::Defective => {
                    let mpath = mask_path(&base, &defect, &path);
                    if !mpath.is_file() {
                        return Err(Error::MissingMask(mpath));
                    }
                    Mask::load_resized(&mpath, IMAGE_SIDE)?
                }
            };
            test.push(Sample {
                image: Image::load_resized(&path, IMAGE_SIDE)?,
                label,
                mask: Some(mask),
                category: category.to_string(),
                split: Split::Test,
                name: format!("test/{defect}/{}", file_name(&path)),
            });
        }
    }
    if test.is_empty() {
        return Err(Error::Dataset(format!("no test images in {}", test_dir.display())));
    }
    Ok(Dataset {
        category: category.to_string(),
        train,
        test,
    })
}

/// Writes a dataset in the same layout, so it can be read back with [`load_mvtec_category`].
/// Sample names must look like `<split>/<group>/<file>.png`.
pub fn write_mvtec_category(root: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let base = root.join(&dataset.category);
    for sample in dataset.train.iter().chain(&dataset.test) {
        let rel = Path::new(&sample.name);
        let parts: Vec<_> = rel.components().collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "sample name {:?} is not <split>/<group>/<file>",
                sample.name
            )));
        }
        let path = base.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        sample.image.save_png(&path)?;
        if sample.is_defective() {
            let mask = sample
                .mask
                .as_ref()
                .ok_or_else(|| Error::MissingMask(path.clone()))?;
            let defect = file_name(path.parent().unwrap_or(&base));
            let mpath = mask_path(&base, &defect, &path);
            if let Some(parent) = mpath.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            mask.save_png(&mpath)?;
        }
    }
    Ok(base)
}
