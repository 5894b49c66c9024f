//! Dataset layout on disk.
//!
//! ```text
//! <root>/<dataset>/images/<stem>.<png|jpg|jpeg>   tampered images
//! <root>/<dataset>/masks/<stem>.png               ground truth, nonzero = tampered
//! <root>/<dataset>/authentic/<stem>.<ext>         optional authentic images
//! ```
//!
//! `<root>` may also be a single dataset directory.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::SkipRecord;
use crate::messages::Label;
use crate::tools::MaskImage;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no datasets found under {0}")]
    Empty(PathBuf),
    #[error("could not read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub dataset: String,
    pub id: String,
    pub image_path: PathBuf,
    pub gt_mask: Option<MaskImage>,
    pub gt_label: Label,
}

/// Samples found on disk plus the ones that could not be ingested.
#[derive(Debug, Clone, Default)]
pub struct Listing {
    pub samples: Vec<EvalSample>,
    pub skipped: Vec<SkipRecord>,
}

fn is_dataset_dir(dir: &Path) -> bool {
    dir.join("images").is_dir() || dir.join("authentic").is_dir()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let rd = std::fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    Ok(paths)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Enumerate every dataset under `root`, loading ground-truth masks.
pub fn load_datasets(root: &Path) -> Result<Listing, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let dirs: Vec<PathBuf> = if is_dataset_dir(root) {
        vec![root.to_path_buf()]
    } else {
        sorted_entries(root)?.into_iter().filter(|p| p.is_dir() && is_dataset_dir(p)).collect()
    };
    let mut listing = Listing::default();
    for dir in &dirs {
        load_one(dir, &mut listing)?;
    }
    if listing.samples.is_empty() && listing.skipped.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    Ok(listing)
}

fn load_one(dir: &Path, listing: &mut Listing) -> Result<(), DatasetError> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let skip = |listing: &mut Listing, id: String, reason: String| {
        listing.skipped.push(SkipRecord {
            dataset: name.clone(),
            id,
            reason,
        })
    };

    for image_path in image_files(&dir.join("images"))? {
        let id = stem(&image_path);
        let dims = match image::image_dimensions(&image_path) {
            Ok(d) => d,
            Err(e) => {
                skip(listing, id, format!("unreadable image: {e}"));
                continue;
            }
        };
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        if !mask_path.is_file() {
            skip(listing, id, format!("missing mask {}", mask_path.display()));
            continue;
        }
        let mask = match MaskImage::open(&mask_path) {
            Ok(m) => m,
            Err(e) => {
                skip(listing, id, format!("unreadable mask: {e}"));
                continue;
            }
        };
        if mask.dims() != dims {
            skip(listing, id, format!("mask is {:?}, image is {dims:?}", mask.dims()));
            continue;
        }
        if mask.is_empty() {
            skip(listing, id, "mask has no tampered pixels".into());
            continue;
        }
        listing.samples.push(EvalSample {
            dataset: name.clone(),
            id,
            image_path,
            gt_mask: Some(mask),
            gt_label: Label::Tampered,
        });
    }
    for image_path in image_files(&dir.join("authentic"))? {
        let id = stem(&image_path);
        if let Err(e) = image::image_dimensions(&image_path) {
            skip(listing, id, format!("unreadable image: {e}"));
            continue;
        }
        listing.samples.push(EvalSample {
            dataset: name.clone(),
            id,
            image_path,
            gt_mask: None,
            gt_label: Label::Authentic,
        });
    }
    Ok(())
}
