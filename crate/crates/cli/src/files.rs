//! Image folders and datasets on disk.

use std::fs;
use std::path::{Path, PathBuf};

use venomguard::dataio::{load_image, DatasetManifest, FaceSample, ImageTensor, Splits, MANIFEST_FILE};
use venomguard::{Error, Result};

/// A named image read from a folder.
pub struct NamedImage {
    pub name: String,
    pub image: ImageTensor,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("vgf") | Some("png")
    )
}

/// Image files of `dir`, sorted by file name. A dataset directory stands
/// for its `images/` folder.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join(MANIFEST_FILE).is_file() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_images(dir: &Path) -> Result<Vec<NamedImage>> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no images found in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            Ok(NamedImage {
                name: p.file_name().unwrap().to_string_lossy().into_owned(),
                image: load_image(p)?,
            })
        })
        .collect()
}

/// Load a dataset directory. Samples are regenerated from the manifest and
/// their images replaced by the files on disk, so a poisoned copy of a
/// dataset loads with its poisoned images.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Splits<FaceSample>)> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::Config(format!("{} holds no dataset manifest", dir.display())));
    }
    let manifest = DatasetManifest::load(dir)?;
    let mut splits = manifest.samples()?;
    let mut by_split = [0usize; 3];
    for e in &manifest.entries {
        let (slot, list) = match e.split.as_str() {
            "defense_train" => (0, &mut splits.defense_train),
            "target_train" => (1, &mut splits.target_train),
            "eval" => (2, &mut splits.eval),
            other => return Err(Error::Config(format!("unknown split {other:?} in manifest"))),
        };
        let sample = list
            .get_mut(by_split[slot])
            .ok_or_else(|| Error::Config("manifest splits disagree with its fractions".into()))?;
        by_split[slot] += 1;
        let path = dir.join(&e.image);
        if path.is_file() {
            sample.image = load_image(&path)?;
        }
    }
    Ok((manifest, splits))
}
