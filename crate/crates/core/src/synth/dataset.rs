use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{render_face, render_negative};
use super::{spec_from_seed, Distribution, FaceSpec};
use crate::error::{arg, Error, Result};
use crate::image::io::{load_png, save_png};
use crate::image::{ImageTensor, LandmarkSet, RegionSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NEGATIVE_DISTRIBUTION: &str = "negative";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub labels: Option<FaceSpec>,
    pub landmarks: Option<LandmarkSet>,
    pub dental_region: Option<RegionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub distribution_name: String,
    pub entries: Vec<CorpusEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Per-entry seed derived from the corpus seed and the entry index.
pub fn entry_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index as u64)
        .wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn face_file_name(index: usize) -> String {
    format!("face_{index:06}.png")
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<CorpusManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if manifest.entries.len() != manifest.count {
            return Err(Error::format(
                &path,
                format!("count {} disagrees with {} entries", manifest.count, manifest.entries.len()),
            ));
        }
        if let Some(missing) = manifest.entries.iter().find(|e| !dir.join(&e.file).is_file()) {
            return Err(Error::format(&path, format!("referenced file {} is missing", missing.file)));
        }
        manifest.root = dir.to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].file)
    }

    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        load_png(&self.image_path(index))
    }

    pub fn load_images(&self) -> Result<Vec<ImageTensor>> {
        (0..self.entries.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Render `count` faces from `distribution` and write them, with
/// `manifest.json`, into `output`.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    distribution: &str,
    resolution: usize,
    output: &Path,
) -> Result<CorpusManifest> {
    if count == 0 {
        return Err(arg("count must be at least 1"));
    }
    let dist: Distribution = distribution.parse()?;
    prepare_dir(output)?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let spec = spec_from_seed(entry_seed(seed, index), dist);
        let face = render_face(&spec, resolution)?;
        let file = face_file_name(index);
        save_png(&face.image, &output.join(&file))?;
        entries.push(CorpusEntry {
            file,
            labels: Some(face.labels),
            landmarks: Some(face.landmarks),
            dental_region: Some(face.dental_region),
        });
    }
    let manifest = CorpusManifest {
        seed,
        count,
        resolution,
        distribution_name: dist.name().to_string(),
        entries,
        root: output.to_path_buf(),
    };
    manifest.save(output)?;
    Ok(manifest)
}

/// Face-free texture corpus in the same on-disk format, without labels.
pub fn generate_negatives(count: usize, seed: u64, resolution: usize, output: &Path) -> Result<CorpusManifest> {
    if count == 0 {
        return Err(arg("count must be at least 1"));
    }
    prepare_dir(output)?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let image = render_negative(entry_seed(seed, index), resolution)?;
        let file = format!("negative_{index:06}.png");
        save_png(&image, &output.join(&file))?;
        entries.push(CorpusEntry {
            file,
            labels: None,
            landmarks: None,
            dental_region: None,
        });
    }
    let manifest = CorpusManifest {
        seed,
        count,
        resolution,
        distribution_name: NEGATIVE_DISTRIBUTION.to_string(),
        entries,
        root: output.to_path_buf(),
    };
    manifest.save(output)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(6, 1, "clinic", 32, a.path()).unwrap();
        generate_dataset(6, 1, "clinic", 32, b.path()).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
        let loaded = CorpusManifest::load(a.path()).unwrap();
        assert_eq!(loaded, m);
        assert!(loaded.entries.iter().all(|e| e.labels.unwrap().tooth_gap >= 0.15));
        assert_eq!(loaded.load_images().unwrap().len(), 6);
    }

    #[test]
    fn bad_arguments() {
        let a = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, 1, "base", 32, a.path()).is_err());
        assert!(matches!(generate_dataset(1, 1, "other", 32, a.path()), Err(Error::Config(_))));
        let blocker = a.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(matches!(
            generate_dataset(1, 1, "base", 32, &blocker.join("sub")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn missing_image_is_reported() {
        let a = tempfile::tempdir().unwrap();
        generate_negatives(3, 4, 32, a.path()).unwrap();
        std::fs::remove_file(a.path().join("negative_000001.png")).unwrap();
        assert!(matches!(CorpusManifest::load(a.path()), Err(Error::Format { .. })));
    }
}
