use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{parse_age_group, parse_gender, parse_race, AttributeLabels, ClassifierSet};
use crate::error::{arg, Error, Result};
use crate::gan::{codes_to_tensor, sample_latent, tensor_to_codes, GanCheckpoint, StyleCode};
use crate::image::io::{load_png, quantize, save_png};
use crate::image::ImageTensor;

pub const CONTEXT_DB_FILE: &str = "contextdb.json";

const GENERATION_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labeling {
    Auto,
    Manifest,
}

impl FromStr for Labeling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Labeling::Auto),
            "manifest" => Ok(Labeling::Manifest),
            other => Err(arg(format!("unknown labeling mode {other:?} (expected auto or manifest)"))),
        }
    }
}

impl fmt::Display for Labeling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Labeling::Auto => "auto",
            Labeling::Manifest => "manifest",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextEntry {
    pub id: usize,
    pub image: ImageTensor,
    pub labels: AttributeLabels,
    pub style: StyleCode,
}

impl ContextEntry {
    pub fn file_name(&self) -> String {
        entry_file_name(self.id)
    }
}

fn entry_file_name(id: usize) -> String {
    format!("ctx_{id:04}.png")
}

/// Generated context identities with their labels, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextDb {
    pub entries: Vec<ContextEntry>,
    pub gan_fingerprint: String,
    pub seed: u64,
    pub labeling: Labeling,
    pub resolution: usize,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    id: usize,
    file: String,
    labels: AttributeLabels,
    style: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DbRecord {
    gan_fingerprint: String,
    seed: u64,
    labeling: Labeling,
    resolution: usize,
    entries: Vec<EntryRecord>,
}

impl ContextDb {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ContextEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            save_png(&e.image, &dir.join(e.file_name()))?;
            records.push(EntryRecord {
                id: e.id,
                file: e.file_name(),
                labels: e.labels,
                style: e.style.clone(),
            });
        }
        let record = DbRecord {
            gan_fingerprint: self.gan_fingerprint.clone(),
            seed: self.seed,
            labeling: self.labeling,
            resolution: self.resolution,
            entries: records,
        };
        let path = dir.join(CONTEXT_DB_FILE);
        let text = serde_json::to_string_pretty(&record).map_err(|e| Error::format(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ContextDb> {
        let path = dir.join(CONTEXT_DB_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: DbRecord = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(record.entries.len());
        for r in record.entries {
            if !seen.insert(r.id) {
                return Err(Error::format(&path, format!("duplicate entry id {}", r.id)));
            }
            let image = load_png(&dir.join(&r.file))?;
            if image.dims() != (record.resolution, record.resolution) {
                return Err(Error::format(
                    dir.join(&r.file),
                    format!("image is {:?}, database resolution is {}", image.dims(), record.resolution),
                ));
            }
            entries.push(ContextEntry {
                id: r.id,
                image,
                labels: r.labels,
                style: r.style,
            });
        }
        Ok(ContextDb {
            entries,
            gan_fingerprint: record.gan_fingerprint,
            seed: record.seed,
            labeling: record.labeling,
            resolution: record.resolution,
        })
    }
}

/// Read a `id,gender,age,race` label file. Every manifest label carries
/// full confidence.
fn read_label_manifest(path: &Path) -> Result<BTreeMap<usize, AttributeLabels>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name:?}")))
    };
    let (ci, cg, ca, cr) = (column("id")?, column("gender")?, column("age")?, column("race")?);
    let mut out = BTreeMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let bad = |e: Error| Error::Validation(format!("{}: row {}: {e}", path.display(), line + 1));
        let id = row[ci]
            .parse::<usize>()
            .map_err(|_| bad(arg(format!("invalid id {:?}", &row[ci]))))?;
        let labels = AttributeLabels::new(
            parse_gender(&row[cg]).map_err(bad)?,
            parse_age_group(&row[ca]).map_err(bad)?,
            parse_race(&row[cr]).map_err(bad)?,
            [1.0; 3],
        )
        .map_err(bad)?;
        out.insert(id, labels);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Generate `count` context identities from `gan` and label them, either
/// with the attribute classifiers or from a label manifest.
pub fn build_context_db(
    gan: &GanCheckpoint,
    count: usize,
    seed: u64,
    labeling: Labeling,
    classifiers: Option<&ClassifierSet>,
    label_manifest: Option<&Path>,
) -> Result<ContextDb> {
    if count == 0 {
        return Err(arg("context database needs at least one entry"));
    }
    let res = gan.resolution();
    let manual = match labeling {
        Labeling::Auto => {
            let set = classifiers.ok_or_else(|| Error::Config("auto labeling requires the attribute classifiers".into()))?;
            if set.resolution() != res {
                return Err(Error::Config(format!(
                    "classifiers work at {}px, generator at {res}px",
                    set.resolution()
                )));
            }
            None
        }
        Labeling::Manifest => {
            let path = label_manifest.ok_or_else(|| Error::Config("manifest labeling requires a label file".into()))?;
            let labels = read_label_manifest(path)?;
            let missing: Vec<String> = (0..count).filter(|i| !labels.contains_key(i)).map(|i| i.to_string()).collect();
            if !missing.is_empty() {
                return Err(Error::Validation(format!(
                    "label manifest {} has no labels for ids: {}",
                    path.display(),
                    missing.join(", ")
                )));
            }
            Some(labels)
        }
    };

    let generator = gan.generator();
    let latents = sample_latent(count, seed, generator.d_z());
    let mut entries = Vec::with_capacity(count);
    for (chunk_index, chunk) in latents.chunks(GENERATION_CHUNK).enumerate() {
        let w = generator.map(&codes_to_tensor(chunk)?);
        let images = generator.synthesize(&w);
        let styles = tensor_to_codes(&w);
        let images: Vec<ImageTensor> = (0..chunk.len())
            .map(|n| ImageTensor::from_tensor(&images, n).map(|img| quantize(&img)))
            .collect::<Result<_>>()?;
        let labels = match &manual {
            Some(table) => (0..chunk.len()).map(|n| table[&(chunk_index * GENERATION_CHUNK + n)]).collect(),
            None => classifiers.expect("checked above").classify_batch(&images.iter().collect::<Vec<_>>())?,
        };
        for (n, ((image, style), labels)) in images.into_iter().zip(styles).zip(labels).enumerate() {
            entries.push(ContextEntry {
                id: chunk_index * GENERATION_CHUNK + n,
                image,
                labels,
                style,
            });
        }
    }
    Ok(ContextDb {
        entries,
        gan_fingerprint: gan.fingerprint(),
        seed,
        labeling,
        resolution: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::classifier::tests::{mini_config, mini_set};
    use crate::identity::{train_classifier_on, Attribute};
    use crate::inversion::tests::{mini_gan, tiny_images};
    use crate::synth::{AgeGroup, Gender};

    fn write_manifest(dir: &Path, rows: &[&str]) -> std::path::PathBuf {
        let path = dir.join("labels.csv");
        std::fs::write(&path, format!("id,gender,age,race\n{}\n", rows.join("\n"))).unwrap();
        path
    }

    #[test]
    fn manifest_labels_are_attached_by_id() {
        let gan = mini_gan();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &["2,B,Senior,2", "0,A,Child,0", "1, A , Adult , 1"]);
        let db = build_context_db(&gan, 3, 5, Labeling::Manifest, None, Some(&path)).unwrap();
        assert_eq!(db.entries.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(db.entries[2].labels.gender, Gender::B);
        assert_eq!(db.entries[2].labels.age_group, AgeGroup::Senior);
        assert_eq!(db.entries[1].labels.race_class, 1);
        for e in &db.entries {
            assert_eq!(gan.generate(&e.style).map(|g| quantize(&g)).unwrap(), e.image);
        }
    }

    #[test]
    fn incomplete_manifest_lists_missing_ids() {
        let gan = mini_gan();
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &["0,A,Child,0", "2,B,Adult,1"]);
        match build_context_db(&gan, 4, 5, Labeling::Manifest, None, Some(&path)) {
            Err(Error::Validation(msg)) => assert!(msg.ends_with("ids: 1, 3"), "{msg}"),
            other => panic!("expected a validation error, got {other:?}"),
        }
        let bad = write_manifest(dir.path(), &["0,A,Child,7"]);
        assert!(matches!(
            build_context_db(&gan, 1, 5, Labeling::Manifest, None, Some(&bad)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(build_context_db(&gan, 1, 5, Labeling::Manifest, None, None), Err(Error::Config(_))));
        assert!(matches!(build_context_db(&gan, 1, 5, Labeling::Auto, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn auto_build_is_deterministic_and_round_trips() {
        let gan = mini_gan();
        assert!(matches!(
            build_context_db(&gan, 2, 1, Labeling::Auto, Some(&mini_set()), None),
            Err(Error::Config(_))
        ));
        let images = tiny_images(8);
        let set = ClassifierSet::from_checkpoints(
            Attribute::ALL
                .iter()
                .map(|&a| {
                    let labels: Vec<usize> = (0..8).map(|i| i % a.categories()).collect();
                    train_classifier_on(a, &images, &labels, &mini_config()).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let a = build_context_db(&gan, 40, 9, Labeling::Auto, Some(&set), None).unwrap();
        let b = build_context_db(&gan, 40, 9, Labeling::Auto, Some(&set), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(ContextDb::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn manifest_db_round_trips_on_disk() {
        let gan = mini_gan();
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<String> = (0..35).map(|i| format!("{i},{},Teenager,{}", ["A", "B"][i % 2], i % 3)).collect();
        let path = write_manifest(dir.path(), &rows.iter().map(String::as_str).collect::<Vec<_>>());
        let db = build_context_db(&gan, 35, 2, Labeling::Manifest, None, Some(&path)).unwrap();
        let out = dir.path().join("db");
        db.save(&out).unwrap();
        assert!(out.join("ctx_0034.png").exists());
        assert_eq!(ContextDb::load(&out).unwrap(), db);
        assert!(matches!(ContextDb::load(&dir.path().join("absent")), Err(Error::Io { .. })));
        let other = build_context_db(&gan, 35, 3, Labeling::Manifest, None, Some(&path)).unwrap();
        assert_ne!(other.entries[0].image, db.entries[0].image);
    }
}
