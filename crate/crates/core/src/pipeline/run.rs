use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{derive_dental_mask, DentalMargins};
use crate::archive::file_sha256;
use crate::detect::{align_face, detect, CanonicalTemplate, DetectorCheckpoint, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::gan::GanCheckpoint;
use crate::identity::{classify_attributes, match_context, AttributeLabels, ClassifierCheckpoint, ClassifierSet, ContextDb, CONTEXT_DB_FILE};
use crate::image::io::{load_png, save_png};
use crate::image::{stitch, ImageTensor, LandmarkSet, RegionMask, RegionSpec};
use crate::inversion::{EncoderCheckpoint, Inverter};
use crate::synth::{CorpusManifest, FaceSpec};

pub const RECORDS_FILE: &str = "records.json";

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_feather() -> usize {
    2
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Artifact paths and settings for a de-identification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub gan: PathBuf,
    pub encoder: PathBuf,
    pub detector: PathBuf,
    /// Gender, age-group and race classifiers, in any order.
    pub classifiers: Vec<PathBuf>,
    pub context_db: PathBuf,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_feather")]
    pub feather_radius: usize,
    #[serde(default)]
    pub margins: DentalMargins,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Validation(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.margins.horizontal >= 0.0 && self.margins.vertical >= 0.0) {
            return Err(Error::Validation(format!("dental margins must be ≥ 0, got {:?}", self.margins)));
        }
        if self.classifiers.len() != 3 {
            return Err(Error::Validation(format!(
                "expected 3 classifier checkpoints, got {}",
                self.classifiers.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactFingerprints {
    pub gan: String,
    pub encoder: String,
    pub detector: String,
    /// Gender, age-group and race classifiers.
    pub classifiers: Vec<String>,
    pub context_db: String,
}

/// All artifacts of a run, loaded and checked against one another.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub gan: GanCheckpoint,
    pub encoder: EncoderCheckpoint,
    pub detector: DetectorCheckpoint,
    pub classifiers: ClassifierSet,
    pub context_db: ContextDb,
    pub template: CanonicalTemplate,
    pub fingerprints: ArtifactFingerprints,
}

impl Pipeline {
    pub fn load(config: &PipelineConfig) -> Result<Pipeline> {
        config.validate()?;
        let classifiers = config
            .classifiers
            .iter()
            .map(|p| ClassifierCheckpoint::load(p))
            .collect::<Result<Vec<_>>>()?;
        let db = ContextDb::load(&config.context_db)?;
        let db_fp = file_sha256(&config.context_db.join(CONTEXT_DB_FILE))?;
        Pipeline::from_parts(
            config.clone(),
            GanCheckpoint::load(&config.gan)?,
            EncoderCheckpoint::load(&config.encoder)?,
            DetectorCheckpoint::load(&config.detector)?,
            ClassifierSet::from_checkpoints(classifiers)?,
            db,
            db_fp,
        )
    }

    /// Assemble a pipeline from in-memory artifacts. Fails with a
    /// configuration error on any fingerprint or resolution mismatch.
    pub fn from_parts(
        config: PipelineConfig,
        gan: GanCheckpoint,
        encoder: EncoderCheckpoint,
        detector: DetectorCheckpoint,
        classifiers: ClassifierSet,
        context_db: ContextDb,
        context_db_fingerprint: String,
    ) -> Result<Pipeline> {
        config.validate()?;
        Inverter::new(&encoder, &gan)?;
        let gan_fp = gan.fingerprint();
        if context_db.gan_fingerprint != gan_fp {
            return Err(Error::Config("context database was generated by a different GAN".into()));
        }
        if context_db.is_empty() {
            return Err(Error::Config("context database is empty".into()));
        }
        let res = gan.resolution();
        let sizes = [
            ("encoder", encoder.resolution()),
            ("detector", detector.resolution()),
            ("classifiers", classifiers.resolution()),
            ("context database", context_db.resolution),
        ];
        if let Some((name, r)) = sizes.iter().find(|(_, r)| *r != res) {
            return Err(Error::Config(format!("{name} works at {r}px, GAN at {res}px")));
        }
        let fingerprints = ArtifactFingerprints {
            gan: gan_fp,
            encoder: encoder.fingerprint(),
            detector: detector.fingerprint(),
            classifiers: classifiers.iter().map(|c| c.fingerprint()).collect(),
            context_db: context_db_fingerprint,
        };
        Ok(Pipeline {
            template: CanonicalTemplate::for_resolution(res),
            config,
            gan,
            encoder,
            detector,
            classifiers,
            context_db,
            fingerprints,
        })
    }

    pub fn resolution(&self) -> usize {
        self.gan.resolution()
    }

    pub fn inverter(&self) -> Inverter<'_> {
        Inverter::new(&self.encoder, &self.gan).expect("checked at construction")
    }

    /// Feathered mask of a recorded dental region.
    pub fn region_mask(&self, region: RegionSpec) -> Result<RegionMask> {
        let res = self.resolution();
        Ok(crate::image::feather_mask(
            &crate::image::make_region_mask(region, res, res)?,
            self.config.feather_radius,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub confidence: f64,
    pub bbox: RegionSpec,
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeidentifyRecord {
    pub input_id: String,
    pub detection: DetectionSummary,
    pub labels: AttributeLabels,
    pub context_id: usize,
    pub match_score: f64,
    pub dental_region: RegionSpec,
    pub feather_radius: usize,
    /// `masked_mse(output, aligned input, dental mask)`.
    pub masked_mse: f64,
    /// `mse(output, stitched)`.
    pub full_mse: f64,
    pub seed: u64,
    pub fingerprints: ArtifactFingerprints,
    pub timestamp: String,
}

/// Every intermediate image of one de-identification.
#[derive(Clone, Debug)]
pub struct Deidentified {
    pub aligned: ImageTensor,
    pub context: ImageTensor,
    pub stitched: ImageTensor,
    pub mask: RegionMask,
    pub output: ImageTensor,
    pub record: DeidentifyRecord,
}

/// Detect, align, classify, match, mask, stitch and invert one image.
pub fn deidentify_detailed(input: &ImageTensor, input_id: &str, pipeline: &Pipeline) -> Result<Deidentified> {
    let cfg = &pipeline.config;
    let res = pipeline.resolution();
    if input.dims() != (res, res) {
        return Err(Error::Argument(format!("input is {:?}, pipeline works at {res}x{res}", input.dims())));
    }
    let detection = detect(input, &pipeline.detector, cfg.threshold)?;
    let (bbox, landmarks) = match (detection.face_present, detection.bbox, detection.landmarks) {
        (true, Some(b), Some(l)) => (b, l),
        _ => return Err(Error::NoFace),
    };
    let (aligned, transform) = align_face(input, &detection, &pipeline.template)?;
    let labels = classify_attributes(&aligned, &pipeline.classifiers)?;
    let matched = match_context(&labels, &pipeline.context_db)?;
    let context = pipeline.context_db.get(matched.entry_id).expect("match returns a db id").image.clone();
    let (region, mask) = derive_dental_mask(&landmarks.map(&transform), cfg.margins, res, cfg.feather_radius)?;
    let stitched = stitch(&aligned, &context, &mask)?;
    let (output, report) = pipeline.inverter().merge_and_invert(&aligned, &mask, &context)?;
    let masked_mse = report
        .region_mse
        .ok_or_else(|| Error::Numerical("dental mask is empty".into()))?;
    let record = DeidentifyRecord {
        input_id: input_id.to_string(),
        detection: DetectionSummary {
            confidence: detection.confidence,
            bbox,
            landmarks,
        },
        labels,
        context_id: matched.entry_id,
        match_score: matched.score,
        dental_region: region,
        feather_radius: cfg.feather_radius,
        masked_mse,
        full_mse: report.full_mse,
        seed: cfg.seed,
        fingerprints: pipeline.fingerprints.clone(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    };
    Ok(Deidentified {
        aligned,
        context,
        stitched,
        mask,
        output,
        record,
    })
}

/// De-identify one image; returns the generated aligned face and its record.
pub fn deidentify(input: &ImageTensor, input_id: &str, pipeline: &Pipeline) -> Result<(ImageTensor, DeidentifyRecord)> {
    let d = deidentify_detailed(input, input_id, pipeline)?;
    Ok((d.output, d.record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Ok,
    Refused,
    Error,
}

/// Paths of the images written for one successful item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemImages {
    pub output: PathBuf,
    pub aligned: PathBuf,
    pub context: PathBuf,
    pub stitched: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub input_id: String,
    pub input_path: PathBuf,
    pub status: ItemStatus,
    pub message: Option<String>,
    /// Ground-truth labels when the input came from a labeled corpus.
    pub truth: Option<FaceSpec>,
    pub record: Option<DeidentifyRecord>,
    pub images: Option<ItemImages>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub succeeded: usize,
    pub refused: usize,
    pub failed: usize,
    pub items: Vec<BatchItem>,
}

impl BatchSummary {
    pub fn load(dir: &Path) -> Result<BatchSummary> {
        let path = dir.join(RECORDS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
    }
}

/// One batch input: an id, a path and optional ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub id: String,
    pub path: PathBuf,
    pub truth: Option<FaceSpec>,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// PNG files of a directory, ordered by id.
pub fn inputs_from_dir(dir: &Path) -> Result<Vec<BatchInput>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(BatchInput {
                id: stem(&path),
                path,
                truth: None,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn inputs_from_manifest(manifest: &CorpusManifest) -> Vec<BatchInput> {
    let mut out: Vec<BatchInput> = (0..manifest.entries.len())
        .map(|i| {
            let path = manifest.image_path(i);
            BatchInput {
                id: stem(&path),
                path,
                truth: manifest.entries[i].labels,
            }
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// De-identify every input, writing `{id}.png` plus the aligned, context
/// and stitched panels for each success and `records.json` for the batch.
/// Failures are recorded per item; refused inputs get no image.
pub fn batch_deidentify(inputs: &[BatchInput], pipeline: &Pipeline, output_dir: &Path) -> Result<BatchSummary> {
    let panels = output_dir.join("panels");
    std::fs::create_dir_all(&panels).map_err(|e| Error::io(&panels, e))?;
    let mut items = Vec::with_capacity(inputs.len());
    for input in inputs {
        let result = load_png(&input.path).and_then(|img| deidentify_detailed(&img, &input.id, pipeline));
        let mut item = BatchItem {
            input_id: input.id.clone(),
            input_path: input.path.clone(),
            status: ItemStatus::Ok,
            message: None,
            truth: input.truth,
            record: None,
            images: None,
        };
        match result {
            Ok(d) => {
                let images = ItemImages {
                    output: output_dir.join(format!("{}.png", input.id)),
                    aligned: panels.join(format!("{}_aligned.png", input.id)),
                    context: panels.join(format!("{}_context.png", input.id)),
                    stitched: panels.join(format!("{}_stitched.png", input.id)),
                };
                save_png(&d.aligned, &images.aligned)?;
                save_png(&d.context, &images.context)?;
                save_png(&d.stitched, &images.stitched)?;
                save_png(&d.output, &images.output)?;
                item.record = Some(d.record);
                item.images = Some(images);
            }
            Err(e) => {
                log::warn!("{}: {e}", input.id);
                item.status = if matches!(e, Error::NoFace) {
                    ItemStatus::Refused
                } else {
                    ItemStatus::Error
                };
                item.message = Some(e.to_string());
            }
        }
        items.push(item);
    }
    let count = |s: ItemStatus| items.iter().filter(|i| i.status == s).count();
    let summary = BatchSummary {
        total: items.len(),
        succeeded: count(ItemStatus::Ok),
        refused: count(ItemStatus::Refused),
        failed: count(ItemStatus::Error),
        items,
    };
    let path = output_dir.join(RECORDS_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "batch: {} inputs, {} de-identified, {} refused, {} failed",
        summary.total,
        summary.succeeded,
        summary.refused,
        summary.failed
    );
    Ok(summary)
}
