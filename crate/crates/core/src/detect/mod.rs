//! Single-stage face detector: a shared convolutional trunk with presence,
//! box and five-point landmark heads, plus similarity alignment to a
//! canonical template.

mod train;

pub use train::{evaluate_detector, train_detector, train_detector_on, DetectorHistoryRow, DetectorMetrics, LabeledFace};

use std::path::{Path, PathBuf};

use deid_nn::{ParamSet, Scalar, Sequential, Tensor, Trace, LRELU_GAIN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::image::{estimate_similarity_transform, warp_image, ImageTensor, LandmarkSet, Point, RegionSpec, SimilarityTransform};
use crate::synth::canonical_landmarks;

pub const CHECKPOINT_KIND: &str = "detector";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Face box of an unposed render in unit coordinates `(u0, v0, u1, v1)`.
pub const CANONICAL_FACE_BOX: [f64; 4] = [0.19, 0.10, 0.81, 0.93];

/// Five reference landmark positions in the aligned frame (pixel units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalTemplate {
    pub resolution: usize,
    pub landmarks: LandmarkSet,
}

impl CanonicalTemplate {
    pub fn for_resolution(resolution: usize) -> Self {
        CanonicalTemplate {
            resolution,
            landmarks: canonical_landmarks(resolution),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub face_present: bool,
    pub confidence: f64,
    pub bbox: Option<RegionSpec>,
    pub landmarks: Option<LandmarkSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Weight of the box and landmark regression loss.
    pub geometry_weight: f64,
    /// Share of each batch drawn from the negatives.
    pub negative_fraction: f64,
    /// Posed copies rendered per corpus face for augmentation.
    pub posed_copies: usize,
    /// Largest pose shift, in pixels at 64×64 (scaled with resolution).
    pub max_shift: f64,
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub log_every: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            channels: vec![8, 16, 32, 32],
            hidden: 128,
            geometry_weight: 10.0,
            negative_fraction: 0.25,
            posed_copies: 1,
            max_shift: 10.0,
            max_rotation: 0.15,
            scale_range: (0.9, 1.1),
            log_every: 500,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("detector batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.negative_fraction) || self.geometry_weight < 0.0 {
            return Err(Error::Config("negative_fraction must lie in [0, 1) and geometry_weight be ≥ 0".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("detector channels and hidden width must be positive".into()));
        }
        if resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "{} downsampling stages do not divide resolution {resolution}",
                self.channels.len()
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) || self.max_shift < 0.0 || self.max_rotation < 0.0 {
            return Err(Error::Config("invalid pose augmentation ranges".into()));
        }
        Ok(())
    }
}

/// Trunk plus three linear heads sharing one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorNet {
    pub resolution: usize,
    trunk: Sequential,
    presence: Sequential,
    bbox: Sequential,
    landmarks: Sequential,
}

pub struct DetectorTrace<T> {
    trunk: Trace<T>,
    heads: [Trace<T>; 3],
}

/// Raw head outputs: presence logits `[1, n]`, boxes `[4, n]` and
/// landmarks `[10, n]` in unit coordinates.
pub struct DetectorOutput<T> {
    pub logits: Tensor<T>,
    pub boxes: Tensor<T>,
    pub landmarks: Tensor<T>,
}

impl DetectorNet {
    pub fn build<T: Scalar>(resolution: usize, channels: &[usize], hidden: usize, seed: u64) -> (DetectorNet, ParamSet<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut trunk = Sequential::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            trunk.conv(&mut p, &format!("trunk.conv{i}"), cin, c, 3, LRELU_GAIN, &mut rng).lrelu().pool();
            cin = c;
        }
        let spatial = resolution >> channels.len();
        trunk
            .flatten()
            .dense(&mut p, "trunk.fc", cin * spatial * spatial, hidden, LRELU_GAIN, &mut rng)
            .lrelu();
        let mut head = |name: &str, out: usize| {
            let mut s = Sequential::new();
            s.dense(&mut p, name, hidden, out, 1.0, &mut rng);
            s
        };
        let presence = head("presence", 1);
        let bbox = head("bbox", 4);
        let landmarks = head("landmarks", 10);
        // Start the regression heads at the canonical geometry.
        let template = canonical_landmarks(resolution).to_flat();
        let r = resolution as f64;
        let lm_bias = p.id("landmarks.bias").expect("landmark head");
        for (b, v) in p.data_mut(lm_bias).iter_mut().zip(template) {
            *b = T::lit((v + 0.5) / r);
        }
        let box_bias = p.id("bbox.bias").expect("box head");
        for (b, v) in p.data_mut(box_bias).iter_mut().zip(CANONICAL_FACE_BOX) {
            *b = T::lit(v);
        }
        (
            DetectorNet {
                resolution,
                trunk,
                presence,
                bbox,
                landmarks,
            },
            p,
        )
    }

    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> DetectorOutput<T> {
        let f = self.trunk.infer(p, x);
        DetectorOutput {
            logits: self.presence.infer(p, &f),
            boxes: self.bbox.infer(p, &f),
            landmarks: self.landmarks.infer(p, &f),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> (DetectorOutput<T>, DetectorTrace<T>) {
        let trunk = self.trunk.forward(p, x);
        let f = &trunk.output;
        let heads = [
            self.presence.forward(p, f.clone()),
            self.bbox.forward(p, f.clone()),
            self.landmarks.forward(p, f.clone()),
        ];
        let out = DetectorOutput {
            logits: heads[0].output.clone(),
            boxes: heads[1].output.clone(),
            landmarks: heads[2].output.clone(),
        };
        (out, DetectorTrace { trunk, heads })
    }

    /// Accumulate parameter gradients for the given head-output gradients.
    pub fn backward<T: Scalar>(&self, p: &ParamSet<T>, trace: &DetectorTrace<T>, g: DetectorOutput<T>, grads: &mut ParamSet<T>) {
        let mut gf = self.presence.backward(p, &trace.heads[0], g.logits, Some(grads));
        gf.add_assign(&self.bbox.backward(p, &trace.heads[1], g.boxes, Some(grads)));
        gf.add_assign(&self.landmarks.backward(p, &trace.heads[2], g.landmarks, Some(grads)));
        self.trunk.backward(p, &trace.trunk, gf, Some(grads));
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
pub struct DetectorCheckpoint {
    pub config: DetectorTrainConfig,
    pub step: usize,
    pub net: DetectorNet,
    pub params: ParamSet<f32>,
    pub template: CanonicalTemplate,
    pub corpus_fingerprint: String,
    pub history: Vec<DetectorHistoryRow>,
}

impl DetectorCheckpoint {
    pub fn resolution(&self) -> usize {
        self.net.resolution
    }

    pub fn to_archive(&self) -> Checkpoint {
        let mut history = csv::Writer::from_writer(Vec::new());
        for row in &self.history {
            history.serialize(row).expect("history row serializes");
        }
        Checkpoint::new(
            CHECKPOINT_KIND,
            json!({
                "config": self.config,
                "step": self.step,
                "resolution": self.net.resolution,
                "template": self.template,
                "corpus_fingerprint": self.corpus_fingerprint,
            }),
        )
        .with_group("detector", &self.params)
        .with_file("history.csv", history.into_inner().expect("in-memory CSV"))
    }

    pub fn fingerprint(&self) -> String {
        self.to_archive().fingerprint()
    }

    pub fn from_archive(ck: &Checkpoint) -> Result<DetectorCheckpoint> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DetectorTrainConfig = ck.meta_field("config")?;
        let resolution: usize = ck.meta_field("resolution")?;
        config.validate(resolution)?;
        let (net, mut params) = DetectorNet::build::<f32>(resolution, &config.channels, config.hidden, 0);
        params
            .load_from(ck.group("detector")?)
            .map_err(|e| Error::Config(format!("group detector: {e}")))?;
        let history = match ck.files.get("history.csv") {
            Some(bytes) => csv::Reader::from_reader(bytes.as_slice())
                .deserialize()
                .collect::<std::result::Result<Vec<DetectorHistoryRow>, _>>()
                .map_err(|e| Error::Config(format!("history: {e}")))?,
            None => Vec::new(),
        };
        Ok(DetectorCheckpoint {
            step: ck.meta_field("step")?,
            template: ck.meta_field("template")?,
            corpus_fingerprint: ck.meta_field("corpus_fingerprint")?,
            config,
            net,
            params,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<DetectorCheckpoint> {
        Self::from_archive(&Checkpoint::load(path)?)
    }
}

/// Run the detector on one image at its working resolution.
pub fn detect(image: &ImageTensor, detector: &DetectorCheckpoint, threshold: f64) -> Result<DetectionResult> {
    Ok(detect_batch(&[image], detector, threshold)?.remove(0))
}

pub fn detect_batch(images: &[&ImageTensor], detector: &DetectorCheckpoint, threshold: f64) -> Result<Vec<DetectionResult>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(arg(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let res = detector.resolution();
    if let Some(bad) = images.iter().find(|i| i.dims() != (res, res)) {
        return Err(arg(format!("image is {:?}, detector expects {res}x{res}", bad.dims())));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let out = detector.net.infer(&detector.params, &ImageTensor::batch_to_tensor::<f32>(images)?);
    let r = res as f64;
    // Pixel coordinates are clamped into the image's continuous extent.
    let hi = r - 0.5 - 1e-6;
    let to_px = |u: f32| (u as f64 * r - 0.5).clamp(-0.5, hi);
    Ok((0..images.len())
        .map(|n| {
            let confidence = sigmoid(out.logits.data[n] as f64);
            if confidence < threshold {
                return DetectionResult {
                    face_present: false,
                    confidence,
                    bbox: None,
                    landmarks: None,
                };
            }
            let bx = out.boxes.column(n);
            let (x0, x1) = (to_px(bx[0].min(bx[2])), to_px(bx[0].max(bx[2])));
            let (y0, y1) = (to_px(bx[1].min(bx[3])), to_px(bx[1].max(bx[3])));
            let lo = |v: f64| ((v + 0.5).floor() as usize).min(res - 1);
            let bbox = RegionSpec::new(lo(x0), lo(y0), (lo(x1) + 1).max(lo(x0) + 1), (lo(y1) + 1).max(lo(y0) + 1));
            let lm: Vec<f64> = out.landmarks.column(n).into_iter().map(to_px).collect();
            DetectionResult {
                face_present: true,
                confidence,
                bbox: Some(bbox),
                landmarks: Some(LandmarkSet::from_flat(&lm)),
            }
        })
        .collect())
}

/// Warp `image` so the detected landmarks land on the template.
pub fn align_face(
    image: &ImageTensor,
    detection: &DetectionResult,
    template: &CanonicalTemplate,
) -> Result<(ImageTensor, SimilarityTransform)> {
    let landmarks = match (detection.face_present, detection.landmarks) {
        (true, Some(l)) => l,
        _ => return Err(Error::Precondition("no face to align".into())),
    };
    let t = estimate_similarity_transform(&landmarks, &template.landmarks)?;
    Ok((warp_image(image, &t, template.resolution, template.resolution), t))
}

/// Continuous face box (pixel edges) of a render moved by `pose`.
pub fn posed_face_box(pose: &SimilarityTransform, resolution: usize) -> [f64; 4] {
    let r = resolution as f64;
    let [u0, v0, u1, v1] = CANONICAL_FACE_BOX;
    let corners = [(u0, v0), (u1, v0), (u0, v1), (u1, v1)].map(|(u, v)| pose.apply(Point::new(u * r - 0.5, v * r - 0.5)));
    let xs = corners.map(|p| p.x);
    let ys = corners.map(|p| p.y);
    let min = |a: [f64; 4]| a.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |a: [f64; 4]| a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [min(xs), min(ys), max(xs), max(ys)]
}

pub(crate) fn diagnostic_dir() -> PathBuf {
    std::env::temp_dir()
}
