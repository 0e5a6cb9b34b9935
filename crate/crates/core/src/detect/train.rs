use deid_nn::{Adam, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    detect_batch, diagnostic_dir, posed_face_box, sigmoid, CanonicalTemplate, DetectorCheckpoint, DetectorNet,
    DetectorOutput, DetectorTrainConfig,
};
use crate::error::{arg, Error, Result};
use crate::gan::images_fingerprint;
use crate::image::{warp_image, ImageTensor, LandmarkSet, Point, SimilarityTransform};
use crate::synth::{render_face_posed, CorpusManifest};

/// A training or evaluation face with its geometry in pixel coordinates.
#[derive(Clone, Debug)]
pub struct LabeledFace {
    pub image: ImageTensor,
    pub landmarks: LandmarkSet,
    /// `(x0, y0, x1, y1)` pixel edges.
    pub face_box: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorHistoryRow {
    pub step: usize,
    pub presence_loss: f64,
    pub geometry_loss: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    /// Fraction of faces and negatives classified correctly.
    pub presence_accuracy: f64,
    /// Mean landmark distance in pixels over detected faces.
    pub mean_landmark_error: f64,
    pub faces: usize,
    pub negatives: usize,
}

const GEOMETRY_DIMS: usize = 14;

fn targets(face: &LabeledFace, res: usize) -> [f64; GEOMETRY_DIMS] {
    let r = res as f64;
    let mut t = [0.0; GEOMETRY_DIMS];
    for (i, v) in face.face_box.iter().enumerate() {
        t[i] = (v + 0.5) / r;
    }
    for (i, v) in face.landmarks.to_flat().iter().enumerate() {
        t[4 + i] = (v + 0.5) / r;
    }
    t
}

/// Train on in-memory faces and negatives at `resolution`.
pub fn train_detector_on(
    faces: &[LabeledFace],
    negatives: &[ImageTensor],
    resolution: usize,
    corpus_fingerprint: &str,
    config: &DetectorTrainConfig,
) -> Result<DetectorCheckpoint> {
    let cfg = config.clone();
    cfg.validate(resolution)?;
    if faces.is_empty() || negatives.is_empty() {
        return Err(arg("detector training needs both faces and negatives"));
    }
    let res = resolution;
    if let Some(bad) = faces
        .iter()
        .map(|f| &f.image)
        .chain(negatives)
        .find(|i| i.dims() != (res, res))
    {
        return Err(arg(format!("training image is {:?}, expected {res}x{res}", bad.dims())));
    }
    let pos = ImageTensor::batch_to_tensor::<f32>(&faces.iter().map(|f| &f.image).collect::<Vec<_>>())?;
    let neg = ImageTensor::batch_to_tensor::<f32>(&negatives.iter().collect::<Vec<_>>())?;
    let geo: Vec<[f64; GEOMETRY_DIMS]> = faces.iter().map(|f| targets(f, res)).collect();

    let (net, mut params) = DetectorNet::build::<f32>(res, &cfg.channels, cfg.hidden, cfg.seed);
    let mut state = DetectorCheckpoint {
        config: cfg.clone(),
        step: 0,
        net,
        params: params.clone(),
        template: CanonicalTemplate::for_resolution(res),
        corpus_fingerprint: corpus_fingerprint.to_string(),
        history: Vec::new(),
    };
    let b = cfg.batch_size;
    let n_neg = ((cfg.negative_fraction * b as f64).round() as usize).min(b - 1);
    let n_pos = b - n_neg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00de_7ec7_0000_0004);
    let mut opt = Adam::new(&params, cfg.learning_rate, 0.9, 0.999);
    let mut grads = params.zeros_like();
    for _ in 0..cfg.steps {
        let pi: Vec<usize> = (0..n_pos).map(|_| rng.gen_range(0..faces.len())).collect();
        let ni: Vec<usize> = (0..n_neg).map(|_| rng.gen_range(0..negatives.len())).collect();
        let x = if n_neg > 0 {
            Tensor::concat_batch(&[&pos.gather_batch(&pi), &neg.gather_batch(&ni)])
        } else {
            pos.gather_batch(&pi)
        };
        let (out, trace) = state.net.forward(&params, x);
        let mut g = DetectorOutput {
            logits: Tensor::zeros(out.logits.shape),
            boxes: Tensor::zeros(out.boxes.shape),
            landmarks: Tensor::zeros(out.landmarks.shape),
        };
        let mut presence = 0.0;
        for n in 0..b {
            let s = out.logits.data[n] as f64;
            let y = if n < n_pos { 1.0 } else { 0.0 };
            presence += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
            g.logits.data[n] = ((sigmoid(s) - y) / b as f64) as f32;
        }
        presence /= b as f64;
        let mut geometry = 0.0;
        let scale = cfg.geometry_weight * 2.0 / (n_pos * GEOMETRY_DIMS) as f64;
        for (n, &i) in pi.iter().enumerate() {
            for d in 0..GEOMETRY_DIMS {
                let (src, dst, row) = if d < 4 {
                    (&out.boxes, &mut g.boxes, d)
                } else {
                    (&out.landmarks, &mut g.landmarks, d - 4)
                };
                let k = row * b + n;
                let e = src.data[k] as f64 - geo[i][d];
                geometry += e * e;
                dst.data[k] = (scale * e) as f32;
            }
        }
        geometry /= (n_pos * GEOMETRY_DIMS) as f64;
        grads.fill_zero();
        state.net.backward(&params, &trace, g, &mut grads);
        opt.step(&mut params, &grads);
        state.step += 1;
        let total = presence + cfg.geometry_weight * geometry;
        state.history.push(DetectorHistoryRow {
            step: state.step,
            presence_loss: presence,
            geometry_loss: geometry,
            total,
        });
        if !(total.is_finite() && params.is_finite()) {
            state.params = params;
            let path = diagnostic_dir().join(format!("detector-diagnostic-step{}.tar", state.step));
            state.save(&path)?;
            return Err(Error::NonFinite {
                step: state.step,
                checkpoint: path,
            });
        }
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            log::info!(
                "detector step {}: presence {:.4} geometry {:.6}",
                state.step,
                presence,
                geometry
            );
        }
    }
    state.params = params;
    Ok(state)
}

/// A random pose within the configured augmentation ranges.
pub(crate) fn random_pose(rng: &mut ChaCha8Rng, cfg: &DetectorTrainConfig, res: usize) -> SimilarityTransform {
    let c = (res as f64 - 1.0) / 2.0;
    let shift = cfg.max_shift * res as f64 / 64.0;
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let rot = if cfg.max_rotation > 0.0 {
        rng.gen_range(-cfg.max_rotation..=cfg.max_rotation)
    } else {
        0.0
    };
    let (dx, dy) = if shift > 0.0 {
        (rng.gen_range(-shift..=shift), rng.gen_range(-shift..=shift))
    } else {
        (0.0, 0.0)
    };
    SimilarityTransform::about(Point::new(c, c), scale, rot, (dx, dy))
}

/// Train on a landmark-annotated corpus and a face-free corpus. Each face
/// also contributes `posed_copies` re-rendered (or warped, for unlabeled
/// entries) copies under random poses.
pub fn train_detector(corpus: &CorpusManifest, negatives: &CorpusManifest, config: &DetectorTrainConfig) -> Result<DetectorCheckpoint> {
    if corpus.is_empty() || negatives.is_empty() {
        return Err(arg("detector training needs a nonempty face corpus and negative corpus"));
    }
    if corpus.resolution != negatives.resolution {
        return Err(arg(format!(
            "face corpus is {} px but negatives are {} px",
            corpus.resolution, negatives.resolution
        )));
    }
    let res = corpus.resolution;
    config.validate(res)?;
    let images = corpus.load_images()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0909_0000_0000_0005);
    let mut faces = Vec::with_capacity(images.len() * (1 + config.posed_copies));
    for (entry, image) in corpus.entries.iter().zip(&images) {
        let landmarks = entry
            .landmarks
            .ok_or_else(|| arg(format!("corpus entry {} has no landmarks", entry.file)))?;
        faces.push(LabeledFace {
            image: image.clone(),
            landmarks,
            face_box: posed_face_box(&SimilarityTransform::identity(), res),
        });
        for _ in 0..config.posed_copies {
            let pose = random_pose(&mut rng, config, res);
            let image = match &entry.labels {
                Some(spec) => render_face_posed(spec, res, &pose)?.image,
                None => warp_image(image, &pose, res, res),
            };
            faces.push(LabeledFace {
                image,
                landmarks: landmarks.map(&pose),
                face_box: posed_face_box(&pose, res),
            });
        }
    }
    let negs = negatives.load_images()?;
    train_detector_on(&faces, &negs, res, &images_fingerprint(&images), config)
}

/// Presence accuracy over faces and negatives, and mean landmark error on
/// the faces detected.
pub fn evaluate_detector(
    detector: &DetectorCheckpoint,
    faces: &[LabeledFace],
    negatives: &[ImageTensor],
    threshold: f64,
) -> Result<DetectorMetrics> {
    let mut correct = 0;
    let mut err = 0.0;
    let mut detected = 0;
    for chunk in faces.chunks(64) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|f| &f.image).collect();
        for (f, d) in chunk.iter().zip(detect_batch(&imgs, detector, threshold)?) {
            if let Some(lm) = d.landmarks {
                correct += 1;
                detected += 1;
                err += lm.mean_error(&f.landmarks);
            }
        }
    }
    for chunk in negatives.chunks(64) {
        let imgs: Vec<&ImageTensor> = chunk.iter().collect();
        correct += detect_batch(&imgs, detector, threshold)?
            .iter()
            .filter(|d| !d.face_present)
            .count();
    }
    let total = faces.len() + negatives.len();
    Ok(DetectorMetrics {
        presence_accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        mean_landmark_error: if detected > 0 { err / detected as f64 } else { f64::NAN },
        faces: faces.len(),
        negatives: negatives.len(),
    })
}
