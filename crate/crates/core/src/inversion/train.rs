use std::path::PathBuf;

use deid_nn::{Adam, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{composite_loss, Encoder, EncoderCheckpoint, EncoderTrainConfig, FrozenGenerator, RealBatch, TargetSpace};
use crate::error::{arg, Error, Result};
use crate::gan::{corpus_tensor, images_fingerprint, normal_tensor, GanCheckpoint};
use crate::image::{ImageTensor, RegionMask};
use crate::synth::{CorpusEntry, CorpusManifest};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderHistoryRow {
    pub step: usize,
    pub code_term: f64,
    pub image_term: f64,
    pub region_term: f64,
    pub total: f64,
}

fn diagnostic_path(cfg: &EncoderTrainConfig, step: usize) -> PathBuf {
    cfg.diagnostic_dir
        .clone()
        .unwrap_or_else(std::env::temp_dir)
        .join(format!("encoder-diagnostic-step{step}.tar"))
}

/// Train an encoder against the frozen EMA generator of `gan`. `masks[i]`
/// is the region mask of `images[i]`.
pub fn train_encoder_on_images(
    gan: &GanCheckpoint,
    images: &[ImageTensor],
    masks: &[RegionMask],
    corpus_fingerprint: &str,
    config: &EncoderTrainConfig,
) -> Result<EncoderCheckpoint> {
    let cfg = config.clone();
    let res = gan.resolution();
    cfg.validate(res)?;
    if images.len() != masks.len() {
        return Err(arg(format!("{} images but {} masks", images.len(), masks.len())));
    }
    let n_syn = cfg.synthetic_count();
    let n_real = cfg.batch_size - n_syn;
    if n_real > 0 && images.is_empty() {
        return Err(arg("training corpus is empty"));
    }
    let data = if images.is_empty() {
        None
    } else {
        let refs: Vec<&RegionMask> = masks.iter().collect();
        if let Some(m) = masks.iter().find(|m| m.dims() != (res, res)) {
            return Err(arg(format!("mask is {:?}, GAN resolution is {res}", m.dims())));
        }
        if let Some(i) = masks.iter().position(|m| m.total() <= 0.0) {
            return Err(arg(format!("mask {i} has zero total weight")));
        }
        Some((corpus_tensor(images, res)?, RegionMask::batch_to_tensor::<f32>(&refs)?))
    };

    let view = gan.generator();
    let generator = FrozenGenerator::from_view(view, cfg.target_space);
    let code_bias = match cfg.target_space {
        TargetSpace::W => view.mean_style(1024, cfg.seed ^ 0x6d65_616e),
        TargetSpace::Z => vec![0.0; view.d_z()],
    };
    let (encoder, mut params) = Encoder::build::<f32>(res, &cfg.channels, cfg.hidden, &code_bias, cfg.seed);
    let mut state = EncoderCheckpoint {
        config: cfg.clone(),
        step: 0,
        encoder,
        params: params.clone(),
        parent_gan_fingerprint: gan.fingerprint(),
        corpus_fingerprint: corpus_fingerprint.to_string(),
        history: Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e4_c0de_0000_0003);
    let mut opt = Adam::new(&params, cfg.learning_rate, 0.9, 0.999);
    let mut grads = params.zeros_like();
    for _ in 0..cfg.steps {
        let codes = (n_syn > 0).then(|| generator.reference_codes(&normal_tensor::<f32>(&mut rng, view.d_z(), n_syn)));
        let reals = match (&data, n_real) {
            (Some((x, m)), n) if n > 0 => {
                let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..x.batch())).collect();
                Some((x.gather_batch(&idx), m.gather_batch(&idx)))
            }
            _ => None,
        };
        grads.fill_zero();
        let loss = composite_loss(
            &state.encoder,
            &params,
            &generator,
            codes.as_ref(),
            reals.as_ref().map(|(x, m): &(Tensor<f32>, Tensor<f32>)| RealBatch { images: x, masks: m }),
            cfg.weights,
            Some(&mut grads),
        )?;
        opt.step(&mut params, &grads);
        state.step += 1;
        state.history.push(EncoderHistoryRow {
            step: state.step,
            code_term: loss.code_term,
            image_term: loss.image_term,
            region_term: loss.region_term,
            total: loss.total,
        });
        if !(loss.total.is_finite() && params.is_finite()) {
            state.params = params;
            let path = diagnostic_path(&cfg, state.step);
            state.save(&path)?;
            return Err(Error::NonFinite {
                step: state.step,
                checkpoint: path,
            });
        }
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            log::info!(
                "encoder step {}: total {:.5} code {:.5} image {:.5} region {:.5}",
                state.step,
                loss.total,
                loss.code_term,
                loss.image_term,
                loss.region_term
            );
        }
    }
    state.params = params;
    Ok(state)
}

/// Train an encoder on a corpus directory, deriving each image's region
/// mask with `mask_source`.
pub fn train_encoder(
    gan: &GanCheckpoint,
    corpus: &CorpusManifest,
    mask_source: &dyn Fn(&CorpusEntry) -> Result<RegionMask>,
    config: &EncoderTrainConfig,
) -> Result<EncoderCheckpoint> {
    if corpus.resolution != gan.resolution() {
        return Err(arg(format!(
            "corpus resolution {} differs from GAN resolution {}",
            corpus.resolution,
            gan.resolution()
        )));
    }
    let images = corpus.load_images()?;
    let masks = corpus.entries.iter().map(mask_source).collect::<Result<Vec<_>>>()?;
    let fp = if images.is_empty() {
        String::new()
    } else {
        images_fingerprint(&images)
    };
    train_encoder_on_images(gan, &images, &masks, &fp, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::tests::{mini_encoder_config, mini_gan, mouth_mask, tiny_images};

    #[test]
    fn zero_steps_keep_initialization() {
        let gan = mini_gan();
        let cfg = EncoderTrainConfig {
            steps: 0,
            ..mini_encoder_config()
        };
        let enc = train_encoder_on_images(&gan, &tiny_images(2), &vec![mouth_mask(); 2], "fp", &cfg).unwrap();
        assert!(enc.history.is_empty());
        let bias = gan.generator().mean_style(1024, cfg.seed ^ 0x6d65_616e);
        let (_, init) = Encoder::build::<f32>(8, &cfg.channels, cfg.hidden, &bias, cfg.seed);
        assert_eq!(enc.params, init);
    }

    #[test]
    fn training_is_deterministic_and_leaves_generator_frozen() {
        let gan = mini_gan();
        let before = gan.to_archive().to_bytes();
        let images = tiny_images(3);
        let masks = vec![mouth_mask(); 3];
        let a = train_encoder_on_images(&gan, &images, &masks, "fp", &mini_encoder_config()).unwrap();
        let b = train_encoder_on_images(&gan, &images, &masks, "fp", &mini_encoder_config()).unwrap();
        assert_eq!(gan.to_archive().to_bytes(), before);
        assert_eq!(a.to_archive().to_bytes(), b.to_archive().to_bytes());
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|r| r.code_term > 0.0 && r.region_term > 0.0));
    }

    #[test]
    fn sample_mix_extremes() {
        let gan = mini_gan();
        let synthetic_only = EncoderTrainConfig {
            sample_mix: 1.0,
            ..mini_encoder_config()
        };
        let enc = train_encoder_on_images(&gan, &[], &[], "", &synthetic_only).unwrap();
        assert!(enc.history.iter().all(|r| r.image_term == 0.0 && r.total == r.code_term));
        let real_only = EncoderTrainConfig {
            sample_mix: 0.0,
            ..mini_encoder_config()
        };
        assert!(train_encoder_on_images(&gan, &[], &[], "", &real_only).is_err());
        let enc = train_encoder_on_images(&gan, &tiny_images(2), &vec![mouth_mask(); 2], "fp", &real_only).unwrap();
        assert!(enc.history.iter().all(|r| r.code_term == 0.0));
        let bad = EncoderTrainConfig {
            sample_mix: 1.5,
            ..mini_encoder_config()
        };
        assert!(matches!(
            train_encoder_on_images(&gan, &[], &[], "", &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_mask_in_corpus_is_rejected() {
        let gan = mini_gan();
        let masks = vec![mouth_mask(), RegionMask::zeros(8, 8)];
        let r = train_encoder_on_images(&gan, &tiny_images(2), &masks, "fp", &mini_encoder_config());
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn divergence_writes_diagnostic_checkpoint() {
        let gan = mini_gan();
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderTrainConfig {
            learning_rate: 1e38,
            steps: 50,
            diagnostic_dir: Some(dir.path().to_path_buf()),
            ..mini_encoder_config()
        };
        match train_encoder_on_images(&gan, &tiny_images(2), &vec![mouth_mask(); 2], "fp", &cfg) {
            Err(Error::NonFinite { step, checkpoint }) => {
                assert!(step >= 1);
                assert!(checkpoint.is_file());
                assert!(checkpoint.starts_with(dir.path()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
