use std::path::PathBuf;

use deid_nn::{Adam, ParamSet, Scalar, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normal_tensor, GanCheckpoint, GanModel, GanParams, GanTrainConfig};
use crate::archive::sha256_hex;
use crate::error::{arg, Error, Result};
use crate::image::ImageTensor;
use crate::synth::CorpusManifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanHistoryRow {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// Most recent R1 penalty value.
    pub r1_penalty: f64,
    pub real_score: f64,
    pub fake_score: f64,
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorLoss<T> {
    /// `mean softplus(D(fake)) + mean softplus(-D(real))`.
    pub adversarial: T,
    /// `γ/2 · mean ‖∇ₓ D(real)‖²` when requested, else zero.
    pub r1: T,
    pub real_score: T,
    pub fake_score: T,
}

impl<T: Scalar> DiscriminatorLoss<T> {
    pub fn total(&self) -> T {
        self.adversarial + self.r1
    }
}

/// Critic loss on one real and one fake batch; parameter gradients of
/// `adversarial + r1` are accumulated into `grads`.
pub fn discriminator_loss<T: Scalar>(
    disc: &Sequential,
    p: &ParamSet<T>,
    real: Tensor<T>,
    fake: Tensor<T>,
    r1_gamma: Option<f64>,
    mut grads: Option<&mut ParamSet<T>>,
) -> DiscriminatorLoss<T> {
    let tr_real = disc.forward(p, real);
    let tr_fake = disc.forward(p, fake);
    let nr = T::lit(tr_real.output.batch() as f64);
    let nf = T::lit(tr_fake.output.batch() as f64);
    let lr = &tr_real.output.data;
    let lf = &tr_fake.output.data;
    let adversarial =
        lf.iter().map(|&l| softplus(l)).sum::<T>() / nf + lr.iter().map(|&l| softplus(-l)).sum::<T>() / nr;
    let real_score = lr.iter().copied().sum::<T>() / nr;
    let fake_score = lf.iter().copied().sum::<T>() / nf;
    if let Some(gr) = grads.as_deref_mut() {
        let g_real = tr_real.output.map(|l| -sigmoid(-l) / nr);
        let g_fake = tr_fake.output.map(|l| sigmoid(l) / nf);
        disc.backward(p, &tr_real, g_real, Some(gr));
        disc.backward(p, &tr_fake, g_fake, Some(gr));
    }
    let r1 = match r1_gamma {
        Some(gamma) if gamma > 0.0 => disc.r1_penalty(p, &tr_real, gamma, grads),
        _ => T::zero(),
    };
    DiscriminatorLoss {
        adversarial,
        r1,
        real_score,
        fake_score,
    }
}

/// Non-saturating generator loss `mean softplus(-D(G(f(z))))`; gradients
/// go to the mapping and synthesis parameters, the critic is held fixed.
pub fn generator_loss<T: Scalar>(
    model: &GanModel,
    params: &GanParams<T>,
    z: &Tensor<T>,
    grads_mapping: Option<&mut ParamSet<T>>,
    grads_synthesis: Option<&mut ParamSet<T>>,
) -> T {
    let mt = model.mapping.forward(&params.mapping, z);
    let st = model.synthesis.forward(&params.synthesis, mt.output());
    let dt = model.discriminator.forward(&params.discriminator, st.image.clone());
    let n = T::lit(dt.output.batch() as f64);
    let loss = dt.output.data.iter().map(|&l| softplus(-l)).sum::<T>() / n;
    if grads_mapping.is_some() || grads_synthesis.is_some() {
        let g_logit = dt.output.map(|l| -sigmoid(-l) / n);
        let g_img = model.discriminator.backward(&params.discriminator, &dt, g_logit, None);
        let g_w = model.synthesis.backward(&params.synthesis, &st, &g_img, grads_synthesis);
        if let Some(gm) = grads_mapping {
            model.mapping.backward(&params.mapping, &mt, g_w, Some(gm));
        }
    }
    loss
}

fn ema_update(ema: &mut ParamSet<f32>, src: &ParamSet<f32>, beta: f32) {
    for (e, s) in ema.tensors_mut().zip(src.iter().map(|(_, t)| t)) {
        for (a, &b) in e.data.iter_mut().zip(&s.data) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }
}

pub(crate) fn corpus_tensor(images: &[ImageTensor], resolution: usize) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(arg("training corpus is empty"));
    }
    if let Some(bad) = images.iter().find(|i| i.dims() != (resolution, resolution)) {
        return Err(arg(format!(
            "corpus image is {:?}, configured resolution is {resolution}",
            bad.dims()
        )));
    }
    let refs: Vec<&ImageTensor> = images.iter().collect();
    ImageTensor::batch_to_tensor(&refs)
}

pub(crate) fn images_fingerprint(images: &[ImageTensor]) -> String {
    let mut bytes = Vec::with_capacity(images.len() * images[0].data().len() * 4);
    for img in images {
        for &v in img.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

fn diagnostic_path(cfg: &GanTrainConfig, step: usize) -> PathBuf {
    cfg.diagnostic_dir
        .clone()
        .unwrap_or_else(std::env::temp_dir)
        .join(format!("gan-diagnostic-step{step}.tar"))
}

/// Continue adversarial training of `state` for `steps` steps on `data`.
fn run(state: &mut GanCheckpoint, data: &Tensor<f32>, steps: usize, rng_seed: u64) -> Result<()> {
    let cfg = state.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut opt_d = Adam::new(&state.params.discriminator, cfg.lr_discriminator, 0.0, 0.99);
    let mut opt_m = Adam::new(&state.params.mapping, cfg.lr_generator * cfg.mapping_lr_mult, 0.0, 0.99);
    let mut opt_s = Adam::new(&state.params.synthesis, cfg.lr_generator, 0.0, 0.99);
    let mut g_d = state.params.discriminator.zeros_like();
    let mut g_m = state.params.mapping.zeros_like();
    let mut g_s = state.params.synthesis.zeros_like();
    let n_data = data.batch();
    let b = cfg.batch_size;
    let mut last_r1 = state.history.last().map(|r| r.r1_penalty).unwrap_or(0.0);
    for _ in 0..steps {
        let step = state.step;
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n_data)).collect();
        let real = data.gather_batch(&idx);
        let z = normal_tensor::<f32>(&mut rng, cfg.d_z, b);
        let fake = state
            .model
            .synthesis
            .infer(&state.params.synthesis, &state.model.mapping.infer(&state.params.mapping, &z));
        let r1_gamma = (step % cfg.r1_interval == 0 && cfg.r1_weight > 0.0).then_some(cfg.r1_weight * cfg.r1_interval as f64);
        g_d.fill_zero();
        let dl = discriminator_loss(
            &state.model.discriminator,
            &state.params.discriminator,
            real,
            fake,
            r1_gamma,
            Some(&mut g_d),
        );
        if r1_gamma.is_some() {
            last_r1 = dl.r1 as f64 / cfg.r1_interval as f64;
        }
        opt_d.step(&mut state.params.discriminator, &g_d);

        let z = normal_tensor::<f32>(&mut rng, cfg.d_z, b);
        g_m.fill_zero();
        g_s.fill_zero();
        let gl = generator_loss(&state.model, &state.params, &z, Some(&mut g_m), Some(&mut g_s));
        opt_m.step(&mut state.params.mapping, &g_m);
        opt_s.step(&mut state.params.synthesis, &g_s);
        ema_update(&mut state.ema_mapping, &state.params.mapping, cfg.ema_beta as f32);
        ema_update(&mut state.ema_synthesis, &state.params.synthesis, cfg.ema_beta as f32);

        state.step += 1;
        let row = GanHistoryRow {
            step: state.step,
            d_loss: dl.adversarial as f64,
            g_loss: gl as f64,
            r1_penalty: last_r1,
            real_score: dl.real_score as f64,
            fake_score: dl.fake_score as f64,
        };
        let finite = [row.d_loss, row.g_loss, row.r1_penalty].iter().all(|v| v.is_finite())
            && state.params.discriminator.is_finite()
            && state.params.synthesis.is_finite()
            && state.params.mapping.is_finite();
        state.history.push(row);
        if !finite {
            let path = diagnostic_path(&cfg, state.step);
            state.save(&path)?;
            return Err(Error::NonFinite {
                step: state.step,
                checkpoint: path,
            });
        }
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            let r = state.history.last().expect("just pushed");
            log::info!(
                "gan step {}: d_loss {:.4} g_loss {:.4} r1 {:.4} real {:.3} fake {:.3}",
                r.step,
                r.d_loss,
                r.g_loss,
                r.r1_penalty,
                r.real_score,
                r.fake_score
            );
        }
    }
    Ok(())
}

/// Train from scratch on in-memory images.
pub fn train_gan_on_images(images: &[ImageTensor], corpus_fingerprint: &str, config: &GanTrainConfig) -> Result<GanCheckpoint> {
    let cfg = config.resolved()?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let data = corpus_tensor(images, cfg.resolution)?;
    let (model, params) = GanModel::build::<f32>(&cfg, cfg.seed);
    let mut state = GanCheckpoint {
        step: 0,
        ema_mapping: params.mapping.clone(),
        ema_synthesis: params.synthesis.clone(),
        model,
        params,
        history: Vec::new(),
        corpus_fingerprint: corpus_fingerprint.to_string(),
        parent_fingerprint: None,
        config: cfg.clone(),
    };
    run(&mut state, &data, cfg.steps, cfg.seed ^ 0x0da7_a5ee_d000_0001)?;
    Ok(state)
}

/// Train from scratch on a corpus directory.
pub fn train_gan(corpus: &CorpusManifest, config: &GanTrainConfig) -> Result<GanCheckpoint> {
    if corpus.is_empty() {
        return Err(arg("training corpus is empty"));
    }
    if corpus.resolution != config.resolution {
        return Err(arg(format!(
            "corpus resolution {} differs from configured {}",
            corpus.resolution, config.resolution
        )));
    }
    let images = corpus.load_images()?;
    train_gan_on_images(&images, &images_fingerprint(&images), config)
}

/// Continue training `checkpoint` on `clinic` for `steps` steps. The result
/// records the input checkpoint's fingerprint as its parent.
pub fn fine_tune_gan(checkpoint: &GanCheckpoint, clinic: &[ImageTensor], steps: usize) -> Result<GanCheckpoint> {
    let data = corpus_tensor(clinic, checkpoint.config.resolution)?;
    let mut state = checkpoint.clone();
    state.parent_fingerprint = Some(checkpoint.fingerprint());
    state.corpus_fingerprint = images_fingerprint(clinic);
    let seed = checkpoint.config.seed ^ 0xf1e7_0000_0000_0002 ^ (checkpoint.step as u64).rotate_left(20);
    run(&mut state, &data, steps, seed)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deid_nn::gradcheck::{check_gradient, GradCheck};

    fn mini_config() -> GanTrainConfig {
        GanTrainConfig {
            resolution: 8,
            d_z: 3,
            d_w: 3,
            batch_size: 2,
            steps: 1,
            g_channels: vec![3, 2],
            d_channels: vec![2],
            d_hidden: 3,
            log_every: 0,
            ..Default::default()
        }
        .resolved()
        .unwrap()
    }

    fn real_batch() -> Tensor<f64> {
        Tensor::from_vec([3, 2, 8, 8], (0..384).map(|i| ((i as f64) * 0.91).sin() * 0.8).collect())
    }

    #[test]
    fn miniature_has_about_256_parameters() {
        let (_, p) = GanModel::build::<f64>(&mini_config(), 1);
        let total = p.mapping.numel() + p.synthesis.numel() + p.discriminator.numel();
        assert!((150..400).contains(&total), "{total} parameters");
    }

    #[test]
    fn discriminator_gradients_with_r1() {
        let cfg = mini_config();
        let (model, p) = GanModel::build::<f64>(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = normal_tensor::<f64>(&mut rng, 3, 2);
        let fake = model.synthesis.infer(&p.synthesis, &model.mapping.infer(&p.mapping, &z));
        let mut grads = p.discriminator.zeros_like();
        discriminator_loss(&model.discriminator, &p.discriminator, real_batch(), fake.clone(), Some(4.0), Some(&mut grads));
        let report = check_gradient(
            &p.discriminator,
            &grads,
            |q| discriminator_loss(&model.discriminator, q, real_batch(), fake.clone(), Some(4.0), None).total(),
            GradCheck::default(),
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn generator_gradients() {
        let cfg = mini_config();
        let (model, p) = GanModel::build::<f64>(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = normal_tensor::<f64>(&mut rng, 3, 2);
        let mut gm = p.mapping.zeros_like();
        let mut gs = p.synthesis.zeros_like();
        generator_loss(&model, &p, &z, Some(&mut gm), Some(&mut gs));
        let rep_s = check_gradient(
            &p.synthesis,
            &gs,
            |q| {
                let params = GanParams {
                    synthesis: q.clone(),
                    ..p.clone()
                };
                generator_loss(&model, &params, &z, None, None)
            },
            GradCheck::default(),
        );
        assert!(rep_s.max_rel_error < 1e-4, "{rep_s:?}");
        let rep_m = check_gradient(
            &p.mapping,
            &gm,
            |q| {
                let params = GanParams {
                    mapping: q.clone(),
                    ..p.clone()
                };
                generator_loss(&model, &params, &z, None, None)
            },
            GradCheck::default(),
        );
        assert!(rep_m.max_rel_error < 1e-4, "{rep_m:?}");
    }

    fn tiny_images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|k| ImageTensor::from_fn(8, 8, |y, x, c| ((y * 3 + x + c + k) as f64 * 0.4).sin() * 0.7).unwrap())
            .collect()
    }

    #[test]
    fn one_step_records_one_row_and_is_deterministic() {
        let cfg = mini_config();
        let a = train_gan_on_images(&tiny_images(4), "fp", &cfg).unwrap();
        assert_eq!(a.history.len(), 1);
        assert_eq!(a.step, 1);
        let b = train_gan_on_images(&tiny_images(4), "fp", &cfg).unwrap();
        assert_eq!(a.to_archive().to_bytes(), b.to_archive().to_bytes());
    }

    #[test]
    fn empty_corpus_and_zero_steps_are_rejected() {
        let cfg = mini_config();
        assert!(matches!(train_gan_on_images(&[], "fp", &cfg), Err(Error::Argument(_))));
        let zero = GanTrainConfig { steps: 0, ..cfg };
        assert!(train_gan_on_images(&tiny_images(2), "fp", &zero).is_err());
    }

    #[test]
    fn fine_tune_zero_steps_keeps_parameters() {
        let cfg = GanTrainConfig { steps: 3, ..mini_config() };
        let base = train_gan_on_images(&tiny_images(4), "fp", &cfg).unwrap();
        let tuned = fine_tune_gan(&base, &tiny_images(2), 0).unwrap();
        assert_eq!(tuned.params, base.params);
        assert_eq!(tuned.parent_fingerprint.as_deref(), Some(base.fingerprint().as_str()));
        let more = fine_tune_gan(&base, &tiny_images(2), 2).unwrap();
        assert_eq!(more.history.len(), 5);
        assert_ne!(more.params, base.params);
    }

    #[test]
    fn divergence_writes_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GanTrainConfig {
            diagnostic_dir: Some(dir.path().to_path_buf()),
            ..mini_config()
        };
        let mut images = tiny_images(2);
        images[0] = ImageTensor::filled(8, 8, 0.0).unwrap();
        let (model, mut params) = GanModel::build::<f32>(&cfg, cfg.seed);
        params.discriminator.data_mut(0)[0] = f32::NAN;
        let mut state = GanCheckpoint {
            step: 0,
            ema_mapping: params.mapping.clone(),
            ema_synthesis: params.synthesis.clone(),
            model,
            params,
            history: Vec::new(),
            corpus_fingerprint: "fp".into(),
            parent_fingerprint: None,
            config: cfg.clone(),
        };
        let data = corpus_tensor(&images, 8).unwrap();
        let err = run(&mut state, &data, 5, 1).unwrap_err();
        match err {
            Error::NonFinite { step, checkpoint } => {
                assert_eq!(step, 1);
                assert!(checkpoint.is_file());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = GanTrainConfig { steps: 2, ..mini_config() };
        let ck = train_gan_on_images(&tiny_images(3), "fp", &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.tar");
        ck.save(&path).unwrap();
        let back = GanCheckpoint::load(&path).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.fingerprint(), ck.fingerprint());
        let w = back.map_latent(&vec![0.3, -0.2, 1.0]).unwrap();
        assert_eq!(back.generate(&w).unwrap(), ck.generate(&w).unwrap());
        assert!(back.generate(&vec![0.0; 2]).is_err());
    }
}
