//! Learned GAN inversion: an encoder `E` from images to the generator's
//! code space, trained with the area-preserving composite loss, and the
//! merge-then-invert operation built on it.

mod loss;
mod train;

pub use loss::{composite_loss, CodeEncoder, CodeGenerator, LossBreakdown, LossWeights, RealBatch};
pub use train::{train_encoder, train_encoder_on_images, EncoderHistoryRow};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use deid_nn::{ParamSet, Scalar, Sequential, Tensor, Trace, LRELU_GAIN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::gan::{codes_to_tensor, tensor_to_codes, GanCheckpoint, GeneratorView, Mapping, MappingTrace, Synthesis, SynthesisTrace};
use crate::image::{masked_mse, mse, stitch, ImageTensor, RegionMask};

pub const CHECKPOINT_KIND: &str = "encoder";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSpace {
    Z,
    #[default]
    W,
}

impl FromStr for TargetSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Z" | "z" => Ok(TargetSpace::Z),
            "W" | "w" => Ok(TargetSpace::W),
            other => Err(Error::Config(format!("unknown target space {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub target_space: TargetSpace,
    /// Fraction of each batch drawn as synthetic code-supervised pairs.
    pub sample_mix: f64,
    /// Output channels of the convolutional stages; each stage halves the
    /// resolution.
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub log_every: usize,
    pub diagnostic_dir: Option<PathBuf>,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            steps: 5000,
            batch_size: 8,
            learning_rate: 5e-4,
            seed: 0,
            weights: LossWeights::default(),
            target_space: TargetSpace::W,
            sample_mix: 0.5,
            channels: vec![8, 16, 32, 64],
            hidden: 128,
            log_every: 500,
            diagnostic_dir: None,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sample_mix) {
            return Err(Error::Config(format!("sample_mix must lie in [0, 1], got {}", self.sample_mix)));
        }
        LossWeights::new(self.weights.lambda_img, self.weights.lambda_df).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::Config("encoder channels and hidden width must be positive".into()));
        }
        if resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "{} downsampling stages do not divide resolution {resolution}",
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn synthetic_count(&self) -> usize {
        (self.sample_mix * self.batch_size as f64).round() as usize
    }
}

/// Encoder network structure; parameters are held separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub resolution: usize,
    pub code_dim: usize,
    net: Sequential,
}

impl Encoder {
    /// Convolution/pool stages, then a hidden dense layer and a linear code
    /// head whose bias starts at `code_bias`.
    pub fn build<T: Scalar>(
        resolution: usize,
        channels: &[usize],
        hidden: usize,
        code_bias: &[f64],
        seed: u64,
    ) -> (Encoder, ParamSet<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut net = Sequential::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            net.conv(&mut p, &format!("conv{i}"), cin, c, 3, LRELU_GAIN, &mut rng).lrelu().pool();
            cin = c;
        }
        let spatial = resolution >> channels.len();
        net.flatten()
            .dense(&mut p, "fc0", cin * spatial * spatial, hidden, LRELU_GAIN, &mut rng)
            .lrelu()
            .dense(&mut p, "out", hidden, code_bias.len(), 1.0, &mut rng);
        let bias = p.id("out.bias").expect("code head bias");
        for (b, &v) in p.data_mut(bias).iter_mut().zip(code_bias) {
            *b = T::lit(v);
        }
        (
            Encoder {
                resolution,
                code_dim: code_bias.len(),
                net,
            },
            p,
        )
    }

    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, images: &Tensor<T>) -> Tensor<T> {
        self.net.infer(p, images)
    }
}

impl<T: Scalar> CodeEncoder<T> for Encoder {
    type Trace = Trace<T>;

    fn forward(&self, p: &ParamSet<T>, images: Tensor<T>) -> (Tensor<T>, Trace<T>) {
        let trace = self.net.forward(p, images);
        (trace.output.clone(), trace)
    }

    fn backward(&self, p: &ParamSet<T>, trace: &Trace<T>, g_code: Tensor<T>, grads: &mut ParamSet<T>) {
        self.net.backward(p, trace, g_code, Some(grads));
    }
}

/// The frozen generator seen from the encoder's code space.
pub struct FrozenGenerator<'a, T> {
    pub space: TargetSpace,
    pub mapping: &'a Mapping,
    pub synthesis: &'a Synthesis,
    pub mapping_params: &'a ParamSet<T>,
    pub synthesis_params: &'a ParamSet<T>,
}

impl<'a> FrozenGenerator<'a, f32> {
    pub fn from_view(view: GeneratorView<'a>, space: TargetSpace) -> Self {
        FrozenGenerator {
            space,
            mapping: view.mapping,
            synthesis: view.synthesis,
            mapping_params: view.mapping_params,
            synthesis_params: view.synthesis_params,
        }
    }
}

impl<T: Scalar> FrozenGenerator<'_, T> {
    pub fn code_dim(&self) -> usize {
        match self.space {
            TargetSpace::Z => self.mapping.d_z,
            TargetSpace::W => self.mapping.d_w,
        }
    }

    /// Reference codes for latent samples: `z` itself or `f(z)`.
    pub fn reference_codes(&self, z: &Tensor<T>) -> Tensor<T> {
        match self.space {
            TargetSpace::Z => z.clone(),
            TargetSpace::W => self.mapping.infer(self.mapping_params, z),
        }
    }
}

impl<T: Scalar> CodeGenerator<T> for FrozenGenerator<'_, T> {
    type Trace = (Option<MappingTrace<T>>, SynthesisTrace<T>);

    fn generate(&self, codes: &Tensor<T>) -> Tensor<T> {
        match self.space {
            TargetSpace::Z => self
                .synthesis
                .infer(self.synthesis_params, &self.mapping.infer(self.mapping_params, codes)),
            TargetSpace::W => self.synthesis.infer(self.synthesis_params, codes),
        }
    }

    fn forward(&self, codes: &Tensor<T>) -> (Tensor<T>, Self::Trace) {
        let (mt, syn) = match self.space {
            TargetSpace::Z => {
                let mt = self.mapping.forward(self.mapping_params, codes);
                let syn = self.synthesis.forward(self.synthesis_params, mt.output());
                (Some(mt), syn)
            }
            TargetSpace::W => (None, self.synthesis.forward(self.synthesis_params, codes)),
        };
        (syn.image.clone(), (mt, syn))
    }

    fn backward(&self, trace: &Self::Trace, g_images: &Tensor<T>) -> Tensor<T> {
        let g_w = self.synthesis.backward(self.synthesis_params, &trace.1, g_images, None);
        match &trace.0 {
            Some(mt) => self.mapping.backward(self.mapping_params, mt, g_w, None),
            None => g_w,
        }
    }
}

/// Trained encoder with its provenance and per-term loss history.
#[derive(Clone, Debug)]
pub struct EncoderCheckpoint {
    pub config: EncoderTrainConfig,
    pub step: usize,
    pub encoder: Encoder,
    pub params: ParamSet<f32>,
    pub parent_gan_fingerprint: String,
    pub corpus_fingerprint: String,
    pub history: Vec<EncoderHistoryRow>,
}

impl EncoderCheckpoint {
    pub fn resolution(&self) -> usize {
        self.encoder.resolution
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
                "resolution": self.encoder.resolution,
                "code_dim": self.encoder.code_dim,
                "parent_gan_fingerprint": self.parent_gan_fingerprint,
                "corpus_fingerprint": self.corpus_fingerprint,
            }),
        )
        .with_group("encoder", &self.params)
        .with_file("history.csv", history.into_inner().expect("in-memory CSV"))
    }

    pub fn fingerprint(&self) -> String {
        self.to_archive().fingerprint()
    }

    pub fn from_archive(ck: &Checkpoint) -> Result<EncoderCheckpoint> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: EncoderTrainConfig = ck.meta_field("config")?;
        let resolution: usize = ck.meta_field("resolution")?;
        let code_dim: usize = ck.meta_field("code_dim")?;
        config.validate(resolution)?;
        let (encoder, mut params) =
            Encoder::build::<f32>(resolution, &config.channels, config.hidden, &vec![0.0; code_dim], 0);
        params
            .load_from(ck.group("encoder")?)
            .map_err(|e| Error::Config(format!("group encoder: {e}")))?;
        let history = match ck.files.get("history.csv") {
            Some(bytes) => csv::Reader::from_reader(bytes.as_slice())
                .deserialize()
                .collect::<std::result::Result<Vec<EncoderHistoryRow>, _>>()
                .map_err(|e| Error::Config(format!("history: {e}")))?,
            None => Vec::new(),
        };
        Ok(EncoderCheckpoint {
            step: ck.meta_field("step")?,
            parent_gan_fingerprint: ck.meta_field("parent_gan_fingerprint")?,
            corpus_fingerprint: ck.meta_field("corpus_fingerprint")?,
            config,
            encoder,
            params,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<EncoderCheckpoint> {
        Self::from_archive(&Checkpoint::load(path)?)
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        let r = self.resolution();
        if x.dims() != (r, r) {
            return Err(arg(format!("image is {:?}, encoder expects {r}x{r}", x.dims())));
        }
        Ok(())
    }

    /// Codes for a batch of images, one per image.
    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for x in images {
            self.check_image(x)?;
        }
        let codes = self.encoder.infer(&self.params, &ImageTensor::batch_to_tensor::<f32>(images)?);
        Ok(tensor_to_codes(&codes))
    }
}

/// `E(x)` in the encoder's target space.
pub fn encode(x: &ImageTensor, encoder: &EncoderCheckpoint) -> Result<Vec<f64>> {
    Ok(encoder.encode_batch(&[x])?.remove(0))
}

/// Report of a merge-then-invert call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// `masked_mse(output, target, mask)`; absent for an all-zero mask.
    pub region_mse: Option<f64>,
    /// `mse(output, stitched)`.
    pub full_mse: f64,
}

/// An encoder paired with the generator it was trained against.
#[derive(Clone, Copy)]
pub struct Inverter<'a> {
    encoder: &'a EncoderCheckpoint,
    generator: GeneratorView<'a>,
    space: TargetSpace,
}

impl<'a> Inverter<'a> {
    /// Fails with a configuration error unless `encoder` was trained
    /// against exactly `gan`.
    pub fn new(encoder: &'a EncoderCheckpoint, gan: &'a GanCheckpoint) -> Result<Self> {
        let fp = gan.fingerprint();
        if encoder.parent_gan_fingerprint != fp {
            return Err(Error::Config(format!(
                "encoder was trained against GAN {}, got {}",
                short(&encoder.parent_gan_fingerprint),
                short(&fp)
            )));
        }
        Ok(Inverter {
            encoder,
            generator: gan.generator(),
            space: encoder.config.target_space,
        })
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        encode(x, self.encoder)
    }

    /// Generator output for codes in the encoder's target space.
    pub fn generate(&self, code: &[f64]) -> Result<ImageTensor> {
        let t = codes_to_tensor::<f32>(&[code.to_vec()])?;
        let w = match self.space {
            TargetSpace::Z => self.generator.map(&t),
            TargetSpace::W => t,
        };
        ImageTensor::from_tensor(&self.generator.synthesize(&w), 0)
    }

    pub fn reconstruct(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.generate(&self.encode(x)?)
    }

    /// Paste the masked part of `target` onto `context`, then invert and
    /// regenerate the merged image.
    pub fn merge_and_invert(
        &self,
        target: &ImageTensor,
        target_mask: &RegionMask,
        context: &ImageTensor,
    ) -> Result<(ImageTensor, MergeReport)> {
        let stitched = stitch(target, context, target_mask)?;
        let output = self.reconstruct(&stitched)?;
        let report = MergeReport {
            region_mse: if target_mask.total() > 0.0 {
                Some(masked_mse(&output, target, target_mask)?)
            } else {
                None
            },
            full_mse: mse(&output, &stitched)?,
        };
        Ok((output, report))
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

/// `G(E(x))`.
pub fn reconstruct(x: &ImageTensor, encoder: &EncoderCheckpoint, gan: &GanCheckpoint) -> Result<ImageTensor> {
    Inverter::new(encoder, gan)?.reconstruct(x)
}

/// `G(E(stitch(target, context, mask)))` with its fidelity report.
pub fn merge_and_invert(
    target: &ImageTensor,
    target_mask: &RegionMask,
    context: &ImageTensor,
    encoder: &EncoderCheckpoint,
    gan: &GanCheckpoint,
) -> Result<(ImageTensor, MergeReport)> {
    Inverter::new(encoder, gan)?.merge_and_invert(target, target_mask, context)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::gan::{train_gan_on_images, GanModel, GanTrainConfig};
    use crate::image::{make_region_mask, RegionSpec};
    use deid_nn::gradcheck::{check_gradient, GradCheck};

    pub(crate) fn mini_gan_config() -> GanTrainConfig {
        GanTrainConfig {
            resolution: 8,
            d_z: 3,
            d_w: 3,
            batch_size: 2,
            steps: 2,
            g_channels: vec![3, 2],
            d_channels: vec![2],
            d_hidden: 3,
            log_every: 0,
            ..Default::default()
        }
        .resolved()
        .unwrap()
    }

    pub(crate) fn tiny_images(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|k| ImageTensor::from_fn(8, 8, |y, x, c| ((y * 5 + x * 3 + c + 7 * k) as f64 * 0.37).sin() * 0.8).unwrap())
            .collect()
    }

    pub(crate) fn mini_gan() -> GanCheckpoint {
        train_gan_on_images(&tiny_images(4), "fp", &mini_gan_config()).unwrap()
    }

    pub(crate) fn mini_encoder_config() -> EncoderTrainConfig {
        EncoderTrainConfig {
            steps: 3,
            batch_size: 4,
            channels: vec![2, 3],
            hidden: 5,
            log_every: 0,
            ..Default::default()
        }
    }

    pub(crate) fn mouth_mask() -> RegionMask {
        make_region_mask(RegionSpec::new(2, 5, 6, 7), 8, 8).unwrap()
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (model, gp) = GanModel::build::<f64>(&mini_gan_config(), 11);
        for space in [TargetSpace::W, TargetSpace::Z] {
            let gen = FrozenGenerator {
                space,
                mapping: &model.mapping,
                synthesis: &model.synthesis,
                mapping_params: &gp.mapping,
                synthesis_params: &gp.synthesis,
            };
            let (enc, p) = Encoder::build::<f64>(8, &[2, 3], 5, &[0.1, -0.2, 0.3], 4);
            assert!(p.numel() < 10_000);
            let codes = Tensor::dense(3, 2, vec![0.4, -1.1, 0.9, 0.2, -0.6, 1.3]);
            let imgs = tiny_images(2);
            let x = ImageTensor::batch_to_tensor::<f64>(&[&imgs[0], &imgs[1]]).unwrap();
            let m0 = mouth_mask();
            let m1 = crate::image::feather_mask(&m0, 1);
            let m = RegionMask::batch_to_tensor::<f64>(&[&m0, &m1]).unwrap();
            for (li, ld) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 5.0), (0.37, 2.2)] {
                let w = LossWeights::new(li, ld).unwrap();
                let loss = |q: &ParamSet<f64>, g: Option<&mut ParamSet<f64>>| {
                    composite_loss(&enc, q, &gen, Some(&codes), Some(RealBatch { images: &x, masks: &m }), w, g)
                        .unwrap()
                        .total
                };
                let mut grads = p.zeros_like();
                loss(&p, Some(&mut grads));
                let report = check_gradient(&p, &grads, |q| loss(q, None), GradCheck::default());
                assert!(report.max_rel_error < 1e-4, "{space:?} ({li}, {ld}): {report:?}");
            }
        }
    }

    #[test]
    fn loss_terms_are_nonnegative_and_combine_exactly() {
        let (model, gp) = GanModel::build::<f64>(&mini_gan_config(), 2);
        let gen = FrozenGenerator {
            space: TargetSpace::W,
            mapping: &model.mapping,
            synthesis: &model.synthesis,
            mapping_params: &gp.mapping,
            synthesis_params: &gp.synthesis,
        };
        let (enc, p) = Encoder::build::<f64>(8, &[2], 4, &[0.0; 3], 1);
        let imgs = tiny_images(3);
        let x = ImageTensor::batch_to_tensor::<f64>(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let mm = mouth_mask();
        let m = RegionMask::batch_to_tensor::<f64>(&[&mm, &mm, &mm]).unwrap();
        let w = LossWeights::new(0.7, 3.0).unwrap();
        let out = composite_loss(&enc, &p, &gen, None, Some(RealBatch { images: &x, masks: &m }), w, None).unwrap();
        assert_eq!(out.code_term, 0.0);
        assert!(out.image_term > 0.0 && out.region_term > 0.0);
        assert_eq!(out.total, out.code_term + 0.7 * out.image_term + 3.0 * out.region_term);
        let recon: Vec<ImageTensor> = {
            let y = gen.generate(&enc.infer(&p, &x));
            (0..3).map(|i| ImageTensor::from_tensor(&y, i).unwrap()).collect()
        };
        let region: f64 = (0..3).map(|i| masked_mse(&imgs[i], &recon[i], &mm).unwrap()).sum::<f64>() / 3.0;
        let image: f64 = (0..3).map(|i| mse(&imgs[i], &recon[i]).unwrap()).sum::<f64>() / 3.0;
        assert!((out.region_term - region).abs() < 1e-12);
        assert!((out.image_term - image).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let (enc, mut p) = Encoder::build::<f64>(8, &[2, 3], 5, &[0.0; 4], 9);
        p.fill_zero();
        let b = p.id("out.bias").unwrap();
        p.data_mut(b).copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        let imgs = tiny_images(2);
        let codes = enc.infer(&p, &ImageTensor::batch_to_tensor::<f64>(&[&imgs[0], &imgs[1]]).unwrap());
        assert_eq!(codes.column(0), vec![0.5, -1.0, 2.0, 0.25]);
        assert_eq!(codes.column(1), vec![0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn merge_degenerates_and_checkpoint_compatibility() {
        let gan = mini_gan();
        let images = tiny_images(4);
        let masks = vec![mouth_mask(); 4];
        let enc = train_encoder_on_images(&gan, &images, &masks, "fp", &mini_encoder_config()).unwrap();
        let (target, context) = (&images[0], &images[1]);

        let r1 = reconstruct(target, &enc, &gan).unwrap();
        let r2 = reconstruct(target, &enc, &gan).unwrap();
        assert_eq!(r1.dims(), target.dims());
        assert_eq!(r1, r2);
        assert!(r1.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let (same, rep) = merge_and_invert(target, &mouth_mask(), target, &enc, &gan).unwrap();
        assert_eq!(same, r1);
        assert!(rep.region_mse.unwrap() >= 0.0);
        let (zero, rep) = merge_and_invert(target, &RegionMask::zeros(8, 8), context, &enc, &gan).unwrap();
        assert_eq!(zero, reconstruct(context, &enc, &gan).unwrap());
        assert_eq!(rep.region_mse, None);
        assert_eq!(rep.full_mse, mse(&zero, context).unwrap());

        let code = encode(target, &enc).unwrap();
        assert_eq!(code.len(), 3);
        assert_eq!(code, encode(target, &enc).unwrap());
        let small = ImageTensor::filled(4, 4, 0.0).unwrap();
        assert!(matches!(encode(&small, &enc), Err(Error::Argument(_))));

        let other = train_gan_on_images(&tiny_images(3), "fp", &mini_gan_config()).unwrap();
        assert!(matches!(reconstruct(target, &enc, &other), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let gan = mini_gan();
        let enc = train_encoder_on_images(&gan, &tiny_images(3), &vec![mouth_mask(); 3], "fp", &mini_encoder_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tar");
        enc.save(&path).unwrap();
        let back = EncoderCheckpoint::load(&path).unwrap();
        assert_eq!(back.params, enc.params);
        assert_eq!(back.history, enc.history);
        assert_eq!(back.config, enc.config);
        assert_eq!(back.parent_gan_fingerprint, gan.fingerprint());
        assert_eq!(back.fingerprint(), enc.fingerprint());
        let csv = String::from_utf8(enc.to_archive().files["history.csv"].clone()).unwrap();
        assert!(csv.starts_with("step,code_term,image_term,region_term,total\n"));
        assert!(EncoderCheckpoint::from_archive(&gan.to_archive()).is_err());
    }
}
