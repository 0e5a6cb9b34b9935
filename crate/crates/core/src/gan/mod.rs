//! Style-based GAN: mapping network, modulated synthesis network and a
//! convolutional critic, trained with the non-saturating logistic loss and
//! an R1 penalty on real images.

mod mapping;
mod synthesis;
mod train;

pub use mapping::{Mapping, MappingTrace};
pub use synthesis::{Synthesis, SynthesisTrace};
pub(crate) use train::{corpus_tensor, images_fingerprint};
pub use train::{
    discriminator_loss, fine_tune_gan, generator_loss, train_gan, train_gan_on_images, DiscriminatorLoss, GanHistoryRow,
};

use std::path::{Path, PathBuf};

use deid_nn::{ParamSet, Scalar, Sequential, Tensor, LRELU_GAIN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::image::ImageTensor;

pub type LatentCode = Vec<f64>;
pub type StyleCode = Vec<f64>;

pub const CHECKPOINT_KIND: &str = "gan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub resolution: usize,
    pub d_z: usize,
    pub d_w: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub r1_weight: f64,
    pub seed: u64,
    pub log_every: usize,
    /// R1 is evaluated every `r1_interval` discriminator steps with its
    /// weight scaled by the interval.
    pub r1_interval: usize,
    pub mapping_lr_mult: f64,
    pub ema_beta: f64,
    /// Constant width followed by the output width of every synthesis block.
    /// Empty selects a default for the resolution.
    pub g_channels: Vec<usize>,
    /// Width of every critic stage. Empty selects a default.
    pub d_channels: Vec<usize>,
    pub d_hidden: usize,
    /// Where a diagnostic checkpoint goes when training diverges.
    pub diagnostic_dir: Option<PathBuf>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            resolution: 64,
            d_z: 64,
            d_w: 64,
            batch_size: 16,
            steps: 10_000,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            r1_weight: 1.0,
            seed: 0,
            log_every: 500,
            r1_interval: 4,
            mapping_lr_mult: 0.1,
            ema_beta: 0.999,
            g_channels: Vec::new(),
            d_channels: Vec::new(),
            d_hidden: 64,
            diagnostic_dir: None,
        }
    }
}

fn stages_for(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::Config(format!("GAN resolution {resolution} must be a power of two ≥ 8")));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

impl GanTrainConfig {
    /// Fill in default channel widths and check every field.
    pub fn resolved(&self) -> Result<GanTrainConfig> {
        let mut c = self.clone();
        let stages = stages_for(c.resolution)?;
        if c.g_channels.is_empty() {
            let widths = [32, 32, 16, 8, 4, 4, 4];
            c.g_channels = widths[..=stages.min(widths.len() - 1)].to_vec();
        }
        if c.d_channels.is_empty() {
            let widths = [8, 16, 32, 32, 32, 32];
            c.d_channels = widths[..stages.min(widths.len())].to_vec();
        }
        if c.g_channels.len() != stages + 1 || c.d_channels.len() != stages {
            return Err(Error::Config(format!(
                "resolution {} needs {} generator widths and {} critic widths",
                c.resolution,
                stages + 1,
                stages
            )));
        }
        if c.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(c.lr_generator > 0.0 && c.lr_discriminator > 0.0 && c.mapping_lr_mult > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(c.r1_weight >= 0.0) || c.r1_interval == 0 {
            return Err(Error::Config("r1_weight must be ≥ 0 and r1_interval ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&c.ema_beta) {
            return Err(Error::Config("ema_beta must lie in [0, 1)".into()));
        }
        if c.d_z == 0 || c.d_w == 0 || c.d_hidden == 0 || c.g_channels.contains(&0) || c.d_channels.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        Ok(c)
    }
}

/// Network structure; parameters live in [`GanParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    pub mapping: Mapping,
    pub synthesis: Synthesis,
    pub discriminator: Sequential,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanParams<T> {
    pub mapping: ParamSet<T>,
    pub synthesis: ParamSet<T>,
    pub discriminator: ParamSet<T>,
}

impl GanModel {
    /// Build the networks for a resolved config and initialize parameters
    /// from `seed`.
    pub fn build<T: Scalar>(cfg: &GanTrainConfig, seed: u64) -> (GanModel, GanParams<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pm = ParamSet::new();
        let mapping = Mapping::new(&mut pm, cfg.d_z, cfg.d_w, &mut rng);
        let mut ps = ParamSet::new();
        let synthesis = Synthesis::new(&mut ps, cfg.d_w, &cfg.g_channels, &mut rng);
        let mut pd = ParamSet::new();
        let mut disc = Sequential::new();
        let mut cin = 3;
        for (i, &c) in cfg.d_channels.iter().enumerate() {
            disc.conv(&mut pd, &format!("conv{i}"), cin, c, 3, LRELU_GAIN, &mut rng).lrelu().pool();
            cin = c;
        }
        let spatial = cfg.resolution >> cfg.d_channels.len();
        disc.flatten()
            .dense(&mut pd, "fc0", cin * spatial * spatial, cfg.d_hidden, LRELU_GAIN, &mut rng)
            .lrelu()
            .dense(&mut pd, "fc1", cfg.d_hidden, 1, 1.0, &mut rng);
        let model = GanModel {
            mapping,
            synthesis,
            discriminator: disc,
            resolution: cfg.resolution,
        };
        (
            model,
            GanParams {
                mapping: pm,
                synthesis: ps,
                discriminator: pd,
            },
        )
    }
}

/// Dense `[d, n, 1, 1]` tensor from a list of equal-length vectors.
pub fn codes_to_tensor<T: Scalar>(codes: &[Vec<f64>]) -> Result<Tensor<T>> {
    let first = codes.first().ok_or_else(|| arg("empty code list"))?;
    let (d, n) = (first.len(), codes.len());
    let mut t = Tensor::zeros([d, n, 1, 1]);
    for (j, c) in codes.iter().enumerate() {
        if c.len() != d {
            return Err(arg("codes have mixed dimensions"));
        }
        for (i, &v) in c.iter().enumerate() {
            t.data[i * n + j] = T::lit(v);
        }
    }
    Ok(t)
}

pub fn tensor_to_codes<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|n| t.column(n).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Standard-normal latent codes from a seeded generator.
pub fn sample_latent(count: usize, seed: u64, d_z: usize) -> Vec<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..d_z).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Tensor<T> {
    Tensor::dense(d, n, (0..d * n).map(|_| T::lit(StandardNormal.sample(rng))).collect())
}

/// Trained GAN: raw parameters, exponential-moving-average generator
/// parameters (used for all inference), config and training record.
#[derive(Clone, Debug)]
pub struct GanCheckpoint {
    pub config: GanTrainConfig,
    pub step: usize,
    pub model: GanModel,
    pub params: GanParams<f32>,
    pub ema_mapping: ParamSet<f32>,
    pub ema_synthesis: ParamSet<f32>,
    pub history: Vec<GanHistoryRow>,
    pub corpus_fingerprint: String,
    pub parent_fingerprint: Option<String>,
}

/// Frozen generator bundle `w ↦ G(w)`, `z ↦ f(z)`.
#[derive(Clone, Copy)]
pub struct GeneratorView<'a> {
    pub mapping: &'a Mapping,
    pub synthesis: &'a Synthesis,
    pub mapping_params: &'a ParamSet<f32>,
    pub synthesis_params: &'a ParamSet<f32>,
}

impl<'a> GeneratorView<'a> {
    pub fn map(&self, z: &Tensor<f32>) -> Tensor<f32> {
        self.mapping.infer(self.mapping_params, z)
    }

    pub fn synthesize(&self, w: &Tensor<f32>) -> Tensor<f32> {
        self.synthesis.infer(self.synthesis_params, w)
    }

    pub fn d_z(&self) -> usize {
        self.mapping.d_z
    }

    pub fn d_w(&self) -> usize {
        self.mapping.d_w
    }

    pub fn resolution(&self) -> usize {
        self.synthesis.resolution
    }

    /// Mean style code over `count` latent samples.
    pub fn mean_style(&self, count: usize, seed: u64) -> Vec<f64> {
        let z = codes_to_tensor::<f32>(&sample_latent(count, seed, self.d_z())).expect("count ≥ 1");
        let w = self.map(&z);
        (0..self.d_w())
            .map(|i| w.data[i * count..(i + 1) * count].iter().map(|&v| v as f64).sum::<f64>() / count as f64)
            .collect()
    }
}

impl GanCheckpoint {
    pub fn generator(&self) -> GeneratorView<'_> {
        GeneratorView {
            mapping: &self.model.mapping,
            synthesis: &self.model.synthesis,
            mapping_params: &self.ema_mapping,
            synthesis_params: &self.ema_synthesis,
        }
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<StyleCode> {
        if z.len() != self.config.d_z {
            return Err(arg(format!("latent has {} entries, expected {}", z.len(), self.config.d_z)));
        }
        let w = self.generator().map(&codes_to_tensor(std::slice::from_ref(z))?);
        Ok(tensor_to_codes(&w).remove(0))
    }

    pub fn generate(&self, w: &StyleCode) -> Result<ImageTensor> {
        if w.len() != self.config.d_w {
            return Err(arg(format!("style code has {} entries, expected {}", w.len(), self.config.d_w)));
        }
        let img = self.generator().synthesize(&codes_to_tensor(std::slice::from_ref(w))?);
        ImageTensor::from_tensor(&img, 0)
    }

    pub fn discriminate(&self, x: &ImageTensor) -> Result<f64> {
        if x.dims() != (self.resolution(), self.resolution()) {
            return Err(arg(format!(
                "image is {:?}, discriminator expects {}x{}",
                x.dims(),
                self.resolution(),
                self.resolution()
            )));
        }
        let out = self
            .model
            .discriminator
            .infer(&self.params.discriminator, &x.to_tensor::<f32>());
        Ok(out.data[0] as f64)
    }

    pub fn to_archive(&self) -> Checkpoint {
        let mut history = csv::Writer::from_writer(Vec::new());
        for row in &self.history {
            history.serialize(row).expect("history row serializes");
        }
        let history = history.into_inner().expect("in-memory CSV");
        Checkpoint::new(
            CHECKPOINT_KIND,
            json!({
                "config": self.config,
                "step": self.step,
                "corpus_fingerprint": self.corpus_fingerprint,
                "parent_fingerprint": self.parent_fingerprint,
            }),
        )
        .with_group("mapping", &self.params.mapping)
        .with_group("synthesis", &self.params.synthesis)
        .with_group("discriminator", &self.params.discriminator)
        .with_group("mapping_ema", &self.ema_mapping)
        .with_group("synthesis_ema", &self.ema_synthesis)
        .with_file("history.csv", history)
    }

    pub fn fingerprint(&self) -> String {
        self.to_archive().fingerprint()
    }

    pub fn from_archive(ck: &Checkpoint) -> Result<GanCheckpoint> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: GanTrainConfig = ck.meta_field("config")?;
        let config = config.resolved()?;
        let (model, mut params) = GanModel::build::<f32>(&config, 0);
        let mut ema_mapping = params.mapping.clone();
        let mut ema_synthesis = params.synthesis.clone();
        let load = |dst: &mut ParamSet<f32>, group: &str| -> Result<()> {
            dst.load_from(ck.group(group)?)
                .map_err(|e| Error::Config(format!("group {group}: {e}")))
        };
        load(&mut params.mapping, "mapping")?;
        load(&mut params.synthesis, "synthesis")?;
        load(&mut params.discriminator, "discriminator")?;
        load(&mut ema_mapping, "mapping_ema")?;
        load(&mut ema_synthesis, "synthesis_ema")?;
        let history = match ck.files.get("history.csv") {
            Some(bytes) => csv::Reader::from_reader(bytes.as_slice())
                .deserialize()
                .collect::<std::result::Result<Vec<GanHistoryRow>, _>>()
                .map_err(|e| Error::Config(format!("history: {e}")))?,
            None => Vec::new(),
        };
        Ok(GanCheckpoint {
            step: ck.meta_field("step")?,
            corpus_fingerprint: ck.meta_field("corpus_fingerprint")?,
            parent_fingerprint: ck.meta_field("parent_fingerprint")?,
            config,
            model,
            params,
            ema_mapping,
            ema_synthesis,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<GanCheckpoint> {
        Self::from_archive(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_sampling_statistics() {
        assert_eq!(sample_latent(1, 0, 64), sample_latent(1, 0, 64));
        assert_ne!(sample_latent(1, 0, 64), sample_latent(1, 1, 64));
        let d = 8;
        let codes = sample_latent(100_000, 42, d);
        for i in 0..d {
            let mean = codes.iter().map(|c| c[i]).sum::<f64>() / codes.len() as f64;
            let var = codes.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / codes.len() as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((0.97..1.03).contains(&var), "var {var}");
        }
    }

    #[test]
    fn default_config_resolves() {
        let c = GanTrainConfig::default().resolved().unwrap();
        assert_eq!(c.g_channels.len(), 5);
        assert_eq!(c.d_channels.len(), 4);
        let bad = GanTrainConfig {
            resolution: 48,
            ..Default::default()
        };
        assert!(bad.resolved().is_err());
        let bad = GanTrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.resolved().is_err());
    }
}
