use std::path::Path;

use deid_nn::{Adam, ParamSet, Scalar, Sequential, Tensor, LRELU_GAIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Attribute, AttributeLabels};
use crate::archive::Checkpoint;
use crate::error::{arg, Error, Result};
use crate::gan::images_fingerprint;
use crate::image::ImageTensor;
use crate::synth::CorpusManifest;

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Channels of the downsampling stages; each stage is a convolution,
    /// a residual block and a 2× pool. A final pool feeds the linear head.
    pub channels: Vec<usize>,
    /// Trailing fraction of the corpus held out for evaluation.
    pub holdout_fraction: f64,
    pub log_every: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            channels: vec![8, 16, 32],
            holdout_fraction: 0.1,
            log_every: 500,
        }
    }
}

impl ClassifierTrainConfig {
    fn validate(&self, resolution: usize) -> Result<()> {
        if self.batch_size == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if resolution % (2 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "{} stages do not divide resolution {resolution}",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Residual convolutional classifier split into a feature extractor and a
/// linear output head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    pub resolution: usize,
    pub categories: usize,
    features: Sequential,
    head: Sequential,
}

impl ClassifierNet {
    pub fn build<T: Scalar>(
        resolution: usize,
        categories: usize,
        channels: &[usize],
        seed: u64,
    ) -> (ClassifierNet, ParamSet<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut net = Sequential::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            net.conv(&mut p, &format!("conv{i}"), cin, c, 3, LRELU_GAIN, &mut rng)
                .lrelu()
                .pool()
                .residual(&mut p, &format!("res{i}"), c, 3, &mut rng);
            cin = c;
        }
        let spatial = resolution >> (channels.len() + 1);
        net.pool().flatten();
        let mut head = Sequential::new();
        head.dense(&mut p, "out", cin * spatial * spatial, categories, 1.0, &mut rng);
        (
            ClassifierNet {
                resolution,
                categories,
                features: net,
                head,
            },
            p,
        )
    }

    /// Penultimate features `[features, n]` and logits `[categories, n]`.
    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let f = self.features.infer(p, x);
        let logits = self.head.infer(p, &f);
        (f, logits)
    }
}

/// Column-wise softmax of a `[k, n]` logit tensor.
pub fn softmax_columns<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|n| {
            let col: Vec<f64> = logits.column(n).iter().map(|v| v.as_f64()).collect();
            let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistoryRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierCheckpoint {
    pub attribute: Attribute,
    pub config: ClassifierTrainConfig,
    pub step: usize,
    pub net: ClassifierNet,
    pub params: ParamSet<f32>,
    pub held_out_accuracy: Option<f64>,
    pub corpus_fingerprint: String,
    pub history: Vec<ClassifierHistoryRow>,
}

impl ClassifierCheckpoint {
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
                "attribute": self.attribute,
                "config": self.config,
                "step": self.step,
                "resolution": self.net.resolution,
                "held_out_accuracy": self.held_out_accuracy,
                "corpus_fingerprint": self.corpus_fingerprint,
            }),
        )
        .with_group("classifier", &self.params)
        .with_file("history.csv", history.into_inner().expect("in-memory CSV"))
    }

    pub fn fingerprint(&self) -> String {
        self.to_archive().fingerprint()
    }

    pub fn from_archive(ck: &Checkpoint) -> Result<ClassifierCheckpoint> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let attribute: Attribute = ck.meta_field("attribute")?;
        let config: ClassifierTrainConfig = ck.meta_field("config")?;
        let resolution: usize = ck.meta_field("resolution")?;
        config.validate(resolution)?;
        let (net, mut params) =
            ClassifierNet::build::<f32>(resolution, attribute.categories(), &config.channels, 0);
        params
            .load_from(ck.group("classifier")?)
            .map_err(|e| Error::Config(format!("group classifier: {e}")))?;
        let history = match ck.files.get("history.csv") {
            Some(bytes) => csv::Reader::from_reader(bytes.as_slice())
                .deserialize()
                .collect::<std::result::Result<Vec<ClassifierHistoryRow>, _>>()
                .map_err(|e| Error::Config(format!("history: {e}")))?,
            None => Vec::new(),
        };
        Ok(ClassifierCheckpoint {
            attribute,
            step: ck.meta_field("step")?,
            held_out_accuracy: ck.meta_field("held_out_accuracy")?,
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

    pub fn load(path: &Path) -> Result<ClassifierCheckpoint> {
        Self::from_archive(&Checkpoint::load(path)?)
    }

    fn check(&self, images: &[&ImageTensor]) -> Result<()> {
        let r = self.resolution();
        match images.iter().find(|i| i.dims() != (r, r)) {
            Some(bad) => Err(arg(format!("image is {:?}, classifier expects {r}x{r}", bad.dims()))),
            None => Ok(()),
        }
    }

    /// Class probabilities for each image.
    pub fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        self.check(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (_, logits) = self.net.infer(&self.params, &ImageTensor::batch_to_tensor::<f32>(images)?);
        Ok(softmax_columns(&logits))
    }

    /// Penultimate-layer feature vectors for each image.
    pub fn features(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        self.check(images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (f, _) = self.net.infer(&self.params, &ImageTensor::batch_to_tensor::<f32>(images)?);
        Ok((0..images.len())
            .map(|n| f.column(n).iter().map(|&v| v as f64).collect())
            .collect())
    }

    /// Fraction of `images` whose argmax class equals `labels`.
    pub fn accuracy(&self, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Err(arg("accuracy needs at least one image"));
        }
        let mut hits = 0;
        for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            for (p, &l) in self.predict_proba(&refs)?.iter().zip(lab) {
                if argmax(p) == l {
                    hits += 1;
                }
            }
        }
        Ok(hits as f64 / images.len() as f64)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Train on in-memory images with category labels; the last
/// `holdout_fraction` of them is kept out of training and scored.
pub fn train_classifier_on(
    attribute: Attribute,
    images: &[ImageTensor],
    labels: &[usize],
    config: &ClassifierTrainConfig,
) -> Result<ClassifierCheckpoint> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(arg("classifier training needs one label per image and at least one image"));
    }
    let res = images[0].height();
    config.validate(res)?;
    let k = attribute.categories();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(arg(format!("label {bad} out of range for {}", attribute.name())));
    }
    let n_hold = ((images.len() as f64) * config.holdout_fraction).floor() as usize;
    let n_train = images.len() - n_hold;
    if n_train == 0 {
        return Err(arg("holdout leaves no training images"));
    }
    let data = crate::gan::corpus_tensor(&images[..n_train], res)?;
    let (net, mut params) = ClassifierNet::build::<f32>(res, k, &config.channels, config.seed);
    let mut state = ClassifierCheckpoint {
        attribute,
        config: config.clone(),
        step: 0,
        net,
        params: params.clone(),
        held_out_accuracy: None,
        corpus_fingerprint: images_fingerprint(images),
        history: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0c1a_5500_0000_0006);
    let mut opt = Adam::new(&params, config.learning_rate, 0.9, 0.999);
    let mut grads = params.zeros_like();
    let b = config.batch_size;
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n_train)).collect();
        let x = data.gather_batch(&idx);
        let ft = state.net.features.forward(&params, x);
        let ht = state.net.head.forward(&params, ft.output.clone());
        let probs = softmax_columns(&ht.output);
        let mut g = Tensor::zeros(ht.output.shape);
        let mut loss = 0.0;
        let mut hits = 0;
        for (n, (p, &i)) in probs.iter().zip(&idx).enumerate() {
            let y = labels[i];
            loss -= p[y].max(1e-30).ln();
            if argmax(p) == y {
                hits += 1;
            }
            for c in 0..k {
                let t = if c == y { 1.0 } else { 0.0 };
                g.data[c * b + n] = ((p[c] - t) / b as f64) as f32;
            }
        }
        loss /= b as f64;
        grads.fill_zero();
        let gf = state.net.head.backward(&params, &ht, g, Some(&mut grads));
        state.net.features.backward(&params, &ft, gf, Some(&mut grads));
        opt.step(&mut params, &grads);
        state.step += 1;
        state.history.push(ClassifierHistoryRow {
            step: state.step,
            loss,
            accuracy: hits as f64 / b as f64,
        });
        if !(loss.is_finite() && params.is_finite()) {
            state.params = params;
            let path = std::env::temp_dir().join(format!("classifier-diagnostic-step{}.tar", state.step));
            state.save(&path)?;
            return Err(Error::NonFinite {
                step: state.step,
                checkpoint: path,
            });
        }
        if config.log_every > 0 && state.step % config.log_every == 0 {
            log::info!("{} classifier step {}: loss {:.4}", attribute.name(), state.step, loss);
        }
    }
    state.params = params;
    if n_hold > 0 {
        state.held_out_accuracy = Some(state.accuracy(&images[n_train..], &labels[n_train..])?);
    }
    Ok(state)
}

/// Train the classifier for `attribute` on a labeled corpus.
pub fn train_attribute_classifier(
    attribute: Attribute,
    corpus: &CorpusManifest,
    config: &ClassifierTrainConfig,
) -> Result<ClassifierCheckpoint> {
    let labels = corpus
        .entries
        .iter()
        .map(|e| {
            e.labels
                .as_ref()
                .map(|s| attribute.of_spec(s))
                .ok_or_else(|| arg(format!("corpus entry {} carries no labels", e.file)))
        })
        .collect::<Result<Vec<_>>>()?;
    train_classifier_on(attribute, &corpus.load_images()?, &labels, config)
}

/// The three attribute classifiers used together.
#[derive(Clone, Debug)]
pub struct ClassifierSet {
    pub gender: ClassifierCheckpoint,
    pub age_group: ClassifierCheckpoint,
    pub race: ClassifierCheckpoint,
}

impl ClassifierSet {
    /// Assemble from checkpoints in any order; every attribute must be
    /// covered exactly once.
    pub fn from_checkpoints(checkpoints: Vec<ClassifierCheckpoint>) -> Result<ClassifierSet> {
        let mut slots: [Option<ClassifierCheckpoint>; 3] = [None, None, None];
        for ck in checkpoints {
            let i = ck.attribute.index();
            if slots[i].is_some() {
                return Err(Error::Config(format!("two classifiers for {}", ck.attribute.name())));
            }
            slots[i] = Some(ck);
        }
        let [g, a, r] = slots;
        let missing = |a: Attribute| Error::Config(format!("no classifier for {}", a.name()));
        let set = ClassifierSet {
            gender: g.ok_or_else(|| missing(Attribute::Gender))?,
            age_group: a.ok_or_else(|| missing(Attribute::AgeGroup))?,
            race: r.ok_or_else(|| missing(Attribute::Race))?,
        };
        let res = set.gender.resolution();
        if set.age_group.resolution() != res || set.race.resolution() != res {
            return Err(Error::Config("classifiers disagree on resolution".into()));
        }
        Ok(set)
    }

    pub fn resolution(&self) -> usize {
        self.gender.resolution()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassifierCheckpoint> {
        [&self.gender, &self.age_group, &self.race].into_iter()
    }

    /// Concatenated penultimate features of the three classifiers.
    pub fn identity_features(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); images.len()];
        for ck in self.iter() {
            for (o, f) in out.iter_mut().zip(ck.features(images)?) {
                o.extend(f);
            }
        }
        Ok(out)
    }

    pub fn classify_batch(&self, images: &[&ImageTensor]) -> Result<Vec<AttributeLabels>> {
        let g = self.gender.predict_proba(images)?;
        let a = self.age_group.predict_proba(images)?;
        let r = self.race.predict_proba(images)?;
        (0..images.len())
            .map(|i| AttributeLabels::from_probabilities(&g[i], &a[i], &r[i]))
            .collect()
    }
}

/// Argmax labels with softmax confidences for one aligned image.
pub fn classify_attributes(image: &ImageTensor, classifiers: &ClassifierSet) -> Result<AttributeLabels> {
    Ok(classifiers.classify_batch(&[image])?.remove(0))
}
