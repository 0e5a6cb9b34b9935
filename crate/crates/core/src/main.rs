use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use deid_core::detect::{train_detector, DetectorTrainConfig};
use deid_core::gan::{fine_tune_gan, train_gan, GanCheckpoint, GanTrainConfig};
use deid_core::identity::{
    build_context_db, train_attribute_classifier, Attribute, ClassifierCheckpoint, ClassifierSet, ClassifierTrainConfig, Labeling,
};
use deid_core::image::io::{load_png, save_png};
use deid_core::inversion::{train_encoder, EncoderCheckpoint, EncoderTrainConfig, Inverter};
use deid_core::pipeline::{
    batch_deidentify, deidentify, derive_dental_mask, emit_report, evaluate_run, inputs_from_dir, inputs_from_manifest,
    load_eval_items, BatchSummary, DentalMargins, EvalReport, Pipeline, PipelineConfig, REPORT_FILE,
};
use deid_core::synth::{generate_dataset, generate_negatives, CorpusManifest, NEGATIVE_DISTRIBUTION};
use deid_core::{Error, Result};

/// Dental-image de-identification by area-preserving GAN inversion.
#[derive(Parser)]
#[command(name = "deid", version)]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus generation.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// GAN training and fine-tuning.
    Gan {
        #[command(subcommand)]
        command: GanCommand,
    },
    /// Encoder training against a frozen GAN.
    Encoder {
        #[command(subcommand)]
        command: TrainOnly<EncoderTrain>,
    },
    /// Face detector training.
    Detector {
        #[command(subcommand)]
        command: TrainOnly<DetectorTrain>,
    },
    /// Attribute classifier training.
    Classifier {
        #[command(subcommand)]
        command: TrainOnly<ClassifierTrain>,
    },
    /// Context identity database.
    Contextdb {
        #[command(subcommand)]
        command: ContextdbCommand,
    },
    /// De-identify one image, or a directory or corpus with --batch.
    Deidentify(DeidentifyArgs),
    /// Score a batch run and write report.json.
    Eval(EvalArgs),
    /// Write report.json, per_image.csv and the contact sheet.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    Gen(DataGen),
}

#[derive(Subcommand)]
enum GanCommand {
    Train(GanTrain),
    Finetune(GanFinetune),
}

#[derive(Subcommand)]
enum TrainOnly<T: Args> {
    Train(T),
}

#[derive(Subcommand)]
enum ContextdbCommand {
    Build(ContextdbBuild),
}

#[derive(Args)]
struct DataGen {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// base, clinic or negative.
    #[arg(long, default_value = "base")]
    distribution: String,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GanTrain {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct GanFinetune {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EncoderTrain {
    #[arg(long)]
    gan: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_img: Option<f64>,
    #[arg(long)]
    lambda_df: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct DetectorTrain {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    negatives: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ClassifierTrain {
    /// gender, age_group or race.
    #[arg(long)]
    attribute: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ContextdbBuild {
    #[arg(long)]
    gan: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// auto or manifest.
    #[arg(long, default_value = "auto")]
    labeling: String,
    /// Classifier checkpoint, given once per attribute.
    #[arg(long = "classifier")]
    classifiers: Vec<PathBuf>,
    /// `id,gender,age,race` CSV for manifest labeling.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Pipeline settings; each flag overrides the config file.
#[derive(Args, Default)]
struct PipelineFlags {
    #[arg(long)]
    gan: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Classifier checkpoint, given once per attribute.
    #[arg(long = "classifier")]
    classifiers: Vec<PathBuf>,
    #[arg(long)]
    context_db: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    feather_radius: Option<usize>,
    #[arg(long)]
    margin_h: Option<f64>,
    #[arg(long)]
    margin_v: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DeidentifyArgs {
    /// Input PNG, or with --batch a directory of PNGs or a corpus directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    batch: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of a batch run.
    #[arg(long)]
    run: PathBuf,
    /// Second encoder for the paired fidelity comparison.
    #[arg(long)]
    baseline_encoder: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by `eval`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

/// The run configuration file: training sections plus pipeline settings.
#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    gan: GanTrainConfig,
    encoder: EncoderTrainConfig,
    detector: DetectorTrainConfig,
    classifier: ClassifierTrainConfig,
    pipeline: PipelineSection,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineSection {
    gan: Option<PathBuf>,
    encoder: Option<PathBuf>,
    detector: Option<PathBuf>,
    classifiers: Vec<PathBuf>,
    context_db: Option<PathBuf>,
    threshold: Option<f64>,
    feather_radius: Option<usize>,
    margins: Option<DentalMargins>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }

    fn pipeline(&self, flags: &PipelineFlags) -> Result<PipelineConfig> {
        let p = &self.pipeline;
        let need = |flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str| {
            flag.clone()
                .or_else(|| file.clone())
                .ok_or_else(|| Error::Validation(format!("missing --{name} (or pipeline.{} in the config)", name.replace('-', "_"))))
        };
        let defaults = DentalMargins::default();
        let margins = p.margins.unwrap_or(defaults);
        let cfg = PipelineConfig {
            gan: need(&flags.gan, &p.gan, "gan")?,
            encoder: need(&flags.encoder, &p.encoder, "encoder")?,
            detector: need(&flags.detector, &p.detector, "detector")?,
            classifiers: if flags.classifiers.is_empty() {
                p.classifiers.clone()
            } else {
                flags.classifiers.clone()
            },
            context_db: need(&flags.context_db, &p.context_db, "context-db")?,
            threshold: flags.threshold.or(p.threshold).unwrap_or(deid_core::detect::DEFAULT_THRESHOLD),
            feather_radius: flags.feather_radius.or(p.feather_radius).unwrap_or(2),
            margins: DentalMargins {
                horizontal: flags.margin_h.unwrap_or(margins.horizontal),
                vertical: flags.margin_v.unwrap_or(margins.vertical),
            },
            seed: flags.seed.or(p.seed).unwrap_or(0),
            output_dir: flags
                .output
                .clone()
                .or_else(|| p.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_corpus(dir: &Path) -> Result<CorpusManifest> {
    CorpusManifest::load(dir)
}

fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Data {
            command: DataCommand::Gen(a),
        } => {
            let m = if a.distribution == NEGATIVE_DISTRIBUTION {
                generate_negatives(a.count, a.seed, a.resolution, &a.output)?
            } else {
                generate_dataset(a.count, a.seed, &a.distribution, a.resolution, &a.output)?
            };
            println!("wrote {} images to {}", m.len(), a.output.display());
        }
        Command::Gan {
            command: GanCommand::Train(a),
        } => {
            let corpus = load_corpus(&a.corpus)?;
            let mut cfg = rc.gan.clone();
            cfg.resolution = corpus.resolution;
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            let ck = train_gan(&corpus, &cfg)?;
            ck.save(&a.output)?;
            println!("GAN {} written to {}", ck.fingerprint(), a.output.display());
        }
        Command::Gan {
            command: GanCommand::Finetune(a),
        } => {
            let base = GanCheckpoint::load(&a.checkpoint)?;
            let clinic = load_corpus(&a.corpus)?.load_images()?;
            let ck = fine_tune_gan(&base, &clinic, a.steps)?;
            ck.save(&a.output)?;
            println!("GAN {} written to {}", ck.fingerprint(), a.output.display());
        }
        Command::Encoder {
            command: TrainOnly::Train(a),
        } => {
            let gan = GanCheckpoint::load(&a.gan)?;
            let corpus = load_corpus(&a.corpus)?;
            let mut cfg = rc.encoder.clone();
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
            cfg.weights.lambda_img = a.lambda_img.unwrap_or(cfg.weights.lambda_img);
            cfg.weights.lambda_df = a.lambda_df.unwrap_or(cfg.weights.lambda_df);
            let res = corpus.resolution;
            let margins = rc.pipeline.margins.unwrap_or_default();
            let feather = rc.pipeline.feather_radius.unwrap_or(2);
            let masks = |e: &deid_core::synth::CorpusEntry| {
                let lm = e
                    .landmarks
                    .ok_or_else(|| Error::Validation(format!("{} has no landmarks for the dental mask", e.file)))?;
                Ok(derive_dental_mask(&lm, margins, res, feather)?.1)
            };
            let ck = train_encoder(&gan, &corpus, &masks, &cfg)?;
            ck.save(&a.output)?;
            println!("encoder {} written to {}", ck.fingerprint(), a.output.display());
        }
        Command::Detector {
            command: TrainOnly::Train(a),
        } => {
            let mut cfg = rc.detector.clone();
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            let ck = train_detector(&load_corpus(&a.corpus)?, &load_corpus(&a.negatives)?, &cfg)?;
            ck.save(&a.output)?;
            println!("detector {} written to {}", ck.fingerprint(), a.output.display());
        }
        Command::Classifier {
            command: TrainOnly::Train(a),
        } => {
            let attribute: Attribute = a.attribute.parse()?;
            let mut cfg = rc.classifier.clone();
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            let ck = train_attribute_classifier(attribute, &load_corpus(&a.corpus)?, &cfg)?;
            ck.save(&a.output)?;
            let acc = ck.held_out_accuracy.map_or("n/a".into(), |v| format!("{v:.4}"));
            println!("{} classifier (held-out accuracy {acc}) written to {}", attribute.name(), a.output.display());
        }
        Command::Contextdb {
            command: ContextdbCommand::Build(a),
        } => {
            let gan_path = a
                .gan
                .or(rc.pipeline.gan.clone())
                .ok_or_else(|| Error::Validation("missing --gan".into()))?;
            let output = a
                .output
                .or(rc.pipeline.context_db.clone())
                .ok_or_else(|| Error::Validation("missing --output".into()))?;
            let labeling: Labeling = a.labeling.parse()?;
            let classifier_paths = if a.classifiers.is_empty() {
                rc.pipeline.classifiers.clone()
            } else {
                a.classifiers
            };
            let classifiers = if labeling == Labeling::Auto {
                let cks = classifier_paths
                    .iter()
                    .map(|p| ClassifierCheckpoint::load(p))
                    .collect::<Result<Vec<_>>>()?;
                Some(ClassifierSet::from_checkpoints(cks)?)
            } else {
                None
            };
            let gan = GanCheckpoint::load(&gan_path)?;
            let db = build_context_db(&gan, a.count, a.seed, labeling, classifiers.as_ref(), a.labels.as_deref())?;
            db.save(&output)?;
            println!("context database of {} entries written to {}", db.len(), output.display());
        }
        Command::Deidentify(a) => {
            let cfg = rc.pipeline(&a.pipeline)?;
            let pipeline = Pipeline::load(&cfg)?;
            if a.batch {
                let inputs = if a.input.join(deid_core::synth::MANIFEST_FILE).is_file() {
                    inputs_from_manifest(&load_corpus(&a.input)?)
                } else {
                    inputs_from_dir(&a.input)?
                };
                let s = batch_deidentify(&inputs, &pipeline, &cfg.output_dir)?;
                println!(
                    "{} inputs: {} de-identified, {} refused, {} failed; records in {}",
                    s.total,
                    s.succeeded,
                    s.refused,
                    s.failed,
                    cfg.output_dir.display()
                );
            } else {
                let id = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let (output, record) = deidentify(&load_png(&a.input)?, &id, &pipeline)?;
                std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
                let out = cfg.output_dir.join(format!("{id}.png"));
                save_png(&output, &out)?;
                let rec = cfg.output_dir.join(format!("{id}.json"));
                let text = serde_json::to_string_pretty(&record).map_err(|e| Error::format(&rec, e))?;
                std::fs::write(&rec, text).map_err(|e| Error::io(&rec, e))?;
                println!(
                    "{} -> {} (context {}, masked mse {:.5})",
                    a.input.display(),
                    out.display(),
                    record.context_id,
                    record.masked_mse
                );
            }
        }
        Command::Eval(a) => {
            let cfg = rc.pipeline(&a.pipeline)?;
            let pipeline = Pipeline::load(&cfg)?;
            let summary = BatchSummary::load(&a.run)?;
            let baseline = a.baseline_encoder.as_deref().map(EncoderCheckpoint::load).transpose()?;
            let baseline_inverter = baseline.as_ref().map(|b| Inverter::new(b, &pipeline.gan)).transpose()?;
            let items = load_eval_items(&summary, &pipeline, baseline_inverter.as_ref())?;
            let report = evaluate_run(&items, Some(&pipeline.classifiers), pipeline.resolution())?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let path = cfg.output_dir.join(REPORT_FILE);
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format(&path, e))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let o = &report.overall;
            println!(
                "{} images: median masked mse {}, identity-change rate {}; report in {}",
                o.count,
                o.median_masked_mse.map_or("n/a".into(), |v| format!("{v:.5}")),
                o.identity_change_rate.map_or("n/a".into(), |v| format!("{v:.3}")),
                path.display()
            );
        }
        Command::Report(a) => {
            let report = EvalReport::load(&a.report)?;
            for p in emit_report(&report, &a.output)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
