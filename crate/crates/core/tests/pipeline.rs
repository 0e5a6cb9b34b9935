use std::path::Path;

use deid_core::detect::{train_detector, DetectorTrainConfig};
use deid_core::gan::{train_gan, GanTrainConfig};
use deid_core::identity::{build_context_db, train_attribute_classifier, Attribute, ClassifierSet, ClassifierTrainConfig, Labeling};
use deid_core::image::io::{load_png, save_png};
use deid_core::inversion::{train_encoder, EncoderTrainConfig};
use deid_core::pipeline::{
    batch_deidentify, deidentify, derive_dental_mask, evaluate_run, inputs_from_dir, inputs_from_manifest,
    load_eval_items, BatchSummary, DentalMargins, ItemStatus, Pipeline, PipelineConfig,
};
use deid_core::synth::{generate_dataset, generate_negatives, CorpusEntry, CorpusManifest};
use deid_core::image::ImageTensor;
use deid_core::Error;

const RES: usize = 32;

fn mini_pipeline(dir: &Path, threshold: f64) -> (Pipeline, CorpusManifest) {
    let corpus = generate_dataset(12, 1, "base", RES, &dir.join("faces")).unwrap();
    let negs = generate_negatives(6, 2, RES, &dir.join("negs")).unwrap();
    let gan_cfg = GanTrainConfig {
        resolution: RES,
        d_z: 4,
        d_w: 4,
        batch_size: 2,
        steps: 2,
        g_channels: vec![4, 3, 3, 2],
        d_channels: vec![2, 2, 2],
        d_hidden: 4,
        log_every: 0,
        ..Default::default()
    };
    let gan = train_gan(&corpus, &gan_cfg).unwrap();
    let mask = |e: &CorpusEntry| Ok(derive_dental_mask(&e.landmarks.unwrap(), DentalMargins::default(), RES, 2)?.1);
    let enc_cfg = EncoderTrainConfig {
        steps: 2,
        batch_size: 4,
        channels: vec![2, 2],
        hidden: 4,
        log_every: 0,
        ..Default::default()
    };
    let encoder = train_encoder(&gan, &corpus, &mask, &enc_cfg).unwrap();
    let det_cfg = DetectorTrainConfig {
        steps: 2,
        batch_size: 4,
        channels: vec![2, 2],
        hidden: 6,
        posed_copies: 1,
        log_every: 0,
        ..Default::default()
    };
    let detector = train_detector(&corpus, &negs, &det_cfg).unwrap();
    let cls_cfg = ClassifierTrainConfig {
        steps: 2,
        batch_size: 4,
        channels: vec![2],
        holdout_fraction: 0.25,
        log_every: 0,
        ..Default::default()
    };
    let cks = Attribute::ALL
        .iter()
        .map(|&a| train_attribute_classifier(a, &corpus, &cls_cfg).unwrap())
        .collect();
    let set = ClassifierSet::from_checkpoints(cks).unwrap();
    let db = build_context_db(&gan, 4, 3, Labeling::Auto, Some(&set), None).unwrap();
    let cfg = PipelineConfig {
        gan: "gan.tar".into(),
        encoder: "encoder.tar".into(),
        detector: "detector.tar".into(),
        classifiers: vec!["g.tar".into(), "a.tar".into(), "r.tar".into()],
        context_db: "contextdb".into(),
        threshold,
        feather_radius: 2,
        margins: DentalMargins::default(),
        seed: 0,
        output_dir: dir.join("out"),
    };
    let p = Pipeline::from_parts(cfg, gan, encoder, detector, set, db, "db".into()).unwrap();
    (p, corpus)
}

#[test]
fn batch_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (p, corpus) = mini_pipeline(dir.path(), 1e-9);

    let inputs_dir = dir.path().join("inputs");
    std::fs::create_dir_all(&inputs_dir).unwrap();
    for (i, img) in corpus.load_images().unwrap().iter().take(9).enumerate() {
        save_png(img, &inputs_dir.join(format!("face_{i}.png"))).unwrap();
    }
    std::fs::write(inputs_dir.join("face_9.png"), b"not a png").unwrap();
    std::fs::write(inputs_dir.join("notes.txt"), b"ignored").unwrap();

    let inputs = inputs_from_dir(&inputs_dir).unwrap();
    assert_eq!(inputs.len(), 10);
    let out = dir.path().join("run");
    let summary = batch_deidentify(&inputs, &p, &out).unwrap();
    assert_eq!((summary.total, summary.succeeded, summary.failed), (10, 9, 1));
    let bad = summary.items.iter().find(|i| i.input_id == "face_9").unwrap();
    assert_eq!(bad.status, ItemStatus::Error);
    assert!(bad.message.is_some());
    for item in summary.items.iter().filter(|i| i.status == ItemStatus::Ok) {
        let img = load_png(&out.join(format!("{}.png", item.input_id))).unwrap();
        assert_eq!((img.width(), img.height()), (RES, RES));
        let record = item.record.as_ref().unwrap();
        assert!(p.context_db.get(record.context_id).is_some());
        assert!(record.masked_mse.is_finite() && record.full_mse.is_finite());
    }
    let reloaded = BatchSummary::load(&out).unwrap();
    assert_eq!(reloaded.items.len(), 10);

    let items = load_eval_items(&reloaded, &p, None).unwrap();
    assert_eq!(items.len(), 9);
    let report = evaluate_run(&items, Some(&p.classifiers), RES).unwrap();
    assert_eq!(report.images.len(), 9);
    assert_eq!(report.overall.count, 9);
}

#[test]
fn refusals_write_nothing_and_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (p, corpus) = mini_pipeline(dir.path(), 1.0 - 1e-12);
    let out = dir.path().join("run");
    let inputs: Vec<_> = inputs_from_manifest(&corpus).into_iter().take(3).collect();
    let summary = batch_deidentify(&inputs, &p, &out).unwrap();
    assert_eq!(summary.refused, 3);
    for item in &summary.items {
        assert!(!out.join(format!("{}.png", item.input_id)).exists());
    }
    let img = corpus.load_images().unwrap().remove(0);
    assert!(matches!(deidentify(&img, "x", &p), Err(Error::NoFace)));

    let (p, _) = mini_pipeline(&dir.path().join("again"), 1e-9);
    let (a, ra) = deidentify(&img, "x", &p).unwrap();
    let (b, rb) = deidentify(&img, "x", &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.context_id, rb.context_id);
    assert_eq!(ra.masked_mse, rb.masked_mse);
}

#[test]
fn wrong_size_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = mini_pipeline(dir.path(), 1e-9);
    let small = ImageTensor::filled(16, 16, 0.0).unwrap();
    assert!(matches!(deidentify(&small, "x", &p), Err(Error::Argument(_))));
}

#[test]
fn empty_and_missing_directories() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(inputs_from_dir(&empty).unwrap().is_empty());
    let err = inputs_from_dir(&dir.path().join("missing")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 4);
}
