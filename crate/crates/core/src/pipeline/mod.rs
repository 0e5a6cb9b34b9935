//! The end-to-end de-identification pipeline and its evaluation harness.

mod eval;
mod mask;
mod run;

pub use eval::{
    aggregate, contact_sheet, cosine_distance, emit_report, evaluate_run, load_eval_items, median, read_per_image, summarize,
    AblationSummary, Aggregate, EvalItem, EvalReport, GroupAggregate, GroupKey, ImageEval, CONTACT_SHEET_FILE, PER_IMAGE_FILE,
    PSNR_CAP_DB, REPORT_FILE,
};
pub use mask::{derive_dental_mask, DentalMargins};
pub use run::{
    batch_deidentify, deidentify, deidentify_detailed, inputs_from_dir, inputs_from_manifest, ArtifactFingerprints, BatchInput,
    BatchItem, BatchSummary, DeidentifyRecord, Deidentified, DetectionSummary, ItemImages, ItemStatus, Pipeline, PipelineConfig,
    RECORDS_FILE,
};
