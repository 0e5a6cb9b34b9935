use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{BatchSummary, ItemImages, ItemStatus, Pipeline};
use crate::error::{arg, Error, Result};
use crate::identity::{AttributeLabels, ClassifierSet};
use crate::image::io::{load_png, save_png};
use crate::image::{masked_mse, ImageTensor, RegionMask};
use crate::inversion::Inverter;
use crate::synth::{AgeGroup, FaceSpec, Gender};

pub const REPORT_FILE: &str = "report.json";
pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const CONTACT_SHEET_FILE: &str = "contact_sheet.png";

/// Masked PSNR is capped here so identical regions stay finite.
pub const PSNR_CAP_DB: f64 = 100.0;

const PER_IMAGE_HEADER: [&str; 13] = [
    "id",
    "gender",
    "smiling",
    "age_group",
    "masked_mse",
    "masked_psnr",
    "identity_distance",
    "reconstruction_distance",
    "identity_changed",
    "baseline_masked_mse",
    "fidelity_delta",
    "context_id",
    "output",
];

/// Demographic group of one image. `smiling` is unknown for inputs
/// without ground-truth labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub gender: Gender,
    pub smiling: Option<bool>,
    pub age_group: AgeGroup,
}

impl GroupKey {
    pub fn from_spec(spec: &FaceSpec) -> Self {
        GroupKey {
            gender: spec.gender,
            smiling: Some(spec.smiling),
            age_group: spec.age_group,
        }
    }

    pub fn from_labels(labels: &AttributeLabels) -> Self {
        GroupKey {
            gender: labels.gender,
            smiling: None,
            age_group: labels.age_group,
        }
    }
}

fn smiling_name(s: Option<bool>) -> &'static str {
    match s {
        Some(true) => "smiling",
        Some(false) => "neutral",
        None => "unknown",
    }
}

fn parse_smiling(s: &str) -> Option<bool> {
    match s {
        "smiling" => Some(true),
        "neutral" => Some(false),
        _ => None,
    }
}

/// Everything needed to score one de-identified image.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub group: GroupKey,
    /// The aligned input.
    pub target: ImageTensor,
    pub output: ImageTensor,
    /// `G(E(target))`, the own-reconstruction baseline for identity change.
    pub reconstruction: ImageTensor,
    pub mask: RegionMask,
    /// Output of a second encoder on the same stitched input, when comparing.
    pub baseline_output: Option<ImageTensor>,
    pub context_id: Option<usize>,
    pub images: Option<ItemImages>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    pub group: GroupKey,
    pub masked_mse: f64,
    pub masked_psnr: f64,
    /// Cosine distance of probe features, input vs output.
    pub identity_distance: f64,
    /// Cosine distance of probe features, input vs its reconstruction.
    pub reconstruction_distance: f64,
    pub identity_changed: bool,
    pub baseline_masked_mse: Option<f64>,
    /// `masked_mse - baseline_masked_mse`.
    pub fidelity_delta: Option<f64>,
    pub context_id: Option<usize>,
    pub images: Option<ItemImages>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub median_masked_mse: Option<f64>,
    pub mean_masked_mse: Option<f64>,
    pub mean_masked_psnr: Option<f64>,
    pub identity_change_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: GroupKey,
    pub aggregate: Aggregate,
}

/// Paired comparison against a baseline encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub count: usize,
    pub median_masked_mse: f64,
    pub median_baseline_masked_mse: f64,
    /// `median_masked_mse / median_baseline_masked_mse`.
    pub ratio: f64,
    pub median_delta: f64,
    pub mean_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution: usize,
    pub images: Vec<ImageEval>,
    pub overall: Aggregate,
    pub groups: Vec<GroupAggregate>,
    pub ablation: Option<AblationSummary>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// `1 - cos(a, b)`; zero when either vector vanishes.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        1.0 - dot / (na * nb)
    }
}

fn capped_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn aggregate(rows: &[&ImageEval]) -> Aggregate {
    let mse: Vec<f64> = rows.iter().map(|r| r.masked_mse).collect();
    let psnr: Vec<f64> = rows.iter().map(|r| r.masked_psnr).collect();
    let changed: Vec<f64> = rows.iter().map(|r| r.identity_changed as u8 as f64).collect();
    Aggregate {
        count: rows.len(),
        median_masked_mse: median(&mse),
        mean_masked_mse: mean(&mse),
        mean_masked_psnr: mean(&psnr),
        identity_change_rate: mean(&changed),
    }
}

fn ablation(rows: &[ImageEval]) -> Option<AblationSummary> {
    let paired: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.baseline_masked_mse.map(|b| (r.masked_mse, b)))
        .collect();
    if paired.is_empty() {
        return None;
    }
    let ours: Vec<f64> = paired.iter().map(|p| p.0).collect();
    let base: Vec<f64> = paired.iter().map(|p| p.1).collect();
    let delta: Vec<f64> = paired.iter().map(|p| p.0 - p.1).collect();
    let (m, mb) = (median(&ours)?, median(&base)?);
    Some(AblationSummary {
        count: paired.len(),
        median_masked_mse: m,
        median_baseline_masked_mse: mb,
        ratio: m / mb,
        median_delta: median(&delta)?,
        mean_delta: mean(&delta)?,
    })
}

/// Aggregates of a report, recomputed from its per-image rows.
pub fn summarize(resolution: usize, images: Vec<ImageEval>) -> EvalReport {
    let mut by_group: BTreeMap<GroupKey, Vec<&ImageEval>> = BTreeMap::new();
    for r in &images {
        by_group.entry(r.group).or_default().push(r);
    }
    let groups = by_group
        .into_iter()
        .map(|(group, rows)| GroupAggregate {
            group,
            aggregate: aggregate(&rows),
        })
        .collect();
    EvalReport {
        resolution,
        overall: aggregate(&images.iter().collect::<Vec<_>>()),
        ablation: ablation(&images),
        groups,
        images,
    }
}

/// Score de-identified images for regional fidelity and identity change.
/// The probe is the set of attribute classifiers whose concatenated
/// penultimate features stand in for an identity embedding.
pub fn evaluate_run(items: &[EvalItem], probe: Option<&ClassifierSet>, resolution: usize) -> Result<EvalReport> {
    let probe = probe.ok_or_else(|| Error::Config("evaluation needs the attribute classifiers as identity probe".into()))?;
    let mut rows = Vec::with_capacity(items.len());
    for item in items {
        let feats = probe.identity_features(&[&item.target, &item.output, &item.reconstruction])?;
        let identity_distance = cosine_distance(&feats[0], &feats[1]);
        let reconstruction_distance = cosine_distance(&feats[0], &feats[2]);
        let m = masked_mse(&item.output, &item.target, &item.mask)?;
        let baseline = item
            .baseline_output
            .as_ref()
            .map(|b| masked_mse(b, &item.target, &item.mask))
            .transpose()?;
        rows.push(ImageEval {
            id: item.id.clone(),
            group: item.group,
            masked_mse: m,
            masked_psnr: capped_psnr(m),
            identity_distance,
            reconstruction_distance,
            identity_changed: identity_distance > reconstruction_distance,
            baseline_masked_mse: baseline,
            fidelity_delta: baseline.map(|b| m - b),
            context_id: item.context_id,
            images: item.images.clone(),
        });
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(summarize(resolution, rows))
}

/// Rebuild evaluation inputs from a batch output directory. Ground-truth
/// groups are used when the batch carried labels; a `baseline` inverter
/// adds the paired ablation comparison.
pub fn load_eval_items(summary: &BatchSummary, pipeline: &Pipeline, baseline: Option<&Inverter<'_>>) -> Result<Vec<EvalItem>> {
    let inverter = pipeline.inverter();
    let mut items = Vec::new();
    for item in summary.items.iter().filter(|i| i.status == ItemStatus::Ok) {
        let (record, images) = match (&item.record, &item.images) {
            (Some(r), Some(i)) => (r, i),
            _ => return Err(Error::Validation(format!("{}: successful item without record", item.input_id))),
        };
        let target = load_png(&images.aligned)?;
        let stitched = load_png(&images.stitched)?;
        let res = target.height();
        let mask = crate::image::feather_mask(
            &crate::image::make_region_mask(record.dental_region, res, res)?,
            record.feather_radius,
        );
        items.push(EvalItem {
            id: item.input_id.clone(),
            group: item.truth.as_ref().map(GroupKey::from_spec).unwrap_or_else(|| GroupKey::from_labels(&record.labels)),
            output: load_png(&images.output)?,
            reconstruction: inverter.reconstruct(&target)?,
            baseline_output: baseline.map(|b| b.reconstruct(&stitched)).transpose()?,
            target,
            mask,
            context_id: Some(record.context_id),
            images: Some(images.clone()),
        });
    }
    Ok(items)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_per_image(rows: &[ImageEval], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(PER_IMAGE_HEADER).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.group.gender.name().to_string(),
            smiling_name(r.group.smiling).to_string(),
            r.group.age_group.name().to_string(),
            r.masked_mse.to_string(),
            r.masked_psnr.to_string(),
            r.identity_distance.to_string(),
            r.reconstruction_distance.to_string(),
            r.identity_changed.to_string(),
            opt(r.baseline_masked_mse),
            opt(r.fidelity_delta),
            r.context_id.map(|c| c.to_string()).unwrap_or_default(),
            r.images.as_ref().map(|i| i.output.display().to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Parse `per_image.csv` back into rows (image paths other than the
/// output are not stored there).
pub fn read_per_image(path: &Path) -> Result<Vec<ImageEval>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let bad = |what: &str| Error::format(path, format!("invalid {what}"));
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if rec.len() != PER_IMAGE_HEADER.len() {
            return Err(bad("row length"));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(PER_IMAGE_HEADER[i]));
        let of = |i: usize| if rec[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        rows.push(ImageEval {
            id: rec[0].to_string(),
            group: GroupKey {
                gender: crate::identity::parse_gender(&rec[1]).map_err(|_| bad("gender"))?,
                smiling: parse_smiling(&rec[2]),
                age_group: crate::identity::parse_age_group(&rec[3]).map_err(|_| bad("age_group"))?,
            },
            masked_mse: f(4)?,
            masked_psnr: f(5)?,
            identity_distance: f(6)?,
            reconstruction_distance: f(7)?,
            identity_changed: rec[8].parse().map_err(|_| bad("identity_changed"))?,
            baseline_masked_mse: of(9)?,
            fidelity_delta: of(10)?,
            context_id: if rec[11].is_empty() {
                None
            } else {
                Some(rec[11].parse().map_err(|_| bad("context_id"))?)
            },
            images: None,
        });
    }
    Ok(rows)
}

/// Contact sheet: one row per age group, and for each gender the input,
/// context, stitched and output panels of the first image of that cell.
pub fn contact_sheet(report: &EvalReport) -> Result<ImageTensor> {
    const GAP: usize = 2;
    let r = report.resolution.max(1);
    let cols = 2 * 4;
    let rows = AgeGroup::ALL.len();
    let (h, w) = (rows * r + (rows + 1) * GAP, cols * r + (cols + 1) * GAP);
    let mut data = vec![1.0; h * w * 3];
    for (ri, age) in AgeGroup::ALL.iter().enumerate() {
        for (gi, gender) in Gender::ALL.iter().enumerate() {
            let Some(images) = report
                .images
                .iter()
                .filter(|e| e.group.age_group == *age && e.group.gender == *gender)
                .find_map(|e| e.images.as_ref())
            else {
                continue;
            };
            let panels = [&images.aligned, &images.context, &images.stitched, &images.output];
            for (pi, p) in panels.iter().enumerate() {
                let img = load_png(p)?;
                if img.dims() != (r, r) {
                    return Err(Error::format(p.as_path(), format!("expected {r}x{r} panel")));
                }
                let (oy, ox) = (GAP + ri * (r + GAP), GAP + (gi * 4 + pi) * (r + GAP));
                for y in 0..r {
                    for x in 0..r {
                        for c in 0..3 {
                            data[((oy + y) * w + ox + x) * 3 + c] = img.get(y, x, c);
                        }
                    }
                }
            }
        }
    }
    ImageTensor::new(h, w, data)
}

/// Write `report.json`, `per_image.csv` and the contact sheet.
pub fn emit_report(report: &EvalReport, output_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.resolution == 0 {
        return Err(arg("report resolution must be positive"));
    }
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let json = output_dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::format(&json, e))?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let csv = output_dir.join(PER_IMAGE_FILE);
    write_per_image(&report.images, &csv)?;
    let sheet = output_dir.join(CONTACT_SHEET_FILE);
    save_png(&contact_sheet(report)?, &sheet)?;
    Ok(vec![json, csv, sheet])
}

impl EvalReport {
    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{train_classifier_on, Attribute, ClassifierTrainConfig};
    use crate::image::{make_region_mask, RegionSpec};

    fn probe() -> ClassifierSet {
        let images: Vec<ImageTensor> = (0..6)
            .map(|k| ImageTensor::from_fn(8, 8, |y, x, c| ((y * 3 + x * 5 + c + 11 * k) as f64 * 0.29).cos() * 0.7).unwrap())
            .collect();
        let cfg = ClassifierTrainConfig {
            steps: 2,
            batch_size: 3,
            channels: vec![2],
            holdout_fraction: 0.34,
            log_every: 0,
            ..Default::default()
        };
        ClassifierSet::from_checkpoints(
            Attribute::ALL
                .iter()
                .map(|&a| {
                    let labels: Vec<usize> = (0..6).map(|i| i % a.categories()).collect();
                    train_classifier_on(a, &images, &labels, &cfg).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn item(k: usize, output_shift: f64, with_baseline: bool) -> EvalItem {
        let target = ImageTensor::from_fn(8, 8, |y, x, c| ((y + 2 * x + 3 * c + k) as f64 * 0.41).sin() * 0.8).unwrap();
        let output = ImageTensor::from_fn(8, 8, |y, x, c| target.get(y, x, c) * (1.0 - output_shift) + output_shift * ((x * y) as f64 * 0.3).cos()).unwrap();
        EvalItem {
            id: format!("face_{k:03}"),
            group: GroupKey {
                gender: Gender::ALL[k % 2],
                smiling: Some(k % 3 == 0),
                age_group: AgeGroup::ALL[k % 4],
            },
            reconstruction: target.clone(),
            baseline_output: with_baseline.then(|| ImageTensor::filled(8, 8, 0.1).unwrap()),
            mask: make_region_mask(RegionSpec::new(2, 4, 6, 7), 8, 8).unwrap(),
            target,
            output,
            context_id: Some(k),
            images: None,
        }
    }

    #[test]
    fn identity_output_scores_zero() {
        let items: Vec<EvalItem> = (0..5).map(|k| item(k, 0.0, false)).collect();
        let report = evaluate_run(&items, Some(&probe()), 8).unwrap();
        assert_eq!(report.overall.identity_change_rate, Some(0.0));
        assert_eq!(report.overall.median_masked_mse, Some(0.0));
        assert_eq!(report.overall.mean_masked_psnr, Some(PSNR_CAP_DB));
        assert!(report.ablation.is_none());
        assert!(matches!(evaluate_run(&items, None, 8), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_rows_carry_paired_deltas() {
        let items: Vec<EvalItem> = (0..6).map(|k| item(k, 0.5, true)).collect();
        let report = evaluate_run(&items, Some(&probe()), 8).unwrap();
        for r in &report.images {
            let d = r.fidelity_delta.unwrap();
            assert!((d - (r.masked_mse - r.baseline_masked_mse.unwrap())).abs() < 1e-15);
        }
        let a = report.ablation.as_ref().unwrap();
        assert_eq!(a.count, 6);
        assert!((a.ratio - a.median_masked_mse / a.median_baseline_masked_mse).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_basics() {
        assert!(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn empty_report_has_header_only_csv_and_four_row_sheet() {
        let dir = tempfile::tempdir().unwrap();
        let report = evaluate_run(&[], Some(&probe()), 8).unwrap();
        assert_eq!(report.overall.count, 0);
        emit_report(&report, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(PER_IMAGE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(csv.trim_end(), PER_IMAGE_HEADER.join(","));
        let sheet = load_png(&dir.path().join(CONTACT_SHEET_FILE)).unwrap();
        assert_eq!(sheet.height(), 4 * 8 + 5 * 2);
        assert_eq!(sheet.width(), 8 * 8 + 9 * 2);
    }

    #[test]
    fn aggregates_recompute_from_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<EvalItem> = (0..16).map(|k| item(k, 0.05 * k as f64, k % 2 == 0)).collect();
        let report = evaluate_run(&items, Some(&probe()), 8).unwrap();
        emit_report(&report, dir.path()).unwrap();
        let rows = read_per_image(&dir.path().join(PER_IMAGE_FILE)).unwrap();
        let recomputed = summarize(8, rows);
        let stored = EvalReport::load(&dir.path().join(REPORT_FILE)).unwrap();
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
            (None, None) => true,
            _ => false,
        };
        let same = |a: &Aggregate, b: &Aggregate| {
            a.count == b.count
                && close(a.median_masked_mse, b.median_masked_mse)
                && close(a.mean_masked_mse, b.mean_masked_mse)
                && close(a.mean_masked_psnr, b.mean_masked_psnr)
                && close(a.identity_change_rate, b.identity_change_rate)
        };
        assert!(same(&stored.overall, &recomputed.overall));
        assert_eq!(stored.groups.len(), recomputed.groups.len());
        for (a, b) in stored.groups.iter().zip(&recomputed.groups) {
            assert_eq!(a.group, b.group);
            assert!(same(&a.aggregate, &b.aggregate));
        }
        let (a, b) = (stored.ablation.unwrap(), recomputed.ablation.unwrap());
        assert!((a.median_delta - b.median_delta).abs() <= 1e-9 && (a.mean_delta - b.mean_delta).abs() <= 1e-9);
    }

    #[test]
    fn sheet_places_panels_by_age_and_gender() {
        let dir = tempfile::tempdir().unwrap();
        let mut items = Vec::new();
        for k in 0..8 {
            let mut it = item(k, 0.3, false);
            it.group = GroupKey {
                gender: Gender::ALL[k % 2],
                smiling: Some(false),
                age_group: AgeGroup::ALL[k / 2],
            };
            let paths = ItemImages {
                output: dir.path().join(format!("{k}_o.png")),
                aligned: dir.path().join(format!("{k}_a.png")),
                context: dir.path().join(format!("{k}_c.png")),
                stitched: dir.path().join(format!("{k}_s.png")),
            };
            for (i, p) in [&paths.aligned, &paths.context, &paths.stitched, &paths.output].iter().enumerate() {
                save_png(&ImageTensor::filled(8, 8, -1.0 + 0.25 * i as f64).unwrap(), p).unwrap();
            }
            it.images = Some(paths);
            items.push(it);
        }
        let report = evaluate_run(&items, Some(&probe()), 8).unwrap();
        let sheet = contact_sheet(&report).unwrap();
        assert_eq!(sheet.height(), 4 * 8 + 5 * 2);
        // Every cell is filled: each tile centre holds its panel shade.
        for row in 0..4 {
            for col in 0..8 {
                let (y, x) = (2 + row * 10 + 4, 2 + col * 10 + 4);
                let expect = crate::image::io::quantize(&ImageTensor::filled(1, 1, -1.0 + 0.25 * (col % 4) as f64).unwrap()).get(0, 0, 0);
                assert_eq!(sheet.get(y, x, 0), expect);
            }
        }
        std::fs::remove_file(dir.path().join("3_o.png")).unwrap();
        assert!(matches!(emit_report(&report, &dir.path().join("out")), Err(Error::Io { .. })));
    }
}
