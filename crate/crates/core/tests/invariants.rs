use deid_core::identity::{match_context, AttributeLabels, ContextDb, ContextEntry, Labeling};
use deid_core::image::{
    estimate_similarity_transform, feather_mask, make_region_mask, masked_mse, stitch, ImageTensor, LandmarkSet, Point,
    RegionMask, RegionSpec, SimilarityTransform,
};
use deid_core::synth::{AgeGroup, Gender};
use proptest::prelude::*;

const N: usize = 8;

fn image() -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(-1.0f64..=1.0, N * N * 3).prop_map(|d| ImageTensor::new(N, N, d).unwrap())
}

fn soft_mask() -> impl Strategy<Value = RegionMask> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0], N * N)
        .prop_map(|w| RegionMask::new(N, N, w).unwrap())
}

fn region() -> impl Strategy<Value = RegionSpec> {
    (0..N, 0..N, 1..=N, 1..=N).prop_map(|(x0, y0, w, h)| RegionSpec::new(x0, y0, (x0 + w).min(N), (y0 + h).min(N)))
}

fn complement(m: &RegionMask) -> RegionMask {
    RegionMask::new(N, N, m.weights().iter().map(|w| 1.0 - w).collect()).unwrap()
}

fn labels() -> impl Strategy<Value = AttributeLabels> {
    (0..2usize, 0..4usize, 0..3usize, prop::array::uniform3(0.0f64..=1.0))
        .prop_map(|(g, a, r, c)| AttributeLabels::new(Gender::ALL[g], AgeGroup::ALL[a], r, c).unwrap())
}

proptest! {
    #[test]
    fn stitch_with_complement_swaps_sources(a in image(), b in image(), m in soft_mask()) {
        let s = stitch(&a, &b, &m).unwrap();
        let t = stitch(&b, &a, &complement(&m)).unwrap();
        for (x, y) in s.data().iter().zip(t.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stitch_stays_between_sources(a in image(), b in image(), m in soft_mask()) {
        let s = stitch(&a, &b, &m).unwrap();
        for ((v, x), y) in s.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn masked_mse_is_symmetric_and_ignores_outside(a in image(), b in image(), r in region()) {
        let m = make_region_mask(r, N, N).unwrap();
        let e = masked_mse(&a, &b, &m).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e, masked_mse(&b, &a, &m).unwrap());
        let pasted = stitch(&a, &b, &m).unwrap();
        prop_assert_eq!(masked_mse(&pasted, &a, &m).unwrap(), 0.0);
        prop_assert_eq!(masked_mse(&pasted, &b, &m).unwrap(), e);
    }

    #[test]
    fn feathering_only_grows_and_stays_in_unit_range(m in soft_mask(), radius in 0usize..4) {
        let f = feather_mask(&m, radius);
        for (w, v) in m.weights().iter().zip(f.weights()) {
            prop_assert!(*v >= *w && (0.0..=1.0).contains(v));
        }
        prop_assert_eq!(feather_mask(&m, 0), m);
    }

    #[test]
    fn similarity_fit_recovers_pose(scale in 0.5f64..2.0, rot in -1.0f64..1.0, dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let canonical = LandmarkSet::new([
            Point::new(20.0, 24.0),
            Point::new(44.0, 24.0),
            Point::new(32.0, 34.0),
            Point::new(23.0, 46.0),
            Point::new(41.0, 46.0),
        ]);
        let pose = SimilarityTransform::about(Point::new(32.0, 32.0), scale, rot, (dx, dy));
        let detected = canonical.map(&pose);
        let fit = estimate_similarity_transform(&detected, &canonical).unwrap();
        prop_assert!(detected.map(&fit).mean_error(&canonical) < 1e-9);
    }

    #[test]
    fn matching_ignores_database_order(q in labels(), entries in prop::collection::vec(labels(), 1..12), rot in 0usize..12) {
        let image = ImageTensor::filled(2, 2, 0.0).unwrap();
        let mut entries: Vec<ContextEntry> = entries
            .into_iter()
            .enumerate()
            .map(|(id, labels)| ContextEntry { id: id * 3 + 1, image: image.clone(), labels, style: Vec::new() })
            .collect();
        let db = |entries: Vec<ContextEntry>| ContextDb {
            entries,
            gan_fingerprint: String::new(),
            seed: 0,
            labeling: Labeling::Manifest,
            resolution: 2,
        };
        let first = match_context(&q, &db(entries.clone())).unwrap();
        let k = rot % entries.len();
        entries.rotate_left(k);
        entries.reverse();
        let second = match_context(&q, &db(entries)).unwrap();
        prop_assert_eq!(first.entry_id, second.entry_id);
        prop_assert!((0.0..=3.0).contains(&first.score));
    }
}
