//! Procedural face sprites with exact ground truth: attribute labels,
//! five landmarks and the dental rectangle.

mod analysis;
mod dataset;
mod render;

pub use analysis::{head_mean_color, tooth_gap_proxy, TOOTH_COLOR};
pub use dataset::{generate_dataset, generate_negatives, CorpusEntry, CorpusManifest, MANIFEST_FILE, NEGATIVE_DISTRIBUTION};
pub use render::{canonical_landmarks, render_face, render_face_posed, render_negative, RenderedFace};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RACE_CLASSES: usize = 3;
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [32, 64, 128];
/// Lower bound the clinic distribution imposes on `tooth_gap`.
pub const CLINIC_MIN_TOOTH_GAP: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    A,
    B,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::A, Gender::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::A => "A",
            Gender::B => "B",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    Child,
    Teenager,
    Adult,
    Senior,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [AgeGroup::Child, AgeGroup::Teenager, AgeGroup::Adult, AgeGroup::Senior];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeGroup::Child => "Child",
            AgeGroup::Teenager => "Teenager",
            AgeGroup::Adult => "Adult",
            AgeGroup::Senior => "Senior",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Base,
    Clinic,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Base => "base",
            Distribution::Clinic => "clinic",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Distribution::Base),
            "clinic" => Ok(Distribution::Clinic),
            other => Err(Error::Config(format!("unknown distribution '{other}' (expected base or clinic)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub identity_seed: u64,
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub race_class: usize,
    pub smiling: bool,
    /// Jaw width as a fraction of head width, in `[0.5, 1.0]`.
    pub jaw_width: f64,
    /// Lip thickness as a fraction of image height, in `[0.02, 0.08]`.
    pub lip_thickness: f64,
    pub tooth_count: usize,
    /// Total gap width as a fraction of mouth width, in `[0, 0.3]`.
    pub tooth_gap: f64,
}

impl FaceSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.race_class < RACE_CLASSES
            && (0.5..=1.0).contains(&self.jaw_width)
            && (0.02..=0.08).contains(&self.lip_thickness)
            && (4..=8).contains(&self.tooth_count)
            && (0.0..=0.3).contains(&self.tooth_gap);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("face spec out of range: {self:?}")))
        }
    }
}

/// Draw a spec from `distribution` ("base" or "clinic").
pub fn sample_face_spec<R: Rng>(rng: &mut R, distribution: &str) -> Result<FaceSpec> {
    let dist: Distribution = distribution.parse()?;
    Ok(sample_spec(rng, dist))
}

pub(crate) fn sample_spec<R: Rng>(rng: &mut R, dist: Distribution) -> FaceSpec {
    let identity_seed = rng.gen::<u64>();
    let gender = Gender::ALL[rng.gen_range(0..2)];
    let age_group = AgeGroup::ALL[rng.gen_range(0..4)];
    let race_class = rng.gen_range(0..RACE_CLASSES);
    let smiling = rng.gen_bool(0.5);
    let jaw_width = 0.5 + 0.5 * rng.gen::<f64>().powf(1.5);
    let lip_thickness = rng.gen_range(0.02..=0.08);
    let tooth_count = rng.gen_range(4..=8);
    let tooth_gap = 0.3 * rng.gen::<f64>().powi(2);
    let base = FaceSpec {
        identity_seed,
        gender,
        age_group,
        race_class,
        smiling,
        jaw_width,
        lip_thickness,
        tooth_count,
        tooth_gap,
    };
    match dist {
        Distribution::Base => base,
        Distribution::Clinic => shift_distribution(&base),
    }
}

/// Spec drawn from a generator seeded with `seed`.
pub fn spec_from_seed(seed: u64, dist: Distribution) -> FaceSpec {
    sample_spec(&mut ChaCha8Rng::seed_from_u64(seed), dist)
}

/// Clinic-style dental parameters: tooth gaps widened to at least
/// `CLINIC_MIN_TOOTH_GAP`; every other field passes through.
pub fn shift_distribution(base: &FaceSpec) -> FaceSpec {
    FaceSpec {
        tooth_gap: base.tooth_gap.max(CLINIC_MIN_TOOTH_GAP),
        ..*base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_spec() {
        assert_eq!(spec_from_seed(7, Distribution::Base), spec_from_seed(7, Distribution::Base));
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_face_spec(&mut a, "base").unwrap(), sample_face_spec(&mut b, "base").unwrap());
        assert_ne!(spec_from_seed(7, Distribution::Base), spec_from_seed(8, Distribution::Base));
    }

    #[test]
    fn unknown_distribution_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_face_spec(&mut rng, "celeb"), Err(Error::Config(_))));
    }

    #[test]
    fn samples_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            sample_spec(&mut rng, Distribution::Base).validate().unwrap();
            sample_spec(&mut rng, Distribution::Clinic).validate().unwrap();
        }
    }

    #[test]
    fn age_groups_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_spec(&mut rng, Distribution::Base).age_group.index()] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9% quantile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn clinic_skews_tooth_gap_upward() {
        let n = 10_000;
        let mut rng_b = ChaCha8Rng::seed_from_u64(21);
        let mut rng_c = ChaCha8Rng::seed_from_u64(22);
        let base: Vec<f64> = (0..n).map(|_| sample_spec(&mut rng_b, Distribution::Base).tooth_gap).collect();
        let clinic: Vec<f64> = (0..n).map(|_| sample_spec(&mut rng_c, Distribution::Clinic).tooth_gap).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        let (mb, mc) = (mean(&base), mean(&clinic));
        let se = (var(&base, mb) / n as f64 + var(&clinic, mc) / n as f64).sqrt();
        let z = (mc - mb) / se;
        assert!(z > 10.0, "Welch z = {z}");
    }

    #[test]
    fn shift_rule() {
        let s = FaceSpec {
            tooth_gap: 0.0,
            ..spec_from_seed(5, Distribution::Base)
        };
        let t = shift_distribution(&s);
        assert!(t.tooth_gap > s.tooth_gap);
        assert_eq!(t.gender, s.gender);
        assert_eq!(shift_distribution(&t), t);
        let wide = FaceSpec { tooth_gap: 0.25, ..s };
        assert_eq!(shift_distribution(&wide), wide);
    }
}
