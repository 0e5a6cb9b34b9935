//! Demographic attribute classification, the context identity database
//! and attribute-based context matching.

mod classifier;
mod contextdb;

pub use classifier::{
    classify_attributes, softmax_columns, train_attribute_classifier, train_classifier_on, ClassifierCheckpoint,
    ClassifierHistoryRow, ClassifierNet, ClassifierSet, ClassifierTrainConfig,
};
pub use contextdb::{build_context_db, ContextDb, ContextEntry, Labeling, CONTEXT_DB_FILE};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::synth::{AgeGroup, FaceSpec, Gender, RACE_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    AgeGroup,
    Race,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::AgeGroup, Attribute::Race];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::AgeGroup => "age_group",
            Attribute::Race => "race",
        }
    }

    pub fn categories(self) -> usize {
        match self {
            Attribute::Gender => Gender::ALL.len(),
            Attribute::AgeGroup => AgeGroup::ALL.len(),
            Attribute::Race => RACE_CLASSES,
        }
    }

    pub fn of_spec(self, spec: &FaceSpec) -> usize {
        match self {
            Attribute::Gender => spec.gender.index(),
            Attribute::AgeGroup => spec.age_group.index(),
            Attribute::Race => spec.race_class,
        }
    }
}

impl FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "age" | "age_group" => Ok(Attribute::AgeGroup),
            "race" => Ok(Attribute::Race),
            other => Err(arg(format!("unknown attribute {other:?} (expected gender, age_group or race)"))),
        }
    }
}

pub fn parse_gender(s: &str) -> Result<Gender> {
    Gender::ALL
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| arg(format!("unknown gender class {s:?}")))
}

pub fn parse_age_group(s: &str) -> Result<AgeGroup> {
    AgeGroup::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| arg(format!("unknown age group {s:?}")))
}

pub fn parse_race(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&r| r < RACE_CLASSES)
        .ok_or_else(|| arg(format!("unknown race class {s:?}")))
}

/// Predicted or assigned demographic labels. Confidences are ordered
/// gender, age group, race.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLabels {
    pub gender: Gender,
    pub age_group: AgeGroup,
    pub race_class: usize,
    pub confidences: [f64; 3],
}

impl AttributeLabels {
    pub fn new(gender: Gender, age_group: AgeGroup, race_class: usize, confidences: [f64; 3]) -> Result<Self> {
        if race_class >= RACE_CLASSES {
            return Err(arg(format!("race class {race_class} out of range")));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(arg(format!("confidences {confidences:?} outside [0, 1]")));
        }
        Ok(AttributeLabels {
            gender,
            age_group,
            race_class,
            confidences,
        })
    }

    /// Ground-truth labels with full confidence.
    pub fn from_spec(spec: &FaceSpec) -> Self {
        AttributeLabels {
            gender: spec.gender,
            age_group: spec.age_group,
            race_class: spec.race_class,
            confidences: [1.0; 3],
        }
    }

    pub fn from_probabilities(gender: &[f64], age: &[f64], race: &[f64]) -> Result<Self> {
        let pick = |p: &[f64]| {
            let i = classifier::argmax(p);
            (i, p[i].clamp(0.0, 1.0))
        };
        let (g, gc) = pick(gender);
        let (a, ac) = pick(age);
        let (r, rc) = pick(race);
        AttributeLabels::new(
            *Gender::ALL.get(g).ok_or_else(|| arg("gender classifier has too many outputs"))?,
            *AgeGroup::ALL.get(a).ok_or_else(|| arg("age classifier has too many outputs"))?,
            r,
            [gc, ac, rc],
        )
    }

    pub fn classes(&self) -> [usize; 3] {
        [self.gender.index(), self.age_group.index(), self.race_class]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub entry_id: usize,
    /// Agreement on gender, age group and race.
    pub agreement: [bool; 3],
    /// Number of agreeing attributes.
    pub score: f64,
    /// Query confidence summed over the agreeing attributes.
    pub confidence_mass: f64,
}

/// Pick the entry agreeing with `query` on the most attributes; ties go to
/// the larger query-confidence mass over the agreeing attributes, then to
/// the lowest entry id.
pub fn match_context(query: &AttributeLabels, db: &ContextDb) -> Result<MatchResult> {
    let q = query.classes();
    let mut best: Option<MatchResult> = None;
    for entry in &db.entries {
        let c = entry.labels.classes();
        let agreement = [q[0] == c[0], q[1] == c[1], q[2] == c[2]];
        let score = agreement.iter().filter(|&&a| a).count() as f64;
        let confidence_mass = (0..3).filter(|&i| agreement[i]).map(|i| query.confidences[i]).sum();
        let candidate = MatchResult {
            entry_id: entry.id,
            agreement,
            score,
            confidence_mass,
        };
        let better = match &best {
            None => true,
            Some(b) => (score, confidence_mass, std::cmp::Reverse(entry.id)) > (b.score, b.confidence_mass, std::cmp::Reverse(b.entry_id)),
        };
        if better {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| arg("context database is empty"))
}
