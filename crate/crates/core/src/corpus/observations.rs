//! The fourteen observations and their four-way classes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const OBSERVATIONS: [&str; 14] = [
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural other",
    "fracture",
    "support devices",
    "no finding",
];

pub const NUM_OBSERVATIONS: usize = OBSERVATIONS.len();
pub const NO_FINDING: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObsClass {
    Positive,
    Negative,
    Uncertain,
    NoMention,
}

impl ObsClass {
    pub const ALL: [ObsClass; 4] = [ObsClass::Positive, ObsClass::Negative, ObsClass::Uncertain, ObsClass::NoMention];

    pub fn code(self) -> char {
        match self {
            ObsClass::Positive => 'P',
            ObsClass::Negative => 'N',
            ObsClass::Uncertain => 'U',
            ObsClass::NoMention => 'M',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == c)
    }

    /// Only positive counts as a positive result.
    pub fn is_positive(self) -> bool {
        self == ObsClass::Positive
    }
}

/// One class per observation, in [`OBSERVATIONS`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Annotation(pub [ObsClass; NUM_OBSERVATIONS]);

pub type BinaryObservations = [bool; NUM_OBSERVATIONS];

impl Default for Annotation {
    fn default() -> Self {
        Self([ObsClass::NoMention; NUM_OBSERVATIONS])
    }
}

impl Annotation {
    pub fn binarize(&self) -> BinaryObservations {
        self.0.map(ObsClass::is_positive)
    }

    pub fn is_all_no_mention(&self) -> bool {
        self.0.iter().all(|c| *c == ObsClass::NoMention)
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|c| write!(f, "{}", c.code()))
    }
}

impl FromStr for Annotation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let classes: Vec<ObsClass> = s
            .chars()
            .map(|c| ObsClass::from_code(c).ok_or_else(|| format!("bad class code {c:?}")))
            .collect::<Result<_, _>>()?;
        let arr: [ObsClass; NUM_OBSERVATIONS] = classes
            .try_into()
            .map_err(|v: Vec<_>| format!("expected {NUM_OBSERVATIONS} class codes, got {}", v.len()))?;
        Ok(Self(arr))
    }
}

impl Serialize for Annotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Annotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
