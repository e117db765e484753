//! The 14-observation label space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label-vector layout version; bump when the slot order changes.
pub const LABEL_ORDER_VERSION: u32 = 1;

pub const N_OBSERVATIONS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Observation {
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungOpacity,
    LungLesion,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
    NoFinding,
}

impl Observation {
    pub const ALL: [Observation; N_OBSERVATIONS] = [
        Observation::EnlargedCardiomediastinum,
        Observation::Cardiomegaly,
        Observation::LungOpacity,
        Observation::LungLesion,
        Observation::Edema,
        Observation::Consolidation,
        Observation::Pneumonia,
        Observation::Atelectasis,
        Observation::Pneumothorax,
        Observation::PleuralEffusion,
        Observation::PleuralOther,
        Observation::Fracture,
        Observation::SupportDevices,
        Observation::NoFinding,
    ];

    /// The 13 observations that take four classes.
    pub const DISEASES: [Observation; 13] = [
        Observation::EnlargedCardiomediastinum,
        Observation::Cardiomegaly,
        Observation::LungOpacity,
        Observation::LungLesion,
        Observation::Edema,
        Observation::Consolidation,
        Observation::Pneumonia,
        Observation::Atelectasis,
        Observation::Pneumothorax,
        Observation::PleuralEffusion,
        Observation::PleuralOther,
        Observation::Fracture,
        Observation::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Observation::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Observation::Cardiomegaly => "Cardiomegaly",
            Observation::LungOpacity => "Lung Opacity",
            Observation::LungLesion => "Lung Lesion",
            Observation::Edema => "Edema",
            Observation::Consolidation => "Consolidation",
            Observation::Pneumonia => "Pneumonia",
            Observation::Atelectasis => "Atelectasis",
            Observation::Pneumothorax => "Pneumothorax",
            Observation::PleuralEffusion => "Pleural Effusion",
            Observation::PleuralOther => "Pleural Other",
            Observation::Fracture => "Fracture",
            Observation::SupportDevices => "Support Devices",
            Observation::NoFinding => "No Finding",
        }
    }

    /// Classes this slot may take, in tie-breaking order.
    pub fn classes(self) -> &'static [Label] {
        match self {
            Observation::NoFinding => &[Label::Blank, Label::Positive],
            _ => &Label::ALL,
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Observation {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = |x: &str| x.to_lowercase().replace(['_', ' ', '-'], "");
        let key = norm(s);
        Observation::ALL
            .into_iter()
            .find(|o| norm(o.name()) == key)
            .ok_or_else(|| LabelError::UnknownObservation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Blank,
    Positive,
    Negative,
    Uncertain,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Blank, Label::Positive, Label::Negative, Label::Uncertain];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Blank => "blank",
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Uncertain => "uncertain",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "blank" | "" => Ok(Label::Blank),
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            "uncertain" => Ok(Label::Uncertain),
            other => Err(LabelError::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("unknown label value {0:?}")]
    UnknownLabel(String),
    #[error("unknown observation {0:?}")]
    UnknownObservation(String),
    #[error("label vector must have 14 slots, got {0}")]
    WrongLength(usize),
    #[error("No Finding slot cannot hold {0}")]
    LabelDomain(Label),
}

/// Report-level labels over the fixed 14-slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelVector([Label; N_OBSERVATIONS]);

impl Default for LabelVector {
    fn default() -> Self {
        Self([Label::Blank; N_OBSERVATIONS])
    }
}

impl LabelVector {
    pub fn new(slots: [Label; N_OBSERVATIONS]) -> Result<Self, LabelError> {
        let no_finding = slots[Observation::NoFinding.index()];
        if !Observation::NoFinding.classes().contains(&no_finding) {
            return Err(LabelError::LabelDomain(no_finding));
        }
        Ok(Self(slots))
    }

    pub fn get(&self, obs: Observation) -> Label {
        self.0[obs.index()]
    }

    pub fn set(&mut self, obs: Observation, label: Label) -> Result<(), LabelError> {
        if !obs.classes().contains(&label) {
            return Err(LabelError::LabelDomain(label));
        }
        self.0[obs.index()] = label;
        Ok(())
    }

    pub fn slots(&self) -> &[Label; N_OBSERVATIONS] {
        &self.0
    }

    pub fn from_strings<S: AsRef<str>>(values: &[S]) -> Result<Self, LabelError> {
        if values.len() != N_OBSERVATIONS {
            return Err(LabelError::WrongLength(values.len()));
        }
        let mut slots = [Label::Blank; N_OBSERVATIONS];
        for (slot, v) in slots.iter_mut().zip(values) {
            *slot = v.as_ref().parse()?;
        }
        Self::new(slots)
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.0.iter().map(|l| l.as_str().to_string()).collect()
    }

    /// Aggregates mention-level findings: any Positive wins, then Uncertain,
    /// then Negative; No Finding is Positive iff no disease slot is Positive
    /// or Uncertain.
    pub fn aggregate(mentions: impl IntoIterator<Item = (Observation, Label)>) -> Self {
        let rank = |l: Label| match l {
            Label::Blank => 0,
            Label::Negative => 1,
            Label::Uncertain => 2,
            Label::Positive => 3,
        };
        let mut slots = [Label::Blank; N_OBSERVATIONS];
        for (obs, label) in mentions {
            if obs == Observation::NoFinding {
                continue;
            }
            let slot = &mut slots[obs.index()];
            if rank(label) > rank(*slot) {
                *slot = label;
            }
        }
        let clean = Observation::DISEASES
            .iter()
            .all(|o| matches!(slots[o.index()], Label::Blank | Label::Negative));
        slots[Observation::NoFinding.index()] = if clean { Label::Positive } else { Label::Blank };
        Self(slots)
    }
}

impl Serialize for LabelVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        LabelVector::from_strings(&v).map_err(serde::de::Error::custom)
    }
}
