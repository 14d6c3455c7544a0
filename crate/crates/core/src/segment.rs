//! Labels and fixed-length labeled segments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Samples in one classification segment (1 s at 48 kHz).
pub const SEGMENT_LEN: usize = SAMPLE_RATE as usize;

/// Number of target classes.
pub const N_CLASSES: usize = 3;

/// Sub-category of the no-pattern class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoPatternKind {
    Speech,
    Chewing,
    Motion,
    Babble,
    Music,
    Silence,
}

impl NoPatternKind {
    pub const ALL: [NoPatternKind; 6] = [
        NoPatternKind::Speech,
        NoPatternKind::Chewing,
        NoPatternKind::Motion,
        NoPatternKind::Babble,
        NoPatternKind::Music,
        NoPatternKind::Silence,
    ];

    /// Kinds that make up the augmentation noise pool.
    pub const NOISE_POOL: [NoPatternKind; 4] = [
        NoPatternKind::Babble,
        NoPatternKind::Music,
        NoPatternKind::Motion,
        NoPatternKind::Chewing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoPatternKind::Speech => "speech",
            NoPatternKind::Chewing => "chewing",
            NoPatternKind::Motion => "motion",
            NoPatternKind::Babble => "babble",
            NoPatternKind::Music => "music",
            NoPatternKind::Silence => "silence",
        }
    }

    pub fn is_noise_pool(self) -> bool {
        Self::NOISE_POOL.contains(&self)
    }
}

impl FromStr for NoPatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown no-pattern kind '{s}'")))
    }
}

/// Segment class. The no-pattern class always carries its sub-category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    NoPattern(NoPatternKind),
    /// Single teeth click.
    Pattern1,
    /// Double teeth click.
    Pattern2,
}

impl Label {
    /// Class index used by the classifier: 0 no-pattern, 1 single, 2 double.
    pub fn class(self) -> usize {
        match self {
            Label::NoPattern(_) => 0,
            Label::Pattern1 => 1,
            Label::Pattern2 => 2,
        }
    }

    pub fn is_pattern(self) -> bool {
        !matches!(self, Label::NoPattern(_))
    }

    pub fn kind(self) -> Option<NoPatternKind> {
        match self {
            Label::NoPattern(k) => Some(k),
            _ => None,
        }
    }

    pub fn class_name(self) -> &'static str {
        CLASS_NAMES[self.class()]
    }

    /// Rebuild a label from its manifest fields.
    pub fn from_parts(class: &str, kind: Option<&str>) -> Result<Self> {
        match (class, kind) {
            ("pattern1", None) => Ok(Label::Pattern1),
            ("pattern2", None) => Ok(Label::Pattern2),
            ("no_pattern", Some(k)) => Ok(Label::NoPattern(k.parse()?)),
            _ => Err(Error::InvalidParameter(format!(
                "invalid label: class '{class}' with kind {kind:?}"
            ))),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const CLASS_NAMES: [&str; N_CLASSES] = ["no_pattern", "pattern1", "pattern2"];

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::NoPattern(k) => write!(f, "no_pattern:{}", k.name()),
            other => f.write_str(other.class_name()),
        }
    }
}

/// Parses `pattern1`, `pattern2` or `no_pattern:<kind>` (also `nopattern:<kind>`).
impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("no_pattern" | "nopattern", kind)) => Ok(Label::NoPattern(kind.parse()?)),
            None => Label::from_parts(s, None),
            _ => Err(Error::InvalidParameter(format!("invalid label '{s}'"))),
        }
    }
}

/// Where a segment came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Session { session_id: String, offset: usize },
    SyntheticDirect,
}

/// Exactly one second of waveform with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub wave: Waveform,
    pub label: Label,
    pub participant_id: String,
    pub source: Provenance,
}

impl Segment {
    pub fn new(wave: Waveform, label: Label, participant_id: impl Into<String>, source: Provenance) -> Result<Self> {
        check_segment_len(wave.len())?;
        Ok(Self {
            wave,
            label,
            participant_id: participant_id.into(),
            source,
        })
    }

    /// Same metadata, different samples.
    pub fn with_wave(&self, wave: Waveform) -> Self {
        Self {
            wave,
            label: self.label,
            participant_id: self.participant_id.clone(),
            source: self.source.clone(),
        }
    }
}

pub(crate) fn check_segment_len(len: usize) -> Result<()> {
    if len != SEGMENT_LEN {
        return Err(Error::Shape {
            expected: format!("{SEGMENT_LEN} samples"),
            actual: format!("{len} samples"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_text_roundtrip() {
        for l in [Label::Pattern1, Label::Pattern2, Label::NoPattern(NoPatternKind::Babble)] {
            assert_eq!(l.to_string().parse::<Label>().unwrap(), l);
        }
        assert!("no_pattern".parse::<Label>().is_err());
        assert!("pattern3".parse::<Label>().is_err());
    }

    #[test]
    fn kind_present_iff_no_pattern() {
        assert_eq!(Label::Pattern1.kind(), None);
        assert_eq!(Label::NoPattern(NoPatternKind::Music).kind(), Some(NoPatternKind::Music));
        assert!(Label::from_parts("pattern1", Some("music")).is_err());
    }

    #[test]
    fn wrong_length_segment_rejected() {
        let r = Segment::new(Waveform::zeros(10), Label::Pattern1, "p", Provenance::SyntheticDirect);
        assert!(r.is_err());
    }
}
