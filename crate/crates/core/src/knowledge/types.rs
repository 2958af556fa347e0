use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "ANAT")]
    Anat,
    #[serde(rename = "OBS")]
    Obs,
}

/// Presence status attached to an entity mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    DefinitelyPresent,
    DefinitelyAbsent,
    Uncertain,
}

impl Presence {
    /// Tag used in the serialized report.
    pub fn tag(self) -> &'static str {
        match self {
            Presence::DefinitelyPresent => "present",
            Presence::DefinitelyAbsent => "absent",
            Presence::Uncertain => "uncertain",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "present" => Some(Presence::DefinitelyPresent),
            "absent" => Some(Presence::DefinitelyAbsent),
            "uncertain" => Some(Presence::Uncertain),
            _ => None,
        }
    }

    /// Initial description weight: present 1, uncertain 0, absent −1.
    pub fn initial_weight(self) -> f64 {
        match self {
            Presence::DefinitelyPresent => 1.0,
            Presence::Uncertain => 0.0,
            Presence::DefinitelyAbsent => -1.0,
        }
    }
}

impl fmt::Display for Presence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    /// Lowercase lexicon name.
    pub name: String,
    pub category: Category,
    pub presence: Presence,
    /// `[start, end)` character offsets into the source report.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionSource {
    Curated,
    Augmented,
}

/// Visual description of one entity: a definition plus its radiographic
/// features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionDoc {
    pub entity: String,
    pub definition: String,
    pub radiographic_features: String,
    pub source: DescriptionSource,
}

impl DescriptionDoc {
    /// Text fed to the text encoder: definition and features joined by one space.
    pub fn encoder_text(&self) -> String {
        format!("{} {}", self.definition, self.radiographic_features)
    }
}
