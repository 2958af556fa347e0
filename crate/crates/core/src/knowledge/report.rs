use serde::{Deserialize, Serialize};

use super::types::{EntityMention, Presence};
use crate::error::{Error, Result};

pub const SEP: &str = "[SEP]";

/// Report reduced to its entity mentions plus the serialized text form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedReport {
    pub mentions: Vec<EntityMention>,
    pub serialized: String,
}

impl ProcessedReport {
    pub fn from_mentions(mentions: Vec<EntityMention>) -> Self {
        let serialized = serialize_processed_report(&mentions);
        Self {
            mentions,
            serialized,
        }
    }

    /// Number of mentions (`j`).
    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    /// Presence of the first mention of `entity`.
    pub fn presence_of(&self, entity: &str) -> Option<Presence> {
        self.mentions
            .iter()
            .find(|m| m.name == entity)
            .map(|m| m.presence)
    }
}

/// `"e1 s1 [SEP] e2 s2 [SEP] ..."`; empty input gives `""`.
pub fn serialize_processed_report(mentions: &[EntityMention]) -> String {
    mentions
        .iter()
        .map(|m| format!("{} {}", m.name, m.presence.tag()))
        .collect::<Vec<_>>()
        .join(" [SEP] ")
}

/// Inverse of [`serialize_processed_report`] on `(name, presence)` pairs.
pub fn parse_processed_report(serialized: &str) -> Result<Vec<(String, Presence)>> {
    if serialized.is_empty() {
        return Ok(Vec::new());
    }
    serialized
        .split(" [SEP] ")
        .map(|part| {
            let (name, tag) = part.rsplit_once(' ').ok_or_else(|| {
                Error::InvalidArgument(format!("report segment `{part}` has no presence tag"))
            })?;
            let presence = Presence::from_tag(tag).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown presence tag `{tag}`"))
            })?;
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("empty entity in `{part}`")));
            }
            Ok((name.to_string(), presence))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::Category;
    use proptest::prelude::*;

    fn mention(name: &str, presence: Presence) -> EntityMention {
        EntityMention {
            name: name.into(),
            category: Category::Obs,
            presence,
            span: (0, name.len()),
        }
    }

    #[test]
    fn serialization_examples() {
        assert_eq!(
            serialize_processed_report(&[mention("edema", Presence::DefinitelyPresent)]),
            "edema present"
        );
        assert_eq!(
            serialize_processed_report(&[
                mention("edema", Presence::DefinitelyPresent),
                mention("effusion", Presence::DefinitelyAbsent),
            ]),
            "edema present [SEP] effusion absent"
        );
        assert_eq!(serialize_processed_report(&[]), "");
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_processed_report("edema").is_err());
        assert!(parse_processed_report("edema maybe").is_err());
        assert!(parse_processed_report("").unwrap().is_empty());
    }

    fn presence() -> impl Strategy<Value = Presence> {
        prop_oneof![
            Just(Presence::DefinitelyPresent),
            Just(Presence::DefinitelyAbsent),
            Just(Presence::Uncertain),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(items in prop::collection::vec(("[a-z]{1,8}( [a-z]{1,8})?", presence()), 0..6)) {
            let mentions: Vec<_> = items.iter().map(|(n, p)| mention(n, *p)).collect();
            let s = serialize_processed_report(&mentions);
            let parsed = parse_processed_report(&s).unwrap();
            prop_assert_eq!(parsed, items);
        }
    }
}
