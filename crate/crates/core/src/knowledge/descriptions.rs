use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::entity_set::EntitySet;
use super::report::ProcessedReport;
use super::types::{DescriptionDoc, Presence};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl_atomic};

/// Entity → description lookup. Immutable once loaded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DescriptionStore {
    docs: BTreeMap<String, DescriptionDoc>,
}

impl DescriptionStore {
    pub fn new(docs: impl IntoIterator<Item = DescriptionDoc>) -> Self {
        Self {
            docs: docs.into_iter().map(|d| (d.entity.clone(), d)).collect(),
        }
    }

    pub fn get(&self, entity: &str) -> Option<&DescriptionDoc> {
        self.docs.get(entity)
    }

    pub fn insert(&mut self, doc: DescriptionDoc) {
        self.docs.insert(doc.entity.clone(), doc);
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> impl Iterator<Item = &DescriptionDoc> {
        self.docs.values()
    }

    /// One JSON object per line with keys `entity`, `definition`,
    /// `radiographic_features`, `source`.
    pub fn load(path: &Path) -> Result<Self> {
        let docs: Vec<DescriptionDoc> = read_jsonl(path)?;
        for d in &docs {
            if d.definition.trim().is_empty() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("entity `{}` has an empty definition", d.entity),
                });
            }
        }
        Ok(Self::new(docs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl_atomic(path, self.docs.values())
    }
}

/// Descriptions for the report's mentions that fall inside `entities`,
/// paired with presence. Repeated entities keep their first mention.
pub fn resolve_descriptions(
    report: &ProcessedReport,
    store: &DescriptionStore,
    entities: &EntitySet,
) -> Result<Vec<(DescriptionDoc, Presence)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in &report.mentions {
        if !entities.contains(&m.name) || !seen.insert(m.name.as_str()) {
            continue;
        }
        let doc = store
            .get(&m.name)
            .ok_or_else(|| Error::MissingDescription(m.name.clone()))?;
        out.push((doc.clone(), m.presence));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{Category, DescriptionSource, EntityMention};

    fn doc(entity: &str) -> DescriptionDoc {
        DescriptionDoc {
            entity: entity.into(),
            definition: format!("{entity} definition"),
            radiographic_features: format!("{entity} features"),
            source: DescriptionSource::Curated,
        }
    }

    fn report(items: &[(&str, Presence)]) -> ProcessedReport {
        ProcessedReport::from_mentions(
            items
                .iter()
                .map(|(n, p)| EntityMention {
                    name: n.to_string(),
                    category: Category::Obs,
                    presence: *p,
                    span: (0, 1),
                })
                .collect(),
        )
    }

    #[test]
    fn resolves_with_presence() {
        let store = DescriptionStore::new([doc("edema"), doc("effusion")]);
        let e = EntitySet::new(["edema".to_string(), "effusion".to_string()]);
        let r = report(&[
            ("edema", Presence::DefinitelyPresent),
            ("effusion", Presence::DefinitelyAbsent),
        ]);
        let got = resolve_descriptions(&r, &store, &e).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].1, Presence::DefinitelyPresent);
        assert_eq!(got[1].1, Presence::DefinitelyAbsent);
        assert_eq!(got[1].0.entity, "effusion");
    }

    #[test]
    fn no_mention_in_entity_set() {
        let store = DescriptionStore::new([doc("edema")]);
        let e = EntitySet::new(["edema".to_string()]);
        let r = report(&[("mass", Presence::DefinitelyPresent)]);
        assert!(resolve_descriptions(&r, &store, &e).unwrap().is_empty());
    }

    #[test]
    fn duplicates_keep_first_presence() {
        let store = DescriptionStore::new([doc("edema")]);
        let e = EntitySet::new(["edema".to_string()]);
        let r = report(&[("edema", Presence::Uncertain), ("edema", Presence::DefinitelyPresent)]);
        let got = resolve_descriptions(&r, &store, &e).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1, Presence::Uncertain);
    }

    #[test]
    fn missing_doc_names_entity() {
        let store = DescriptionStore::default();
        let e = EntitySet::new(["edema".to_string()]);
        let r = report(&[("edema", Presence::DefinitelyPresent)]);
        match resolve_descriptions(&r, &store, &e) {
            Err(Error::MissingDescription(name)) => assert_eq!(name, "edema"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn store_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("descriptions.jsonl");
        let store = DescriptionStore::new([doc("edema"), doc("mass")]);
        store.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"radiographic_features\""));
        assert_eq!(DescriptionStore::load(&path).unwrap(), store);
    }
}
