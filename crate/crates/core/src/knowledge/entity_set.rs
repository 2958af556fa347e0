use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::report::ProcessedReport;
use crate::error::{Error, Result};

/// The `M` entities with the highest document frequency in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    entities: Vec<String>,
}

impl EntitySet {
    /// Takes names as given; duplicates are dropped keeping first occurrence.
    pub fn new(names: impl IntoIterator<Item = String>) -> Self {
        let mut seen = BTreeSet::new();
        let entities = names
            .into_iter()
            .filter(|n| seen.insert(n.clone()))
            .collect();
        Self { entities }
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entities.iter().any(|e| e == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e == name)
    }
}

/// Ranks entities by document frequency (descending), breaking ties
/// lexicographically, and keeps the first `m`.
pub fn build_entity_set(corpus: &[ProcessedReport], m: usize) -> Result<EntitySet> {
    if corpus.is_empty() {
        return Err(Error::Empty("entity-set corpus".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("entity-set size M must be >= 1".into()));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for report in corpus {
        let unique: BTreeSet<&str> = report.mentions.iter().map(|x| x.name.as_str()).collect();
        for name in unique {
            *df.entry(name).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(EntitySet {
        entities: ranked.into_iter().take(m).map(|(n, _)| n.to_string()).collect(),
    })
}
