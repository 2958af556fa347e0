//! Few-shot prompting for missing radiographic descriptions.
//!
//! The language model sits behind [`CompletionClient`]. [`FixtureClient`]
//! answers from a directory of canned completions so nothing here needs the
//! network.

use std::path::{Path, PathBuf};

use super::descriptions::DescriptionStore;
use super::entity_set::EntitySet;
use super::types::{DescriptionDoc, DescriptionSource};
use crate::error::{Error, Result};

/// Number of worked examples placed before the target entity.
pub const FEW_SHOT_COUNT: usize = 3;

/// Environment variable naming the offline fixture directory.
pub const FIXTURE_DIR_ENV: &str = "KAVL_AUGMENT_FIXTURES";

#[derive(Debug, Clone, Copy)]
pub struct AugmentationRequest<'a> {
    pub entity: &'a str,
    pub prompt: &'a str,
}

pub trait CompletionClient {
    fn complete(&self, request: &AugmentationRequest<'_>) -> Result<String>;
}

/// Reads `<dir>/<entity>.txt`, spaces in the entity name replaced by `_`.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    dir: PathBuf,
}

impl FixtureClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var_os(FIXTURE_DIR_ENV).map(Self::new)
    }

    pub fn path_for(&self, entity: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", entity.replace(' ', "_")))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl CompletionClient for FixtureClient {
    fn complete(&self, request: &AugmentationRequest<'_>) -> Result<String> {
        let path = self.path_for(request.entity);
        std::fs::read_to_string(&path).map_err(|e| Error::Augmentation {
            entity: request.entity.to_string(),
            reason: format!("no fixture at {}: {e}", path.display()),
        })
    }
}

fn definition_turns(lines: &mut Vec<String>, name: &str, definition: &str) {
    lines.push(format!("USER: What is a {name}? Give me the definition."));
    lines.push(format!("ASSISTANT: Definition: {definition}"));
}

/// Renders the few-shot conversation. Each exemplar contributes four lines;
/// the target contributes its definition exchange (when the definition is
/// known) and then the features question, leaving the answer to the model.
/// Lines are joined with `\n` and there is no trailing newline.
pub fn render_augmentation_prompt(
    entity: &str,
    definition: Option<&str>,
    few_shot: &[DescriptionDoc],
) -> Result<String> {
    if few_shot.len() != FEW_SHOT_COUNT {
        return Err(Error::InvalidArgument(format!(
            "augmentation prompt needs exactly {FEW_SHOT_COUNT} exemplars, got {}",
            few_shot.len()
        )));
    }
    let mut lines = Vec::with_capacity(4 * FEW_SHOT_COUNT + 3);
    for ex in few_shot {
        definition_turns(&mut lines, &ex.entity, &ex.definition);
        lines.push(format!(
            "USER: What are the radiographic features of {}?",
            ex.entity
        ));
        lines.push(format!(
            "ASSISTANT: Radiographic features: {}",
            ex.radiographic_features
        ));
    }
    match definition {
        Some(def) => {
            definition_turns(&mut lines, entity, def);
            lines.push(format!("USER: What are the radiographic features of {entity}?"));
        }
        None => lines.push(format!("USER: What is a {entity}? Give me the definition.")),
    }
    Ok(lines.join("\n"))
}

/// Parsed model answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCompletion {
    pub definition: Option<String>,
    pub radiographic_features: String,
}

/// Pulls the definition (if the model produced one) and radiographic
/// features out of a completion. Text after a following `USER:` turn is
/// ignored. Without explicit markers the whole completion is taken as the
/// features text.
pub fn parse_completion(entity: &str, completion: &str) -> Result<ParsedCompletion> {
    let body = completion
        .split("\nUSER:")
        .next()
        .unwrap_or_default()
        .trim();
    let strip_assistant = |s: &str| -> String {
        s.trim()
            .strip_prefix("ASSISTANT:")
            .unwrap_or(s.trim())
            .trim()
            .to_string()
    };
    const FEATURES: &str = "Radiographic features:";
    const DEFINITION: &str = "Definition:";
    let (definition, features) = if let Some(pos) = completion.find(FEATURES) {
        let before = &completion[..pos];
        let after = &completion[pos + FEATURES.len()..];
        let features = after.split("\nUSER:").next().unwrap_or_default();
        let definition = before.find(DEFINITION).map(|d| {
            let def = &before[d + DEFINITION.len()..];
            let def = def.split("\nUSER:").next().unwrap_or_default();
            strip_assistant(def)
        });
        (definition, strip_assistant(features))
    } else {
        (None, strip_assistant(body))
    };
    if features.is_empty() {
        return Err(Error::Augmentation {
            entity: entity.to_string(),
            reason: "completion has no radiographic features".into(),
        });
    }
    Ok(ParsedCompletion {
        definition: definition.filter(|d| !d.is_empty()),
        radiographic_features: features,
    })
}

/// Fills in radiographic features for every entity in `entities` whose
/// description is missing or lacks features. Returns the augmented names.
pub fn augment_store(
    store: &mut DescriptionStore,
    entities: &EntitySet,
    few_shot: &[DescriptionDoc],
    client: &dyn CompletionClient,
) -> Result<Vec<String>> {
    let mut augmented = Vec::new();
    for entity in entities.entities() {
        let existing = store.get(entity).cloned();
        if existing
            .as_ref()
            .is_some_and(|d| !d.radiographic_features.trim().is_empty())
        {
            continue;
        }
        let known_def = existing
            .as_ref()
            .map(|d| d.definition.as_str())
            .filter(|d| !d.trim().is_empty());
        let prompt = render_augmentation_prompt(entity, known_def, few_shot)?;
        let completion = client.complete(&AugmentationRequest {
            entity,
            prompt: &prompt,
        })?;
        let parsed = parse_completion(entity, &completion)?;
        let definition = match (known_def, parsed.definition) {
            (Some(d), _) => d.to_string(),
            (None, Some(d)) => d,
            (None, None) => {
                return Err(Error::Augmentation {
                    entity: entity.clone(),
                    reason: "no definition available".into(),
                })
            }
        };
        store.insert(DescriptionDoc {
            entity: entity.clone(),
            definition,
            radiographic_features: parsed.radiographic_features,
            source: DescriptionSource::Augmented,
        });
        augmented.push(entity.clone());
    }
    Ok(augmented)
}

/// Built-in exemplars for atelectasis, lung nodule and abscess.
pub fn default_few_shot() -> Vec<DescriptionDoc> {
    let doc = |entity: &str, definition: &str, features: &str| DescriptionDoc {
        entity: entity.into(),
        definition: definition.into(),
        radiographic_features: features.into(),
        source: DescriptionSource::Curated,
    };
    vec![
        doc(
            "atelectasis",
            "Partial or complete collapse of lung tissue with loss of aeration.",
            "Increased opacity of the affected segment with volume loss, displacement of fissures toward the collapse and crowding of vessels.",
        ),
        doc(
            "lung nodule",
            "A small, rounded focal opacity within the lung measuring up to 3 cm.",
            "Well or poorly defined round density surrounded by aerated lung; margins may be smooth, lobulated or spiculated.",
        ),
        doc(
            "abscess",
            "A localized collection of pus within a cavity formed by tissue destruction.",
            "Thick-walled cavity, often with an air-fluid level and surrounding consolidation.",
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct MapClient(HashMap<String, String>);

    impl CompletionClient for MapClient {
        fn complete(&self, r: &AugmentationRequest<'_>) -> Result<String> {
            self.0.get(r.entity).cloned().ok_or_else(|| Error::Augmentation {
                entity: r.entity.into(),
                reason: "missing".into(),
            })
        }
    }

    #[test]
    fn prompt_ends_with_features_question_after_definition() {
        let p = render_augmentation_prompt("edema", Some("Fluid in tissue."), &default_few_shot()).unwrap();
        assert!(p.ends_with(
            "USER: What is a edema? Give me the definition.\nASSISTANT: Definition: Fluid in tissue.\nUSER: What are the radiographic features of edema?"
        ));
        assert!(p.starts_with("USER: What is a atelectasis? Give me the definition.\n"));
        assert_eq!(p.lines().count(), 15);
    }

    #[test]
    fn prompt_without_definition_asks_for_it() {
        let p = render_augmentation_prompt("edema", None, &default_few_shot()).unwrap();
        assert!(p.ends_with("\nUSER: What is a edema? Give me the definition."));
    }

    #[test]
    fn newlines_pass_through() {
        let mut shots = default_few_shot();
        shots[1].radiographic_features = "line one\nline two".into();
        let p = render_augmentation_prompt("edema", None, &shots).unwrap();
        assert!(p.contains("ASSISTANT: Radiographic features: line one\nline two\nUSER: What is a abscess?"));
    }

    #[test]
    fn needs_three_exemplars() {
        let shots = default_few_shot();
        assert!(render_augmentation_prompt("edema", None, &shots[..2]).is_err());
    }

    #[test]
    fn prompt_is_stable() {
        let a = render_augmentation_prompt("mass", Some("d"), &default_few_shot()).unwrap();
        let b = render_augmentation_prompt("mass", Some("d"), &default_few_shot()).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn parses_marked_and_bare_completions() {
        let p = parse_completion("x", "ASSISTANT: Radiographic features: round opacity\nUSER: next").unwrap();
        assert_eq!(p.radiographic_features, "round opacity");
        assert_eq!(p.definition, None);
        let p = parse_completion(
            "x",
            "ASSISTANT: Definition: a thing\nUSER: What are the radiographic features of x?\nASSISTANT: Radiographic features: bright",
        )
        .unwrap();
        assert_eq!(p.definition.as_deref(), Some("a thing"));
        assert_eq!(p.radiographic_features, "bright");
        assert_eq!(parse_completion("x", "  hazy  ").unwrap().radiographic_features, "hazy");
        assert!(parse_completion("x", "Radiographic features:   ").is_err());
    }

    #[test]
    fn augments_only_missing_features() {
        let mut store = DescriptionStore::new([
            DescriptionDoc {
                entity: "edema".into(),
                definition: "fluid".into(),
                radiographic_features: "".into(),
                source: DescriptionSource::Curated,
            },
            DescriptionDoc {
                entity: "mass".into(),
                definition: "lump".into(),
                radiographic_features: "dense".into(),
                source: DescriptionSource::Curated,
            },
        ]);
        let client = MapClient(HashMap::from([(
            "edema".to_string(),
            "Radiographic features: hazy".to_string(),
        )]));
        let e = EntitySet::new(["edema".to_string(), "mass".to_string()]);
        let done = augment_store(&mut store, &e, &default_few_shot(), &client).unwrap();
        assert_eq!(done, ["edema"]);
        let d = store.get("edema").unwrap();
        assert_eq!(d.radiographic_features, "hazy");
        assert_eq!(d.definition, "fluid");
        assert_eq!(d.source, DescriptionSource::Augmented);
        assert_eq!(store.get("mass").unwrap().source, DescriptionSource::Curated);
    }

    #[test]
    fn fixture_client_reads_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("pleural_effusion.txt"), "Radiographic features: meniscus").unwrap();
        let c = FixtureClient::new(dir.path());
        let out = c
            .complete(&AugmentationRequest {
                entity: "pleural effusion",
                prompt: "",
            })
            .unwrap();
        assert!(out.contains("meniscus"));
        assert!(c
            .complete(&AugmentationRequest {
                entity: "other",
                prompt: ""
            })
            .is_err());
    }
}
