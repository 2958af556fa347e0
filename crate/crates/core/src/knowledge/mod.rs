//! Report processing and the entity description knowledge base.

pub mod augment;
pub mod descriptions;
pub mod entity_set;
pub mod extract;
pub mod report;
pub mod types;

pub use augment::{
    augment_store, default_few_shot, parse_completion, render_augmentation_prompt,
    AugmentationRequest, CompletionClient, FixtureClient, ParsedCompletion, FEW_SHOT_COUNT,
    FIXTURE_DIR_ENV,
};
pub use descriptions::{resolve_descriptions, DescriptionStore};
pub use entity_set::{build_entity_set, EntitySet};
pub use extract::{
    extract_entities, EntityExtractor, Lexicon, LexiconEntry, CUE_WINDOW, HEDGE_CUES,
    NEGATION_CUES,
};
pub use report::{parse_processed_report, serialize_processed_report, ProcessedReport, SEP};
pub use types::{Category, DescriptionDoc, DescriptionSource, EntityMention, Presence};
