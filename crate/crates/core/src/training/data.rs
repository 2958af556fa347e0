//! Turns decoded samples into model-ready triplets.

use std::collections::BTreeMap;

use crate::encoders::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::io::Sample;
use crate::knowledge::{
    build_entity_set, resolve_descriptions, DescriptionDoc, DescriptionStore, EntityExtractor,
    EntitySet, Presence, ProcessedReport,
};
use crate::numerics::Tensor;

/// One training triplet with everything tokenized.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: Tensor,
    pub report: ProcessedReport,
    pub report_ids: Vec<usize>,
    /// `(index into PreparedDataset::docs, presence)`.
    pub descriptions: Vec<(usize, Presence)>,
    /// Per entity in the entity set: 1 present, 0 absent, `None` masked.
    pub labels: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
    pub docs: Vec<DescriptionDoc>,
    pub doc_ids: Vec<Vec<usize>>,
    /// Tokenized bare entity names, in entity-set order.
    pub query_ids: Vec<Vec<usize>>,
    pub entities: EntitySet,
}

impl PreparedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Runs extraction on every report.
pub fn process_reports(samples: &[Sample], extractor: &dyn EntityExtractor) -> Vec<ProcessedReport> {
    samples
        .iter()
        .map(|s| ProcessedReport::from_mentions(extractor.extract(&s.report)))
        .collect()
}

/// Vocabulary over serialized reports, description texts and entity names.
pub fn build_vocab(reports: &[ProcessedReport], docs: &DescriptionStore, entities: &EntitySet) -> Vocab {
    let mut texts: Vec<String> = reports.iter().map(|r| r.serialized.clone()).collect();
    texts.extend(docs.docs().map(DescriptionDoc::encoder_text));
    texts.extend(entities.entities().iter().cloned());
    Vocab::build(&texts)
}

/// BCE target for an entity given the report: present 1, absent 0, else
/// masked.
pub fn label_for(report: &ProcessedReport, entity: &str) -> Option<f64> {
    match report.presence_of(entity) {
        Some(Presence::DefinitelyPresent) => Some(1.0),
        Some(Presence::DefinitelyAbsent) => Some(0.0),
        Some(Presence::Uncertain) | None => None,
    }
}

pub fn prepare_dataset(
    samples: &[Sample],
    reports: &[ProcessedReport],
    store: &DescriptionStore,
    entities: &EntitySet,
    vocab: &Vocab,
    max_len: usize,
    image_size: usize,
) -> Result<PreparedDataset> {
    if samples.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    assert_eq!(samples.len(), reports.len());
    let mut doc_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut docs = Vec::new();
    let mut prepared = Vec::with_capacity(samples.len());
    for (s, report) in samples.iter().zip(reports) {
        if s.image.size != image_size {
            return Err(Error::Shape(format!(
                "sample `{}` has image size {}, model expects {image_size}",
                s.id, s.image.size
            )));
        }
        let resolved = resolve_descriptions(report, store, entities)?;
        let descriptions = resolved
            .into_iter()
            .map(|(doc, presence)| {
                let idx = *doc_index.entry(doc.entity.clone()).or_insert_with(|| {
                    docs.push(doc);
                    docs.len() - 1
                });
                (idx, presence)
            })
            .collect();
        prepared.push(PreparedSample {
            id: s.id.clone(),
            image: s.image.to_tensor(),
            report_ids: tokenize(&report.serialized, vocab, max_len),
            report: report.clone(),
            descriptions,
            labels: entities.entities().iter().map(|e| label_for(report, e)).collect(),
        });
    }
    let doc_ids = docs
        .iter()
        .map(|d| tokenize(&d.encoder_text(), vocab, max_len))
        .collect();
    let query_ids = entities
        .entities()
        .iter()
        .map(|e| tokenize(e, vocab, max_len))
        .collect();
    Ok(PreparedDataset {
        samples: prepared,
        docs,
        doc_ids,
        query_ids,
        entities: entities.clone(),
    })
}

/// Knowledge pieces derived from a raw corpus: processed reports, entity
/// set and vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusKnowledge {
    pub reports: Vec<ProcessedReport>,
    pub entities: EntitySet,
    pub vocab: Vocab,
}

pub fn derive_knowledge(
    samples: &[Sample],
    extractor: &dyn EntityExtractor,
    store: &DescriptionStore,
    entity_set_size: usize,
) -> Result<CorpusKnowledge> {
    let reports = process_reports(samples, extractor);
    let entities = build_entity_set(&reports, entity_set_size)?;
    let vocab = build_vocab(&reports, store, &entities);
    Ok(CorpusKnowledge {
        reports,
        entities,
        vocab,
    })
}
