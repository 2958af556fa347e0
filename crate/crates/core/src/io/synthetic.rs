//! Seeded toy radiographs: each entity is drawn as a fixed shape at a random
//! location, and the report states which entities are present or absent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{GrayImage, LabelRecord, Sample};
use super::write_jsonl_atomic;
use crate::error::{Error, Result};
use crate::knowledge::{Category, DescriptionDoc, DescriptionSource, LexiconEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Bar,
    Ring,
    Cross,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Bar => "bar",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
        })
    }
}

impl Shape {
    /// Whether pixel `(r, c)` of an `extent x extent` box belongs to the shape.
    pub fn covers(self, r: usize, c: usize, extent: usize) -> bool {
        let centre = (extent as f64 - 1.0) / 2.0;
        let dr = r as f64 - centre;
        let dc = c as f64 - centre;
        let radius = extent as f64 / 2.0;
        let dist = (dr * dr + dc * dc).sqrt();
        let third = extent / 3;
        match self {
            Shape::Disc => dist <= radius,
            Shape::Square => true,
            Shape::Bar => r >= third && r < extent - third,
            Shape::Ring => dist <= radius && dist >= radius * 0.5,
            Shape::Cross => {
                (r >= third && r < extent - third) || (c >= third && c < extent - third)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEntity {
    pub name: String,
    pub shape: Shape,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_size: usize,
    /// Side length of the square box each shape is drawn in.
    pub shape_extent: usize,
    pub entities: Vec<SyntheticEntity>,
    pub samples: usize,
    /// Probability that an entity not drawn is mentioned as absent.
    pub negation_rate: f64,
    pub min_present: usize,
    pub max_present: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let e = |name: &str, shape, intensity| SyntheticEntity {
            name: name.into(),
            shape,
            intensity,
        };
        Self {
            seed: 0,
            image_size: 32,
            shape_extent: 10,
            entities: vec![
                e("nodule", Shape::Disc, 230),
                e("mass", Shape::Square, 190),
                e("effusion", Shape::Bar, 150),
                e("atelectasis", Shape::Ring, 210),
                e("consolidation", Shape::Cross, 170),
            ],
            samples: 8,
            negation_rate: 0.5,
            min_present: 1,
            max_present: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.entities.is_empty() {
            return bad("synthetic vocabulary is empty".into());
        }
        let names: BTreeSet<_> = self.entities.iter().map(|e| e.name.as_str()).collect();
        if names.len() != self.entities.len() {
            return bad("synthetic vocabulary has duplicate names".into());
        }
        if !(0.0..=1.0).contains(&self.negation_rate) {
            return bad(format!("negation rate {} outside [0, 1]", self.negation_rate));
        }
        if self.min_present == 0 || self.min_present > self.max_present {
            return bad("need 1 <= min_present <= max_present".into());
        }
        if self.max_present > self.entities.len() {
            return bad("max_present exceeds vocabulary size".into());
        }
        if self.shape_extent < 3 || self.shape_extent > self.image_size {
            return bad("shape extent must be in [3, image_size]".into());
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub samples: Vec<Sample>,
    pub descriptions: Vec<DescriptionDoc>,
    pub lexicon: Vec<LexiconEntry>,
    /// Ground truth for every (sample, entity) pair: 1 iff drawn.
    pub labels: Vec<LabelRecord>,
}

impl SyntheticCorpus {
    /// Entities drawn in sample `i`.
    pub fn present(&self, i: usize) -> Vec<&str> {
        let id = &self.samples[i].id;
        self.labels
            .iter()
            .filter(|l| &l.image_id == id && l.label == 1)
            .map(|l| l.entity.as_str())
            .collect()
    }

    /// Writes `dataset.jsonl`, `descriptions.jsonl`, `lexicon.jsonl` and
    /// `labels.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let records: Vec<_> = self.samples.iter().map(Sample::to_record).collect();
        write_jsonl_atomic(&dir.join("dataset.jsonl"), &records)?;
        write_jsonl_atomic(&dir.join("descriptions.jsonl"), &self.descriptions)?;
        write_jsonl_atomic(&dir.join("lexicon.jsonl"), &self.lexicon)?;
        write_jsonl_atomic(&dir.join("labels.jsonl"), &self.labels)
    }
}

fn boxes_overlap(a: (usize, usize), b: (usize, usize), extent: usize) -> bool {
    // one pixel of clearance between boxes
    let span = extent + 1;
    a.0 < b.0 + span && b.0 < a.0 + span && a.1 < b.1 + span && b.1 < a.1 + span
}

fn place_boxes(rng: &mut ChaCha8Rng, count: usize, size: usize, extent: usize) -> Result<Vec<(usize, usize)>> {
    for _ in 0..1000 {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
        for _ in 0..100 {
            if placed.len() == count {
                break;
            }
            let cand = (
                rng.random_range(0..=size - extent),
                rng.random_range(0..=size - extent),
            );
            if placed.iter().all(|p| !boxes_overlap(*p, cand, extent)) {
                placed.push(cand);
            }
        }
        if placed.len() == count {
            return Ok(placed);
        }
    }
    Err(Error::InvalidArgument(format!(
        "cannot place {count} shapes of extent {extent} on a {size}px image"
    )))
}

pub fn description_for(entity: &SyntheticEntity) -> DescriptionDoc {
    DescriptionDoc {
        entity: entity.name.clone(),
        definition: format!("{} is a synthetic radiological finding.", entity.name),
        radiographic_features: format!(
            "a {} shaped opacity of intensity {}.",
            entity.shape, entity.intensity
        ),
        source: DescriptionSource::Curated,
    }
}

/// Builds the corpus. Present-entity sets and reports are unique across
/// samples while the vocabulary allows it.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_ent = spec.entities.len();
    let width = spec.samples.to_string().len().max(3);
    let mut seen_sets = BTreeSet::new();
    let mut seen_reports = BTreeSet::new();
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples * n_ent);
    for s in 0..spec.samples {
        let mut attempt = 0;
        let (present, report) = loop {
            let k = rng.random_range(spec.min_present..=spec.max_present);
            let mut order: Vec<usize> = (0..n_ent).collect();
            order.shuffle(&mut rng);
            let mut present: Vec<usize> = order[..k].to_vec();
            present.sort_unstable();
            let mut sentences: Vec<String> = present
                .iter()
                .map(|&e| format!("there is {}.", spec.entities[e].name))
                .collect();
            for &e in &order[k..] {
                if rng.random::<f64>() < spec.negation_rate {
                    sentences.push(format!("no {}.", spec.entities[e].name));
                }
            }
            sentences.shuffle(&mut rng);
            let report = sentences.join(" ");
            attempt += 1;
            let fresh = !seen_sets.contains(&present) && !seen_reports.contains(&report);
            if fresh || attempt >= 100 {
                seen_sets.insert(present.clone());
                seen_reports.insert(report.clone());
                break (present, report);
            }
        };
        let mut image = GrayImage::filled(spec.image_size, 0);
        for p in image.pixels.iter_mut() {
            *p = rng.random_range(20..=40);
        }
        let boxes = place_boxes(&mut rng, present.len(), spec.image_size, spec.shape_extent)?;
        let mut masks = BTreeMap::new();
        for (&e, &(top, left)) in present.iter().zip(&boxes) {
            let ent = &spec.entities[e];
            let mut mask = GrayImage::filled(spec.image_size, 0);
            for r in 0..spec.shape_extent {
                for c in 0..spec.shape_extent {
                    if ent.shape.covers(r, c, spec.shape_extent) {
                        image.set(top + r, left + c, ent.intensity);
                        mask.set(top + r, left + c, 1);
                    }
                }
            }
            masks.insert(ent.name.clone(), mask);
        }
        let id = format!("syn{s:0width$}");
        for (e, ent) in spec.entities.iter().enumerate() {
            labels.push(LabelRecord {
                image_id: id.clone(),
                entity: ent.name.clone(),
                label: u8::from(present.contains(&e)),
            });
        }
        samples.push(Sample {
            id,
            image,
            report,
            masks,
        });
    }
    Ok(SyntheticCorpus {
        samples,
        descriptions: spec.entities.iter().map(description_for).collect(),
        lexicon: spec
            .entities
            .iter()
            .map(|e| LexiconEntry {
                name: e.name.clone(),
                category: Category::Obs,
            })
            .collect(),
        labels,
    })
}
