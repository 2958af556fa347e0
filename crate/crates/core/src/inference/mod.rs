//! Zero-shot entity scoring: entity-name queries attend over image patches
//! and the shared classification head maps them to presence likelihoods.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::encoders::is_unknown_only;
use crate::error::{Error, Result};
use crate::fusion::{extract_attention_map, AttentionMap, MapRecord, Reduction};
use crate::io::ScoreRecord;
use crate::model::Model;
use crate::numerics::{sigmoid, Graph, Tensor};

/// Entity names with their token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub names: Vec<String>,
    pub ids: Vec<Vec<usize>>,
    /// Queries whose words are all outside the vocabulary.
    pub unknown: Vec<bool>,
}

impl QuerySet {
    pub fn new(model: &Model, names: &[String]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Empty("query set".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidArgument("query names must be unique".into()));
        }
        if let Some(blank) = names.iter().find(|n| n.trim().is_empty()) {
            return Err(Error::InvalidArgument(format!("blank query name `{blank}`")));
        }
        let ids: Vec<Vec<usize>> = names.iter().map(|n| model.tokenize(n)).collect();
        let unknown = ids.iter().map(|i| is_unknown_only(i)).collect();
        Ok(Self {
            names: names.to_vec(),
            ids,
            unknown,
        })
    }

    /// Queries for every entity the model was trained with.
    pub fn from_model(model: &Model) -> Result<Self> {
        Self::new(model, model.entities.entities())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// `sigmoid(logit)` per query.
    pub likelihoods: Vec<f64>,
    pub maps: Vec<AttentionMap>,
    /// Last-layer attention of each query, `T_q x P`.
    pub attention: Vec<Tensor>,
    pub unknown: Vec<bool>,
}

/// Scores every query against one image.
pub fn zero_shot_classify(model: &Model, image: &Tensor, queries: &QuerySet) -> Result<Prediction> {
    let mut g = Graph::new();
    let enc = model.encode_image(&mut g, image)?;
    let mut pred = Prediction {
        logits: Vec::with_capacity(queries.len()),
        likelihoods: Vec::with_capacity(queries.len()),
        maps: Vec::with_capacity(queries.len()),
        attention: Vec::with_capacity(queries.len()),
        unknown: queries.unknown.clone(),
    };
    for ids in &queries.ids {
        let q = model.encode_text(&mut g, ids)?;
        let (logit, out) = model.entity_logit(&mut g, &q, enc.v);
        let z = g.scalar(logit);
        let attn = out.last_attention().clone();
        pred.maps.push(extract_attention_map(&attn, model.grid(), Reduction::Mean)?);
        pred.attention.push(attn);
        pred.logits.push(z);
        pred.likelihoods.push(sigmoid(z));
    }
    Ok(pred)
}

/// Per-image predictions in input order plus the `N x M` score matrix.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    pub image_ids: Vec<String>,
    pub entities: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<Prediction>,
}

impl BatchPrediction {
    pub fn score_records(&self) -> Vec<ScoreRecord> {
        let mut out = Vec::new();
        for (i, id) in self.image_ids.iter().enumerate() {
            for (m, e) in self.entities.iter().enumerate() {
                out.push(ScoreRecord {
                    image_id: id.clone(),
                    entity: e.clone(),
                    score: self.scores[i][m],
                    unknown_query: self.predictions[i].unknown[m],
                });
            }
        }
        out
    }

    pub fn map_records(&self) -> Vec<MapRecord> {
        let mut out = Vec::new();
        for (i, id) in self.image_ids.iter().enumerate() {
            for (m, e) in self.entities.iter().enumerate() {
                out.push(MapRecord::new(id, e, &self.predictions[i].maps[m], Reduction::Mean));
            }
        }
        out
    }
}

/// Runs [`zero_shot_classify`] on every image in parallel; results keep the
/// input order.
pub fn batch_zero_shot(model: &Model, images: &[(String, Tensor)], queries: &QuerySet) -> Result<BatchPrediction> {
    let predictions: Vec<Prediction> = images
        .par_iter()
        .map(|(_, img)| zero_shot_classify(model, img, queries))
        .collect::<Result<_>>()?;
    Ok(BatchPrediction {
        image_ids: images.iter().map(|(id, _)| id.clone()).collect(),
        entities: queries.names.clone(),
        scores: predictions.iter().map(|p| p.likelihoods.clone()).collect(),
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ImageEncoderConfig, TextEncoderConfig, Vocab};
    use crate::fusion::KrmConfig;
    use crate::knowledge::EntitySet;
    use crate::model::ModelConfig;
    use crate::numerics::truncated_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let vocab = Vocab::build(&["edema present absent pleural effusion"]);
        let entities = EntitySet::new(["edema".to_string(), "pleural effusion".to_string()]);
        let cfg = ModelConfig {
            image: ImageEncoderConfig {
                image_size: 8,
                patch_size: 4,
                depth: 1,
                d: 8,
                heads: 2,
                mlp_ratio: 2,
            },
            text: TextEncoderConfig {
                vocab_size: 0,
                max_len: 5,
                depth: 1,
                d: 8,
                heads: 2,
                mlp_ratio: 2,
            },
            krm: KrmConfig { layers: 2, d: 8, heads: 2 },
            init_std: 0.3,
            ..Default::default()
        };
        Model::new(cfg, vocab, entities, 1).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        truncated_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[8, 8], 0.3)
    }

    #[test]
    fn shape_and_range_contract() {
        let m = model();
        let q = QuerySet::from_model(&m).unwrap();
        let p = zero_shot_classify(&m, &image(0), &q).unwrap();
        assert_eq!(p.likelihoods.len(), 2);
        assert!(p.likelihoods.iter().all(|y| (0.0..=1.0).contains(y)));
        assert_eq!(p.maps.len(), 2);
        // inference attention is query tokens by patches
        assert_eq!(p.attention[0].shape(), [2, 4]);
        assert_eq!(p.attention[1].shape(), [3, 4]);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = model();
        for id in [m.cls_head.fc2.weight, m.cls_head.fc2.bias] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let q = QuerySet::from_model(&m).unwrap();
        let p = zero_shot_classify(&m, &image(1), &q).unwrap();
        assert!(p.likelihoods.iter().all(|y| *y == 0.5));
    }

    #[test]
    fn unknown_queries_are_flagged_but_scored() {
        let m = model();
        let q = QuerySet::new(&m, &["zzz".to_string(), "edema".to_string()]).unwrap();
        assert_eq!(q.unknown, vec![true, false]);
        let p = zero_shot_classify(&m, &image(2), &q).unwrap();
        assert_eq!(p.likelihoods.len(), 2);
        assert!(QuerySet::new(&m, &["a".to_string(), "a".to_string()]).is_err());
        assert!(QuerySet::new(&m, &[]).is_err());
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = model();
        let q = QuerySet::from_model(&m).unwrap();
        let images = vec![
            ("a".to_string(), image(3)),
            ("b".to_string(), image(4)),
            ("c".to_string(), image(3)),
        ];
        let b = batch_zero_shot(&m, &images, &q).unwrap();
        assert_eq!(b.scores.len(), 3);
        assert!(b.scores.iter().all(|r| r.len() == 2));
        assert_eq!(b.scores[0], b.scores[2]);
        for (i, (_, img)) in images.iter().enumerate() {
            let single = zero_shot_classify(&m, img, &q).unwrap();
            assert_eq!(b.scores[i], single.likelihoods);
        }
        assert_eq!(b.score_records().len(), 6);
        assert_eq!(b.map_records()[0].grid, (2, 2));
    }

    #[test]
    fn likelihood_is_monotone_in_logit() {
        let zs = [-2.0, 0.1, 3.0];
        let ys: Vec<f64> = zs.iter().map(|z| sigmoid(*z)).collect();
        assert!(ys[0] < ys[1] && ys[1] < ys[2]);
    }
}
