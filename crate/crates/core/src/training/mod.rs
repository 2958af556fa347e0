//! Batch assembly, AdamW, the learning-rate schedule and the training loop.

pub mod data;
mod optimizer;
mod schedule;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    build_vocab, derive_knowledge, label_for, prepare_dataset, process_reports, CorpusKnowledge,
    PreparedDataset, PreparedSample,
};
pub use optimizer::{optimizer_step, OptimizerState};
pub use schedule::{lr_at, warmup_steps};

use crate::encoders::{weighted_sum, DescriptionWeights, TextEncoding};
use crate::error::{Error, Result};
use crate::io::write_jsonl_atomic;
use crate::losses::{bce_loss, itc_loss, pta_loss, tnc_loss, total_loss, BatchViews, EncodedViews, LossBreakdown, LossParts};
use crate::model::Model;
use crate::numerics::{Graph, Grads, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_peak: f64,
    pub lr_warmup_start: f64,
    pub alpha: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Average the text-to-image ITC term in as well.
    pub symmetric_itc: bool,
    pub freeze_text: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 100,
            warmup_epochs: 25,
            lr_peak: 5e-5,
            lr_warmup_start: 1e-6,
            alpha: 1.0,
            seed: 0,
            deterministic: true,
            weight_decay: 0.01,
            grad_clip: 1.0,
            symmetric_itc: false,
            freeze_text: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size < 2 {
            return bad("batch size must be >= 2 for the contrastive losses");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if !(self.lr_peak > 0.0 && self.lr_warmup_start > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        Ok(())
    }
}

/// Result of one forward pass over a batch.
#[derive(Debug)]
pub struct StepForward {
    pub graph: Graph,
    pub total: Var,
    pub losses: LossBreakdown,
    pub pta_skipped: usize,
    pub bce_skipped: bool,
}

/// Loss nodes of one batch inside a caller-owned graph.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub losses: LossBreakdown,
    pub pta_skipped: usize,
    pub bce_skipped: bool,
}

/// Builds the full loss graph for `indices`. Each distinct description and
/// each entity query is encoded once per batch.
pub fn batch_forward(model: &Model, data: &PreparedDataset, indices: &[usize], cfg: &TrainConfig) -> Result<StepForward> {
    let mut graph = Graph::new();
    let out = batch_loss(&mut graph, model, data, indices, cfg)?;
    Ok(StepForward {
        graph,
        total: out.total,
        losses: out.losses,
        pta_skipped: out.pta_skipped,
        bce_skipped: out.bce_skipped,
    })
}

/// Same as [`batch_forward`] but records into `g`.
pub fn batch_loss(g: &mut Graph, model: &Model, data: &PreparedDataset, indices: &[usize], cfg: &TrainConfig) -> Result<BatchLoss> {
    let t_len = model.max_len();
    let d = model.config.d();

    let mut doc_enc: BTreeMap<usize, TextEncoding> = BTreeMap::new();
    for &i in indices {
        for &(doc, _) in &data.samples[i].descriptions {
            if let std::collections::btree_map::Entry::Vacant(e) = doc_enc.entry(doc) {
                e.insert(model.encode_text(g, &data.doc_ids[doc])?);
            }
        }
    }
    let queries: Vec<TextEncoding> = data
        .query_ids
        .iter()
        .map(|ids| model.encode_text(g, ids))
        .collect::<Result<_>>()?;

    let mut views = Vec::with_capacity(indices.len());
    let mut k_flags = Vec::with_capacity(indices.len());
    let mut labels = Vec::new();
    let mut label_mask = Vec::new();
    for &i in indices {
        let s = &data.samples[i];
        let img = model.encode_image(g, &s.image)?;
        let t_e = model.encode_text(g, &s.report_ids)?;
        let presences: Vec<_> = s.descriptions.iter().map(|(_, p)| *p).collect();
        let weights = DescriptionWeights::from_presences(&presences);
        let w = (!weights.is_empty()).then(|| weights.leaf(g));
        let encs: Vec<&TextEncoding> = s.descriptions.iter().map(|(doc, _)| &doc_enc[doc]).collect();
        let t_d = weighted_sum(g, &encs, w, t_len, d)?;
        k_flags.push(!t_d.empty);
        for l in &s.labels {
            labels.push(l.unwrap_or(0.0));
            label_mask.push(l.is_some());
        }
        views.push(EncodedViews {
            v: img.v,
            v_cls: img.v_cls,
            t_e,
            t_d,
        });
    }
    let batch = BatchViews {
        views,
        labels,
        label_mask,
        k_flags,
    };

    let v_cls = batch.v_cls(g);
    let t_cls = batch.t_cls(g);
    let tau = g.param(&model.params, model.tau);
    let itc = itc_loss(g, v_cls, t_cls, tau, cfg.symmetric_itc)?;
    let tnc = tnc_loss(g, &model.params, &model.krm, &model.tnc_head, &batch)?.loss;
    let pta = pta_loss(g, &model.params, &model.krm, &model.pta_head, &batch);

    let (bce, bce_skipped) = if batch.label_mask.iter().any(|m| *m) {
        let mut rows = Vec::with_capacity(batch.len());
        for view in &batch.views {
            let logits: Vec<Var> = queries
                .iter()
                .map(|q| model.entity_logit(g, q, view.v).0)
                .collect();
            rows.push(g.concat_cols(&logits));
        }
        let logits = g.concat_rows(&rows);
        bce_loss(g, logits, &batch.labels, &batch.label_mask)?
    } else {
        (g.constant(Tensor::scalar(0.0)), true)
    };

    let parts = LossParts {
        bce,
        itc,
        tnc,
        pta: pta.loss,
    };
    let (total, losses) = total_loss(g, parts, cfg.alpha)?;
    Ok(BatchLoss {
        total,
        losses,
        pta_skipped: pta.skipped,
        bce_skipped,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub tau: f64,
    pub pta_skipped: usize,
    pub bce_skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.losses.total).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl_atomic(path, &self.records)
    }
}

/// Seeded per-epoch shuffles split into batches; a trailing batch with
/// fewer than 2 samples is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Batches per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    full + usize::from(n % batch_size >= 2)
}

/// Trains `model` in place. `on_step` sees every record as it is produced.
pub fn train(
    model: &mut Model,
    data: &PreparedDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot form a batch of at least 2",
            data.len()
        )));
    }
    let mut total_steps = per_epoch * cfg.epochs;
    if let Some(max) = cfg.max_steps {
        total_steps = total_steps.min(max);
    }
    let frozen = if cfg.freeze_text { model.text_param_ids() } else { Vec::new() };
    let mut state = OptimizerState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            if step >= total_steps {
                break 'epochs;
            }
            let started = Instant::now();
            let fwd = batch_forward(model, data, &batch, cfg)?;
            if !fwd.losses.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads: Grads = fwd.graph.backward(fwd.total).into_param_grads();
            for id in &frozen {
                grads.remove(*id);
            }
            let grad_norm = if cfg.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.grad_clip)
            } else {
                grads.global_norm()
            };
            let lr = lr_at(step, total_steps, cfg);
            optimizer_step(&mut model.params, &grads, &mut state, lr)?;
            model.project_tau();
            let record = StepRecord {
                step,
                epoch,
                lr,
                losses: fwd.losses,
                grad_norm,
                tau: model.tau_value(),
                pta_skipped: fwd.pta_skipped,
                bce_skipped: fwd.bce_skipped,
                elapsed_ms: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64() * 1e3),
            };
            on_step(&record);
            log.records.push(record);
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffles_are_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let batches = epoch_batches(10, 4, &mut rng);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
            assert_eq!(batches.len(), steps_per_epoch(10, 4));
        }
        let batches = epoch_batches(9, 4, &mut rng);
        assert_eq!(batches.len(), 2);
        assert_eq!(steps_per_epoch(9, 4), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
