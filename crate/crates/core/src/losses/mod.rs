//! Training objectives: image-text contrast, tough-negative contrast,
//! patch-description alignment, masked BCE, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::encoders::{Aggregate, TextEncoding};
use crate::error::{Error, Result};
use crate::fusion::{alignment_score, Krm};
use crate::numerics::{cosine_similarity, Graph, Linear, ParamStore, Tensor, Var};

/// Encoder outputs for one sample.
#[derive(Debug, Clone)]
pub struct EncodedViews {
    /// `P x d` patch embeddings.
    pub v: Var,
    pub v_cls: Var,
    pub t_e: TextEncoding,
    pub t_d: Aggregate,
}

/// Everything the losses need for one batch.
#[derive(Debug, Clone)]
pub struct BatchViews {
    pub views: Vec<EncodedViews>,
    /// `B x M` targets, meaningful only where `label_mask` is set.
    pub labels: Vec<f64>,
    pub label_mask: Vec<bool>,
    /// Per sample: at least one description available.
    pub k_flags: Vec<bool>,
}

impl BatchViews {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    fn stacked(&self, g: &mut Graph, pick: impl Fn(&EncodedViews) -> Var) -> Var {
        let rows: Vec<Var> = self.views.iter().map(pick).collect();
        g.concat_rows(&rows)
    }

    /// `B x d` image CLS rows.
    pub fn v_cls(&self, g: &mut Graph) -> Var {
        self.stacked(g, |v| v.v_cls)
    }

    /// `B x d` report CLS rows.
    pub fn t_cls(&self, g: &mut Graph) -> Var {
        self.stacked(g, |v| v.t_e.t_cls)
    }
}

/// Image-to-text InfoNCE on CLS cosine similarity divided by `tau` (`1 x 1`).
/// With `symmetric`, the text-to-image term is averaged in.
pub fn itc_loss(g: &mut Graph, v_cls: Var, t_cls: Var, tau: Var, symmetric: bool) -> Result<Var> {
    let t = g.scalar(tau);
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let (b, d) = g.dims(v_cls);
    if b == 0 || g.dims(t_cls) != (b, d) {
        return Err(Error::Shape(format!(
            "ITC needs matching nonempty batches, got {:?} and {:?}",
            g.dims(v_cls),
            g.dims(t_cls)
        )));
    }
    for (name, x) in [("image CLS", v_cls), ("text CLS", t_cls)] {
        let val = g.value(x);
        if (0..b).any(|r| val.row(r).iter().all(|v| *v == 0.0)) {
            return Err(Error::ZeroNorm(name));
        }
    }
    let vn = g.l2_normalize_rows(v_cls);
    let tn = g.l2_normalize_rows(t_cls);
    let inv_tau = g.recip(tau);
    let targets: Vec<usize> = (0..b).collect();
    let sim = g.matmul_bt(vn, tn);
    let logits = g.mul_scalar(sim, inv_tau);
    let i2t = g.cross_entropy(logits, &targets);
    if !symmetric {
        return Ok(i2t);
    }
    let sim_t = g.matmul_bt(tn, vn);
    let logits_t = g.mul_scalar(sim_t, inv_tau);
    let t2i = g.cross_entropy(logits_t, &targets);
    let both = g.add(i2t, t2i);
    Ok(g.scale(both, 0.5))
}

/// Index `j != anchor` whose row is most cosine-similar to row `anchor`.
/// Ties go to the lowest index.
pub fn mine_hard_negative(anchor: usize, embeddings: &Tensor) -> Result<usize> {
    let b = embeddings.rows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("hard-negative mining needs B >= 2, got {b}")));
    }
    if anchor >= b {
        return Err(Error::InvalidArgument(format!("anchor {anchor} outside batch of {b}")));
    }
    let a = embeddings.row(anchor);
    let mut best: Option<(usize, f64)> = None;
    for j in (0..b).filter(|&j| j != anchor) {
        let s = cosine_similarity(a, embeddings.row(j))?;
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((j, s));
        }
    }
    Ok(best.expect("B >= 2").0)
}

/// Two-way cross-entropy with the positive in column 0, averaged over rows.
pub fn pairwise_contrast(g: &mut Graph, pos: &[Var], neg: &[Var]) -> Var {
    assert_eq!(pos.len(), neg.len());
    assert!(!pos.is_empty());
    let rows: Vec<Var> = pos
        .iter()
        .zip(neg)
        .map(|(p, n)| g.concat_cols(&[*p, *n]))
        .collect();
    let logits = g.concat_rows(&rows);
    g.cross_entropy(logits, &vec![0; pos.len()])
}

#[derive(Debug, Clone)]
pub struct TncOutput {
    pub loss: Var,
    /// Hard-negative report index per sample (image-to-text direction).
    pub text_negatives: Vec<usize>,
    /// Hard-negative image index per sample (text-to-image direction).
    pub image_negatives: Vec<usize>,
}

/// Tough-negative contrast in both directions. For sample `i` the positive
/// score is `s(KRM(v_i, t_e_i))`. The image-to-text negative swaps in the
/// report whose CLS is closest to `t_e_i`; the text-to-image negative swaps
/// in the image whose CLS is closest to `v_i`.
pub fn tnc_loss(g: &mut Graph, store: &ParamStore, krm: &Krm, head: &Linear, batch: &BatchViews) -> Result<TncOutput> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("TNC needs B >= 2, got {b}")));
    }
    let t_cls = batch.t_cls(g);
    let v_cls = batch.v_cls(g);
    let t_cls_val = g.value(t_cls).clone();
    let v_cls_val = g.value(v_cls).clone();
    let mut text_negatives = Vec::with_capacity(b);
    let mut image_negatives = Vec::with_capacity(b);
    for i in 0..b {
        text_negatives.push(mine_hard_negative(i, &t_cls_val)?);
        image_negatives.push(mine_hard_negative(i, &v_cls_val)?);
    }
    let score = |g: &mut Graph, img: usize, txt: usize| {
        let v = &batch.views[img];
        let t = &batch.views[txt].t_e;
        let out = krm.attend(g, store, v.v, t.t, Some(&t.keep));
        alignment_score(g, store, head, out.out)
    };
    let mut pos = Vec::with_capacity(2 * b);
    let mut neg = Vec::with_capacity(2 * b);
    let positives: Vec<Var> = (0..b).map(|i| score(g, i, i)).collect();
    for i in 0..b {
        pos.push(positives[i]);
        neg.push(score(g, i, text_negatives[i]));
    }
    for i in 0..b {
        pos.push(positives[i]);
        neg.push(score(g, image_negatives[i], i));
    }
    Ok(TncOutput {
        loss: pairwise_contrast(g, &pos, &neg),
        text_negatives,
        image_negatives,
    })
}

#[derive(Debug, Clone)]
pub struct PtaOutput {
    pub loss: Var,
    /// Samples excluded for having no descriptions.
    pub skipped: usize,
    /// Included sample indices, in order.
    pub included: Vec<usize>,
}

/// Softmax cross-entropy over an `n x n` score matrix with targets on the
/// diagonal. `scores[i][j]` are `1 x 1` nodes.
pub fn diagonal_contrast(g: &mut Graph, scores: &[Vec<Var>]) -> Var {
    let rows: Vec<Var> = scores.iter().map(|r| g.concat_cols(r)).collect();
    let logits = g.concat_rows(&rows);
    let targets: Vec<usize> = (0..scores.len()).collect();
    g.cross_entropy(logits, &targets)
}

/// Patch-description alignment: sample `i`'s enriched patches
/// `KRM(v_i, t_d_j)` are scored against every included aggregate `t_d_j`,
/// and the matched `j = i` is the target.
pub fn pta_loss(g: &mut Graph, store: &ParamStore, krm: &Krm, head: &Linear, batch: &BatchViews) -> PtaOutput {
    let included: Vec<usize> = (0..batch.len()).filter(|&i| batch.k_flags[i]).collect();
    let skipped = batch.len() - included.len();
    if included.is_empty() {
        return PtaOutput {
            loss: g.constant(Tensor::scalar(0.0)),
            skipped,
            included,
        };
    }
    let scores: Vec<Vec<Var>> = included
        .iter()
        .map(|&i| {
            included
                .iter()
                .map(|&j| {
                    let td = &batch.views[j].t_d;
                    let out = krm.attend(g, store, batch.views[i].v, td.t_d, Some(&td.keep));
                    alignment_score(g, store, head, out.out)
                })
                .collect()
        })
        .collect();
    PtaOutput {
        loss: diagonal_contrast(g, &scores),
        skipped,
        included,
    }
}

/// Mean BCE over unmasked entries; `(0, true)` when all are masked.
pub fn bce_loss(g: &mut Graph, logits: Var, labels: &[f64], mask: &[bool]) -> Result<(Var, bool)> {
    let n = g.value(logits).len();
    if labels.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "BCE over {n} logits with {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::InvalidArgument("BCE logits must be finite".into()));
    }
    let skipped = !mask.iter().any(|m| *m);
    Ok((g.bce_with_logits(logits, labels, mask), skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_itc: f64,
    pub l_tnc: f64,
    pub l_pta: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Graph nodes of the four parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub bce: Var,
    pub itc: Var,
    pub tnc: Var,
    pub pta: Var,
}

/// `bce + itc + tnc + alpha * pta`, as a node and as plain values.
pub fn total_loss(g: &mut Graph, parts: LossParts, alpha: f64) -> Result<(Var, LossBreakdown)> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    let a = g.add(parts.bce, parts.itc);
    let a = g.add(a, parts.tnc);
    let pta = g.scale(parts.pta, alpha);
    let total = g.add(a, pta);
    let breakdown = LossBreakdown {
        l_bce: g.scalar(parts.bce),
        l_itc: g.scalar(parts.itc),
        l_tnc: g.scalar(parts.tnc),
        l_pta: g.scalar(parts.pta),
        total: g.scalar(total),
        alpha,
    };
    Ok((total, breakdown))
}

impl LossBreakdown {
    /// Combines precomputed part values.
    pub fn from_parts(l_bce: f64, l_itc: f64, l_tnc: f64, l_pta: f64, alpha: f64) -> Self {
        Self {
            l_bce,
            l_itc,
            l_tnc,
            l_pta,
            total: l_bce + l_itc + l_tnc + alpha * l_pta,
            alpha,
        }
    }
}

#[cfg(test)]
mod tests;
