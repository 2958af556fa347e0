use serde::{Deserialize, Serialize};

use super::text::{TextEncoder, TextEncoding};
use super::tokenizer::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::knowledge::{DescriptionDoc, Presence};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// One scalar weight per description slot, initialized from presence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionWeights {
    pub w: Vec<f64>,
    pub presence_init: Vec<Presence>,
}

impl DescriptionWeights {
    pub fn from_presences(presences: &[Presence]) -> Self {
        Self {
            w: presences.iter().map(|p| p.initial_weight()).collect(),
            presence_init: presences.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Weights as a tracked `1 x k` graph leaf.
    pub fn leaf(&self, g: &mut Graph) -> Var {
        g.leaf(Tensor::row_vector(self.w.clone()))
    }
}

/// `t_d` (`T x d`) and `t_d_cls` (`1 x d`). `empty` is set when `k = 0`, in
/// which case both are zero constants.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub t_d: Var,
    pub t_d_cls: Var,
    /// Positions that are non-PAD in at least one description.
    pub keep: Vec<bool>,
    pub empty: bool,
}

/// `sum_i w_i * enc_i` over full sequences and over CLS rows. `w` is `1 x k`.
pub fn weighted_sum(g: &mut Graph, encodings: &[&TextEncoding], w: Option<Var>, t_len: usize, d: usize) -> Result<Aggregate> {
    let k = encodings.len();
    let Some(w) = w.filter(|_| k > 0) else {
        if k > 0 {
            return Err(Error::Shape(format!("{k} descriptions but no weights")));
        }
        return Ok(Aggregate {
            t_d: g.constant(Tensor::zeros(&[t_len, d])),
            t_d_cls: g.constant(Tensor::zeros(&[1, d])),
            keep: vec![true; t_len],
            empty: true,
        });
    };
    if g.dims(w) != (1, k) {
        return Err(Error::Shape(format!("{k} descriptions but weights {:?}", g.dims(w))));
    }
    let mut keep = vec![false; t_len];
    let mut t_d = None;
    let mut t_cls = None;
    for (i, enc) in encodings.iter().enumerate() {
        if g.dims(enc.t) != (t_len, d) {
            return Err(Error::Shape(format!(
                "description {i} encoded as {:?}, expected ({t_len}, {d})",
                g.dims(enc.t)
            )));
        }
        keep.iter_mut().zip(&enc.keep).for_each(|(a, b)| *a |= *b);
        let wi = g.element(w, i);
        let term = g.mul_scalar(enc.t, wi);
        let cls_term = g.mul_scalar(enc.t_cls, wi);
        t_d = Some(match t_d {
            None => term,
            Some(acc) => g.add(acc, term),
        });
        t_cls = Some(match t_cls {
            None => cls_term,
            Some(acc) => g.add(acc, cls_term),
        });
    }
    Ok(Aggregate {
        t_d: t_d.expect("k > 0"),
        t_d_cls: t_cls.expect("k > 0"),
        keep,
        empty: false,
    })
}

/// Encodes each description (definition and features joined by a space) at
/// length `T` and sums them with `weights`. Returns the aggregate and the
/// weight leaf, if any.
pub fn aggregate_descriptions(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &TextEncoder,
    vocab: &Vocab,
    docs: &[(DescriptionDoc, Presence)],
    weights: &DescriptionWeights,
) -> Result<(Aggregate, Option<Var>)> {
    if docs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} descriptions but {} weights",
            docs.len(),
            weights.len()
        )));
    }
    let cfg = encoder.config;
    let mut encs = Vec::with_capacity(docs.len());
    for (doc, _) in docs {
        let ids = tokenize(&doc.encoder_text(), vocab, cfg.max_len);
        encs.push(encoder.forward(g, store, &ids)?);
    }
    let w = (!weights.is_empty()).then(|| weights.leaf(g));
    let refs: Vec<&TextEncoding> = encs.iter().collect();
    Ok((weighted_sum(g, &refs, w, cfg.max_len, cfg.d)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::text::TextEncoderConfig;
    use crate::knowledge::DescriptionSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, TextEncoder, Vocab, DescriptionDoc) {
        let doc = DescriptionDoc {
            entity: "edema".into(),
            definition: "fluid in the lung".into(),
            radiographic_features: "hazy opacity".into(),
            source: DescriptionSource::Curated,
        };
        let vocab = Vocab::build(&[doc.encoder_text()]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: vocab.len(),
            max_len: 6,
            d: 8,
            heads: 2,
            ..Default::default()
        };
        let enc = TextEncoder::new(&mut store, cfg, &mut rng, 0.5).unwrap();
        (store, enc, vocab, doc)
    }

    #[test]
    fn weights_follow_presence() {
        let w = DescriptionWeights::from_presences(&[
            Presence::DefinitelyPresent,
            Presence::Uncertain,
            Presence::DefinitelyAbsent,
        ]);
        assert_eq!(w.w, vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn single_present_is_identity_and_uncertain_is_zero() {
        let (store, enc, vocab, doc) = setup();
        let mut g = Graph::new();
        let ids = tokenize(&doc.encoder_text(), &vocab, 6);
        let direct = enc.forward(&mut g, &store, &ids).unwrap();
        let docs = [(doc.clone(), Presence::DefinitelyPresent)];
        let w = DescriptionWeights::from_presences(&[Presence::DefinitelyPresent]);
        let (agg, _) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &w).unwrap();
        assert_eq!(g.value(agg.t_d), g.value(direct.t));
        assert_eq!(g.value(agg.t_d_cls), g.value(direct.t_cls));

        let w = DescriptionWeights::from_presences(&[Presence::Uncertain]);
        let (agg, _) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &w).unwrap();
        assert!(g.value(agg.t_d).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn present_and_absent_copies_cancel() {
        let (store, enc, vocab, doc) = setup();
        let mut g = Graph::new();
        let docs = [
            (doc.clone(), Presence::DefinitelyPresent),
            (doc, Presence::DefinitelyAbsent),
        ];
        let w = DescriptionWeights::from_presences(&[Presence::DefinitelyPresent, Presence::DefinitelyAbsent]);
        let (agg, _) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &w).unwrap();
        assert!(g.value(agg.t_d).data().iter().all(|v| *v == 0.0));
        assert!(g.value(agg.t_d_cls).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_in_weights_and_checks_lengths() {
        let (store, enc, vocab, doc) = setup();
        let mut g = Graph::new();
        let docs = [(doc.clone(), Presence::DefinitelyPresent), (doc, Presence::Uncertain)];
        let mut w = DescriptionWeights {
            w: vec![0.3, -1.7],
            presence_init: vec![Presence::DefinitelyPresent, Presence::Uncertain],
        };
        let (a, _) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &w).unwrap();
        w.w.iter_mut().for_each(|x| *x *= 2.0);
        let (b, _) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &w).unwrap();
        for (x, y) in g.value(a.t_d).data().iter().zip(g.value(b.t_d).data()) {
            assert_eq!(2.0 * x, *y);
        }
        let short = DescriptionWeights::from_presences(&[Presence::Uncertain]);
        assert!(aggregate_descriptions(&mut g, &store, &enc, &vocab, &docs, &short).is_err());
    }

    #[test]
    fn empty_set_is_flagged_zero() {
        let (store, enc, vocab, _) = setup();
        let mut g = Graph::new();
        let (agg, w) = aggregate_descriptions(&mut g, &store, &enc, &vocab, &[], &DescriptionWeights::from_presences(&[])).unwrap();
        assert!(agg.empty && w.is_none());
        assert_eq!(g.value(agg.t_d).shape(), [6, 8]);
    }
}
