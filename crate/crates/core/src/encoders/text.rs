use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::PAD;
use super::transformer::Block;
use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, Graph, LayerNorm, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Token length `T`, including `[CLS]`.
    pub max_len: usize,
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 16,
            depth: 2,
            d: 32,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::InvalidArgument("text length T must be >= 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidArgument("vocabulary needs the 4 reserved tokens".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// `t` is `T x d`; `t_cls` is row 0; `keep` marks non-PAD positions.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub t: Var,
    pub t_cls: Var,
    pub keep: Vec<bool>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TextEncoderConfig, rng: &mut R, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let token_embed = store.add("text.token_embed", truncated_normal(rng, &[config.vocab_size, d], std));
        let pos = store.add("text.pos", truncated_normal(rng, &[config.max_len, d], std));
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("text.blocks.{i}"), d, config.heads, d * config.mlp_ratio, rng, std))
            .collect();
        let ln_f = LayerNorm::new(store, "text.ln_f", d);
        Ok(Self {
            config,
            token_embed,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Encodes exactly `T` token ids. PAD keys are masked out of attention.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<TextEncoding> {
        let t = self.config.max_len;
        if ids.len() != t {
            return Err(Error::Shape(format!("expected {t} tokens, got {}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let keep: Vec<bool> = ids.iter().enumerate().map(|(i, &id)| i == 0 || id != PAD).collect();
        let table = g.param(store, self.token_embed);
        let x = g.embedding(table, ids);
        let pos = g.param(store, self.pos);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, store, x, Some(&keep));
        }
        let x = self.ln_f.forward(g, store, x);
        Ok(TextEncoding {
            t_cls: g.slice_rows(x, 0, 1),
            t: x,
            keep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenizer::CLS;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: 10,
            max_len: 6,
            d: 8,
            heads: 2,
            ..Default::default()
        };
        let enc = TextEncoder::new(&mut store, cfg, &mut rng, 0.5).unwrap();
        (store, enc)
    }

    fn encode(store: &ParamStore, enc: &TextEncoder, ids: &[usize]) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let e = enc.forward(&mut g, store, ids).unwrap();
        (g.value(e.t).clone(), g.value(e.t_cls).clone())
    }

    #[test]
    fn shape_contract() {
        let (store, enc) = encoder();
        let (t, cls) = encode(&store, &enc, &[CLS, 5, 6, PAD, PAD, PAD]);
        assert_eq!(t.shape(), [6, 8]);
        assert_eq!(cls.row(0), t.row(0));
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &store, &[CLS, 5]).is_err());
    }

    #[test]
    fn all_pad_body_depends_only_on_cls() {
        let (mut store, enc) = encoder();
        let ids = [CLS, PAD, PAD, PAD, PAD, PAD];
        let (_, before) = encode(&store, &enc, &ids);
        // perturb every embedding row except CLS; output must not move
        let table = store.get_mut(enc.token_embed);
        let d = 8;
        for (i, v) in table.data_mut().iter_mut().enumerate() {
            if i / d != CLS {
                *v += 1.0;
            }
        }
        let (_, after) = encode(&store, &enc, &ids);
        assert_eq!(before, after);
    }

    #[test]
    fn pad_rows_do_not_affect_content_rows() {
        let (mut store, enc) = encoder();
        let ids = [CLS, 4, 7, PAD, PAD, PAD];
        let (a, _) = encode(&store, &enc, &ids);
        let pos = store.get_mut(enc.pos);
        for v in &mut pos.data_mut()[3 * 8..] {
            *v = -*v + 0.3;
        }
        let (b, _) = encode(&store, &enc, &ids);
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
    }
}
