//! Full parameter set: both encoders, the KRM, the two alignment heads, the
//! entity classification head and the ITC temperature.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT};

use crate::encoders::{
    tokenize, ImageEncoder, ImageEncoderConfig, ImageEncoding, Mlp, TextEncoder,
    TextEncoderConfig, TextEncoding, Vocab,
};
use crate::error::{Error, Result};
use crate::fusion::{Krm, KrmConfig, KrmOutput};
use crate::knowledge::EntitySet;
use crate::numerics::{Graph, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub krm: KrmConfig,
    pub init_std: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            krm: KrmConfig::default(),
            init_std: 0.02,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        self.krm.validate()?;
        if self.image.d != self.text.d || self.krm.d != self.image.d {
            return Err(Error::InvalidArgument(format!(
                "widths differ: image {}, text {}, KRM {}",
                self.image.d, self.text.d, self.krm.d
            )));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < tau_min <= tau_init <= tau_max, got {} / {} / {}",
                self.tau_min, self.tau_init, self.tau_max
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::InvalidArgument("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.image.d
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub krm: Krm,
    /// Alignment head on the report path.
    pub tnc_head: Linear,
    /// Alignment head on the description path.
    pub pta_head: Linear,
    /// `d -> d -> 1` head shared by weak supervision and zero-shot inference.
    pub cls_head: Mlp,
    /// ITC temperature, `1 x 1`.
    pub tau: ParamId,
    pub vocab: Vocab,
    pub entities: EntitySet,
}

impl Model {
    /// Random initialization. The text vocabulary size is taken from `vocab`.
    pub fn new(mut config: ModelConfig, vocab: Vocab, entities: EntitySet, seed: u64) -> Result<Self> {
        config.text.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let d = config.d();
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(&mut params, config.image, &mut rng, std)?;
        let text = TextEncoder::new(&mut params, config.text, &mut rng, std)?;
        let krm = Krm::new(&mut params, "krm", config.krm, &mut rng, std)?;
        let tnc_head = Linear::new(&mut params, "tnc_head", d, 1, &mut rng, std);
        let pta_head = Linear::new(&mut params, "pta_head", d, 1, &mut rng, std);
        let cls_head = Mlp::new(&mut params, "cls_head", d, d, 1, &mut rng, std);
        let tau = params.add("tau", Tensor::scalar(config.tau_init));
        Ok(Self {
            config,
            params,
            image,
            text,
            krm,
            tnc_head,
            pta_head,
            cls_head,
            tau,
            vocab,
            entities,
        })
    }

    pub fn max_len(&self) -> usize {
        self.config.text.max_len
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.config.image.grid();
        (g, g)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        tokenize(text, &self.vocab, self.max_len())
    }

    pub fn encode_image(&self, g: &mut Graph, image: &Tensor) -> Result<ImageEncoding> {
        self.image.forward(g, &self.params, image)
    }

    pub fn encode_text(&self, g: &mut Graph, ids: &[usize]) -> Result<TextEncoding> {
        self.text.forward(g, &self.params, ids)
    }

    /// Entity query refined against image patches: the query's non-PAD rows
    /// attend over `v`, are mean-pooled and mapped to one logit.
    pub fn entity_logit(&self, g: &mut Graph, query: &TextEncoding, v: Var) -> (Var, KrmOutput) {
        let n = content_len_mask(&query.keep);
        let q = g.slice_rows(query.t, 0, n);
        let out = self.krm.attend(g, &self.params, q, v, None);
        let pooled = g.mean_rows(out.out);
        let logit = self.cls_head.forward(g, &self.params, pooled);
        (logit, out)
    }

    pub fn tau_value(&self) -> f64 {
        self.params.get(self.tau).item()
    }

    /// Clamps the temperature into `[tau_min, tau_max]`.
    pub fn project_tau(&mut self) {
        let (lo, hi) = (self.config.tau_min, self.config.tau_max);
        let t = self.params.get_mut(self.tau);
        let v = t.data()[0].clamp(lo, hi);
        t.data_mut()[0] = v;
    }

    /// Parameter ids belonging to the text encoder.
    pub fn text_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.starts_with("text."))
            .map(|(id, _, _)| id)
            .collect()
    }
}

fn content_len_mask(keep: &[bool]) -> usize {
    keep.iter().position(|k| !k).unwrap_or(keep.len())
}
