use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::Block;
use crate::error::{Error, Result};
use crate::numerics::{truncated_normal, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            d: 32,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Splits an `H x W` image into `P` flattened patches (`P x patch²`), patches
/// in row-major grid order, pixels row-major within a patch.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = (image.rows(), image.cols());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible into {patch}px patches")));
    }
    let (gr, gc) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for pr in 0..gr {
        for pc in 0..gc {
            for r in 0..patch {
                let row = image.row(pr * patch + r);
                data.extend_from_slice(&row[pc * patch..(pc + 1) * patch]);
            }
        }
    }
    Ok(Tensor::matrix(gr * gc, patch * patch, data))
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// Encoder output nodes: `v` is `P x d`, `v_cls` is `1 x d`.
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoding {
    pub v: Var,
    pub v_cls: Var,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ImageEncoderConfig, rng: &mut R, std: f64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let p2 = config.patch_size * config.patch_size;
        let patch_embed = Linear::new(store, "image.patch_embed", p2, d, rng, std);
        let cls = store.add("image.cls", truncated_normal(rng, &[1, d], std));
        let pos = store.add("image.pos", truncated_normal(rng, &[config.num_patches() + 1, d], std));
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("image.blocks.{i}"), d, config.heads, d * config.mlp_ratio, rng, std))
            .collect();
        let ln_f = LayerNorm::new(store, "image.ln_f", d);
        Ok(Self {
            config,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<ImageEncoding> {
        let s = self.config.image_size;
        if image.shape() != [s, s] {
            return Err(Error::Shape(format!("expected {s}x{s} image, got {:?}", image.shape())));
        }
        let patches = g.constant(patchify(image, self.config.patch_size)?);
        let tokens = self.patch_embed.forward(g, store, patches);
        let cls = g.param(store, self.cls);
        let x = g.concat_rows(&[cls, tokens]);
        let pos = g.param(store, self.pos);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, store, x, None);
        }
        let x = self.ln_f.forward(g, store, x);
        let p = self.config.num_patches();
        Ok(ImageEncoding {
            v_cls: g.slice_rows(x, 0, 1),
            v: g.slice_rows(x, 1, p),
        })
    }
}
