//! Image and text encoders plus the weighted description aggregate.

pub mod aggregate;
pub mod image;
pub mod text;
pub mod tokenizer;
pub mod transformer;

pub use aggregate::{aggregate_descriptions, weighted_sum, Aggregate, DescriptionWeights};
pub use image::{patchify, ImageEncoder, ImageEncoderConfig, ImageEncoding};
pub use text::{TextEncoder, TextEncoderConfig, TextEncoding};
pub use tokenizer::{content_len, is_unknown_only, tokenize, Vocab, CLS, PAD, SEP, UNK};
pub use transformer::{multi_head_attention, Block, Mlp, SelfAttention};
