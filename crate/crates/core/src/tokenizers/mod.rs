//! Toy image tokenizers: k-means codebooks standing in for the semantic and
//! pixel encoders, plus the unified vocabulary and the image block grammar.

mod block;
mod codebook;
mod image;
mod vocab;

pub use block::{
    assemble_image_block, overhead_ratio, parse_image_block, validate_sequence, BlockSpec, ImageTokenBlock,
};
pub use codebook::{train_codebook, Codebook, KMeansFit};
pub use image::{
    decode_pixel, encode_pixel, encode_semantic, extract_patches, semantic_features, ImageGeometry,
    ImageTokenizer, SemanticProjection, ToyImage, TokenizerConfig, ATTR_PROJ, CHANNELS, POOLED,
};
pub use vocab::{Special, TokenId, VocabClass, VocabLayout};
