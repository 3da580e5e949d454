//! Patch-embedding transformer encoder with a class token and exposed
//! per-layer attention internals.

mod config;
mod forward;
mod io;
mod weights;

pub use config::{EncoderConfig, NormKind, WeightProfile};
pub use forward::{
    patchify, BlockModulators, BlockOutput, ForwardOutput, HeadQkv, HeadState, LayerState,
    ModulationPlan,
};
pub use io::{
    decode_weights, encode_weights, load_weights, named_tensors, read_header, save_weights, EmbeddingKind,
    TensorEntry, WeightHeader,
};
pub use weights::{
    EncoderParts, EncoderWeights, LayerWeights, PatchEmbedding, PixelSimilarityParams,
    PositionTable,
};
