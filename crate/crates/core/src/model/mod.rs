//! Tiny transformer encoder-decoder, optional bottleneck adapters, and decoding.

mod config;
mod decode;
mod sidecar;
mod transformer;

pub use config::{AdapterConfig, ModelConfig, ParamGroup, ParamGroupTag, Side};
pub use decode::{beam_search, length_normalizer, translate, translate_batch, DecodeOptions, Hypothesis};
pub use sidecar::{load_model, save_model};
pub use transformer::{
    attach_adapters, batch_graph, has_adapters, init_params, nll_loss, parameter_count, transformer_forward,
    BatchGraph, GraphOptions, Pair, EMBEDDING, OUTPUT_BIAS,
};
