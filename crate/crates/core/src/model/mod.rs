//! A small decoder-only transformer: character vocabulary, parameters,
//! forward pass with exposed attention, and seeded sampling.

mod params;
mod sampling;
mod transformer;
mod vocab;

use thiserror::Error;

pub use params::{
    init_model, BoundLayer, BoundModel, LayerParams, ModelConfig, ModelParams, ParamRef,
    Parameters, INIT_STD,
};
pub use sampling::{
    derive_seed, nucleus, sample_response, sample_token, tempered_probs, SamplingConfig, GREEDY_TEMPERATURE,
};
pub use transformer::{
    continuation_log_probs, forward, forward_on_tape, log_probs, AttentionMap, ForwardVars,
};
pub use vocab::{TokenId, Vocab, VocabError, PAD, UNK};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} positions exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("soft prompt has {got} components, expected {expected}")]
    PromptShape { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}
