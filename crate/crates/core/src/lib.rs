//! Three-stage classical Chinese quatrain generation.
//!
//! Stage 1 grows a first line around a theme phrase with a pair of
//! backward/forward GRU language models. Stage 2 picks a title from the
//! theme taxonomy with an LDA topic model. Stage 3 generates the
//! remaining lines with a hierarchy-attention seq2seq model whose
//! decoder attends over character, phrase and sentence features of the
//! lines written so far, followed by perplexity/relevance reranking of
//! beam candidates. An evaluation harness scores generated poems with a
//! theme-conditioned BLEU-2 and a tone/rhyme RHYTHM score.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod eval;
pub mod hieas2s;
pub mod lm;
pub mod numkernel;
pub mod prosody;
pub mod synth;
pub mod topics;

pub use error::{Error, Result};

/// Finite-difference gradient check for any registered layer, kernel or
/// model level. Returns the max relative error.
pub fn grad_check(layer: &str, seed: u64) -> Result<f64> {
    match numkernel::gradcheck::check_layer(layer, seed) {
        Err(Error::UnknownLayer(_)) => hieas2s::gradcheck::check_layer(layer, seed),
        other => other,
    }
}

/// Every layer name accepted by [`grad_check`].
pub fn grad_check_layers() -> Vec<&'static str> {
    let mut names = numkernel::gradcheck::KERNEL_LAYERS.to_vec();
    names.extend(hieas2s::gradcheck::MODEL_LAYERS);
    names
}
