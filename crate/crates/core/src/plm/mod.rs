//! Toy masked language model: tokenizer, encoder, decoder head and checkpoints.

pub mod checkpoint;
pub mod encoder;
pub mod pretrain;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use encoder::{EncoderConfig, MaskedLm};
pub use pretrain::{mask_tokens, pretrain_mlm, MaskedSequence, PretrainConfig, PretrainReport};
pub use vocab::Vocab;

#[cfg(test)]
mod tests;
