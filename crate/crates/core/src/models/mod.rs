//! Query-based 1D image tokenizer with an L2-normalized vector quantizer,
//! and causal transformer priors over its token ids.

mod ar;
pub mod check;
mod loss;
mod sequence;
mod tokenizer;

pub use ar::{sample_row, ArConfig, ArModel, ArStep};
pub use loss::{reconstruction_loss, reconstruction_loss_graph, L1_WEIGHT, L2_WEIGHT};
pub use sequence::TokenSequence;
pub use tokenizer::{patchify, quantize, unpatchify, TokenizerConfig, TokenizerPass, TokenizerState, NORM_GUARD};

#[cfg(test)]
mod tests;
