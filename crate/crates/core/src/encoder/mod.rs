//! Tokenization, prompt templates, and the masked sequence encoder.

mod model;
mod prompt;
mod vocab;

pub use model::{extract_mask_states, EncodedBatch, Encoder, EncoderConfig};
pub use prompt::{build_context_prompt, build_knowledge_prompt, ordinal, template_words, MaskKind, PromptedInput};
pub use vocab::{split_words, tokenize, TokenId, Vocab, Word, CLS, MASK, NO_LABEL, PAD, UNK};
