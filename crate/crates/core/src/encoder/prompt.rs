use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::{split_words, TokenId, Vocab, CLS, MASK};
use crate::error::{Error, Result};

/// Which recorded `[MASK]` slots to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Knowledge,
    Positive,
    Negative,
}

/// Prompt template followed by document tokens, with every slot position recorded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptedInput {
    pub tokens: Vec<TokenId>,
    pub knowledge_mask_pos: Vec<usize>,
    pub pos_mask_pos: Vec<usize>,
    pub neg_mask_pos: Vec<usize>,
    pub text_span: Range<usize>,
    pub entity_positions: Vec<usize>,
}

impl PromptedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_positions(&self, which: MaskKind) -> &[usize] {
        match which {
            MaskKind::Knowledge => &self.knowledge_mask_pos,
            MaskKind::Positive => &self.pos_mask_pos,
            MaskKind::Negative => &self.neg_mask_pos,
        }
    }

    /// Plain `[CLS] + tokens` input, used for verbalizer init and MLM.
    pub fn plain(doc_tokens: &[TokenId], vocab: &Vocab, max_len: usize) -> Self {
        let keep = doc_tokens.len().min(max_len.saturating_sub(1));
        let mut tokens = Vec::with_capacity(keep + 1);
        tokens.push(vocab.cls);
        tokens.extend_from_slice(&doc_tokens[..keep]);
        Self {
            text_span: 1..tokens.len(),
            tokens,
            knowledge_mask_pos: Vec::new(),
            pos_mask_pos: Vec::new(),
            neg_mask_pos: Vec::new(),
            entity_positions: Vec::new(),
        }
    }

    /// Records entity injection positions given document-relative token indices.
    /// Indices that were truncated away are dropped.
    pub fn with_entity_tokens(mut self, doc_positions: impl IntoIterator<Item = usize>) -> Self {
        let start = self.text_span.start;
        let len = self.text_span.len();
        self.entity_positions = doc_positions.into_iter().filter(|&p| p < len).map(|p| p + start).collect();
        self
    }
}

/// "first", "second", ... ; beyond ten, "11th" etc.
pub fn ordinal(level: usize) -> String {
    const WORDS: [&str; 10] = [
        "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    ];
    match level {
        1..=10 => WORDS[level - 1].to_string(),
        n => format!("{n}th"),
    }
}

fn knowledge_sentence(level: usize) -> String {
    format!("the {} layers' knowledge is {MASK}", ordinal(level))
}

fn context_sentence(level: usize) -> String {
    format!("the {} layer is {MASK} rather than {MASK}", ordinal(level))
}

/// Words the templates need for `depth` levels.
pub fn template_words(depth: usize) -> Vec<String> {
    let mut out = Vec::new();
    for l in 1..=depth.max(1) {
        for s in [knowledge_sentence(l), context_sentence(l)] {
            for w in split_words(&s) {
                if !out.contains(&w.text) {
                    out.push(w.text);
                }
            }
        }
    }
    out
}

fn assemble(
    sentences: impl Iterator<Item = String>,
    doc_tokens: &[TokenId],
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<TokenId>, Vec<usize>, Range<usize>)> {
    let mut tokens = vec![vocab.id(CLS)];
    let mut masks = Vec::new();
    for s in sentences {
        for w in split_words(&s) {
            if w.text == MASK {
                masks.push(tokens.len());
            }
            tokens.push(vocab.id(&w.text));
        }
    }
    if tokens.len() > max_len {
        return Err(Error::Invalid(format!(
            "prompt template needs {} tokens but max_len is {max_len}",
            tokens.len()
        )));
    }
    let keep = doc_tokens.len().min(max_len - tokens.len());
    let start = tokens.len();
    tokens.extend_from_slice(&doc_tokens[..keep]);
    Ok((tokens, masks, start..start + keep))
}

/// `[CLS] the {ordinal} layers' knowledge is [MASK]` for each level, then the
/// document. Only the document is truncated to fit `max_len`.
pub fn build_knowledge_prompt(doc_tokens: &[TokenId], depth: usize, vocab: &Vocab, max_len: usize) -> Result<PromptedInput> {
    if depth == 0 {
        return Err(Error::Invalid("depth must be >= 1".into()));
    }
    let (tokens, masks, text_span) = assemble((1..=depth).map(knowledge_sentence), doc_tokens, vocab, max_len)?;
    Ok(PromptedInput {
        tokens,
        knowledge_mask_pos: masks,
        pos_mask_pos: Vec::new(),
        neg_mask_pos: Vec::new(),
        text_span,
        entity_positions: Vec::new(),
    })
}

/// `[CLS] the {ordinal} layer is [MASK] rather than [MASK]` for each level,
/// then the document. The first mask of each pair is the positive slot.
pub fn build_context_prompt(doc_tokens: &[TokenId], depth: usize, vocab: &Vocab, max_len: usize) -> Result<PromptedInput> {
    if depth == 0 {
        return Err(Error::Invalid("depth must be >= 1".into()));
    }
    let (tokens, masks, text_span) = assemble((1..=depth).map(context_sentence), doc_tokens, vocab, max_len)?;
    let pos = masks.iter().step_by(2).copied().collect();
    let neg = masks.iter().skip(1).step_by(2).copied().collect();
    Ok(PromptedInput {
        tokens,
        knowledge_mask_pos: Vec::new(),
        pos_mask_pos: pos,
        neg_mask_pos: neg,
        text_span,
        entity_positions: Vec::new(),
    })
}
