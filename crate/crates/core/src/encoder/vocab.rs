use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";
pub const NO_LABEL: &str = "[NO_LABEL]";

const RESERVED: [&str; 5] = [PAD, UNK, CLS, MASK, NO_LABEL];

/// Token <-> id bijection with reserved special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub mask: TokenId,
    pub no_label: TokenId,
}

impl Vocab {
    /// One token per entry; position is the id.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate vocab token `{t}`"),
                });
            }
        }
        let find = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("vocab lacks reserved token {name}")))
        };
        Ok(Self {
            pad: find(PAD)?,
            unk: find(UNK)?,
            cls: find(CLS)?,
            mask: find(MASK)?,
            no_label: find(NO_LABEL)?,
            tokens,
            ids,
        })
    }

    /// Parses the vocab file format: one token per line.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// Reserved tokens, then prompt-template words for `depth` levels, then
    /// every token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, depth: usize) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut push = |t: String, tokens: &mut Vec<String>| {
            if seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        for t in super::prompt::template_words(depth) {
            push(t, &mut tokens);
        }
        let corpus: BTreeSet<String> = texts.into_iter().flat_map(|t| split_words(t).into_iter().map(|w| w.text)).collect();
        for t in corpus {
            push(t, &mut tokens);
        }
        Self::from_tokens(tokens).expect("reserved tokens are always present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(self.unk)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        [self.pad, self.unk, self.cls, self.mask, self.no_label].contains(&id)
    }
}

/// A case-folded word with its `[start, end)` character span in the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Whitespace split, with every punctuation character its own token.
/// Bracketed special tokens such as `[MASK]` stay whole.
pub fn split_words(text: &str) -> Vec<Word> {
    let chars: Vec<char> = text.chars().collect();
    let mut words = Vec::new();
    let mut i = 0;
    let mut start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, words: &mut Vec<Word>| {
        if let Some(s) = start.take() {
            let text: String = chars[s..end].iter().collect::<String>().to_lowercase();
            words.push(Word { text, start: s, end });
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '[' {
            if let Some(len) = special_at(&chars[i..]) {
                flush(&mut start, i, &mut words);
                let text: String = chars[i..i + len].iter().collect();
                words.push(Word { text, start: i, end: i + len });
                i += len;
                continue;
            }
        }
        if c.is_whitespace() {
            flush(&mut start, i, &mut words);
        } else if is_punct(c) {
            flush(&mut start, i, &mut words);
            words.push(Word {
                text: c.to_lowercase().collect(),
                start: i,
                end: i + 1,
            });
        } else if start.is_none() {
            start = Some(i);
        }
        i += 1;
    }
    flush(&mut start, chars.len(), &mut words);
    words
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '_' && c != '-'
}

fn special_at(chars: &[char]) -> Option<usize> {
    RESERVED.iter().find_map(|r| {
        let rc: Vec<char> = r.chars().collect();
        (chars.len() >= rc.len() && chars[..rc.len()] == rc[..]).then_some(rc.len())
    })
}

/// Case-folded word ids, unknown words mapped to `[UNK]`, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<TokenId> {
    split_words(text)
        .into_iter()
        .take(max_len)
        .map(|w| vocab.id(&w.text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        let mut t: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        t.extend(words.iter().map(|s| s.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab(&["a", "b", "."]);
        assert_eq!(tokenize("A b.", &v, 10), vec![v.id("a"), v.id("b"), v.id(".")]);
        assert_eq!(tokenize("zebra", &v, 10), vec![v.unk]);
        let long = vec!["a"; 100].join(" ");
        assert_eq!(tokenize(&long, &v, 10).len(), 10);
    }

    #[test]
    fn offsets_are_character_spans() {
        let w = split_words("Héllo, wörld");
        assert_eq!(w[0], Word { text: "héllo".into(), start: 0, end: 5 });
        assert_eq!(w[1].text, ",");
        assert_eq!((w[2].start, w[2].end), (7, 12));
    }

    #[test]
    fn layers_apostrophe_splits() {
        let w: Vec<String> = split_words("the first layers' knowledge is [MASK]").into_iter().map(|w| w.text).collect();
        assert_eq!(w, ["the", "first", "layers", "'", "knowledge", "is", "[MASK]"]);
    }

    #[test]
    fn reserved_tokens_required() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        assert!(Vocab::from_text("[PAD]\n[UNK]\n[CLS]\n[MASK]\n[NO_LABEL]\nx\nx").is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::build(["hello world", "foo"], 2);
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(v.get("second").is_some());
    }
}
