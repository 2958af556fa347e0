use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

enum Piece<'a> {
    Sep,
    Word(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.len() >= 5 && rest[..5].eq_ignore_ascii_case("[sep]") {
            out.push(Piece::Sep);
            rest = &rest[5..];
        } else if c.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map_or(rest.len(), |(i, _)| i);
            out.push(Piece::Word(&rest[..end]));
            rest = &rest[end..];
        } else {
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

impl Vocab {
    /// Reserved tokens followed by every word in `texts`, sorted.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let words: BTreeSet<String> = texts
            .iter()
            .flat_map(|t| {
                pieces(t.as_ref())
                    .into_iter()
                    .filter_map(|p| match p {
                        Piece::Word(w) => Some(w.to_lowercase()),
                        Piece::Sep => None,
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())))
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// `[CLS]` followed by at most `max_len - 1` word ids, padded with `[PAD]`
/// to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must leave room for CLS and one token");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for p in pieces(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(match p {
            Piece::Sep => SEP,
            Piece::Word(w) => vocab.id(&w.to_lowercase()),
        });
    }
    ids.resize(max_len, PAD);
    ids
}

/// Number of leading non-PAD ids.
pub fn content_len(ids: &[usize]) -> usize {
    ids.iter().position(|&t| t == PAD).unwrap_or(ids.len())
}

/// True when no token after `[CLS]` is a known word or `[SEP]`.
pub fn is_unknown_only(ids: &[usize]) -> bool {
    ids.iter().skip(1).all(|&t| t == UNK || t == PAD)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(&["edema present [SEP] effusion absent"])
    }

    #[test]
    fn forced_examples() {
        let v = vocab();
        let ids = tokenize("edema present", &v, 6);
        assert_eq!(ids, vec![CLS, v.id("edema"), v.id("present"), PAD, PAD, PAD]);
        assert_eq!(tokenize("", &v, 4), vec![CLS, PAD, PAD, PAD]);
        let long = vec!["edema"; 16].join(" ");
        assert_eq!(tokenize(&long, &v, 6).len(), 6);
        assert!(tokenize(&long, &v, 6).iter().all(|&t| t != PAD));
    }

    #[test]
    fn sep_is_one_token_and_unknowns_map_to_unk() {
        let v = vocab();
        let ids = tokenize("Edema [SEP] pneumothorax", &v, 5);
        assert_eq!(ids, vec![CLS, v.id("edema"), SEP, UNK, PAD]);
        assert!(is_unknown_only(&tokenize("zzz qqq", &v, 4)));
        assert!(!is_unknown_only(&ids));
        assert_eq!(content_len(&ids), 4);
    }

    #[test]
    fn vocab_is_sorted_and_serializes_as_list() {
        let v = vocab();
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from));
        assert_eq!(v.tokens()[4], "absent");
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
