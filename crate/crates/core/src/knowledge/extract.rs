//! Rule-based entity extraction with presence classification.
//!
//! Matching is a case-insensitive, token-level lexicon scan. When candidate
//! matches overlap, the longer one wins (earlier start on equal length).
//! Presence comes from cue phrases in the up-to-five tokens before the match.
//! The cue window never crosses a sentence boundary or the previous entity
//! mention.

use serde::{Deserialize, Serialize};

use super::types::{Category, EntityMention, Presence};

pub const NEGATION_CUES: &[&str] = &["no", "without", "absent", "free of", "resolved"];
pub const HEDGE_CUES: &[&str] = &["possible", "may", "cannot exclude", "suspected", "questionable"];
pub const CUE_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub name: String,
    pub category: Category,
}

/// Entity vocabulary used by the extractor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    words: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = LexiconEntry>) -> Self {
        let mut lex = Lexicon::default();
        for e in entries {
            let name = e.name.to_lowercase();
            let words: Vec<String> = word_tokens(&name).into_iter().map(|t| t.text).collect();
            if words.is_empty() || lex.entries.iter().any(|x| x.name == name) {
                continue;
            }
            lex.entries.push(LexiconEntry {
                name,
                category: e.category,
            });
            lex.words.push(words);
        }
        lex
    }

    /// Every name tagged with the same category.
    pub fn uniform<S: AsRef<str>>(names: &[S], category: Category) -> Self {
        Self::new(names.iter().map(|n| LexiconEntry {
            name: n.as_ref().to_string(),
            category,
        }))
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn category(&self, name: &str) -> Option<Category> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.category)
    }
}

/// Anything that turns report text into entity mentions.
pub trait EntityExtractor {
    fn extract(&self, report: &str) -> Vec<EntityMention>;
}

impl EntityExtractor for Lexicon {
    fn extract(&self, report: &str) -> Vec<EntityMention> {
        extract_entities(report, self)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct WordToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub sentence: usize,
}

fn is_sentence_break(chars: &[char], i: usize) -> bool {
    match chars[i] {
        ';' | '!' | '?' | '\n' => true,
        '.' => {
            let digit_before = i > 0 && chars[i - 1].is_ascii_digit();
            let digit_after = chars.get(i + 1).is_some_and(|c| c.is_ascii_digit());
            !(digit_before && digit_after)
        }
        _ => false,
    }
}

/// Lowercase alphanumeric word tokens with character spans and sentence ids.
pub(crate) fn word_tokens(text: &str) -> Vec<WordToken> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut sentence = 0;
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect::<String>().to_lowercase();
            out.push(WordToken {
                text: word,
                start,
                end: i,
                sentence,
            });
        } else {
            if is_sentence_break(&chars, i) {
                sentence += 1;
            }
            i += 1;
        }
    }
    out
}

fn contains_phrase(window: &[WordToken], phrase: &[&str]) -> bool {
    if phrase.is_empty() || window.len() < phrase.len() {
        return false;
    }
    window
        .windows(phrase.len())
        .any(|w| w.iter().zip(phrase).all(|(t, p)| t.text == *p))
}

fn any_cue(window: &[WordToken], cues: &[&str]) -> bool {
    cues.iter().any(|cue| {
        let words: Vec<&str> = cue.split_whitespace().collect();
        contains_phrase(window, &words)
    })
}

fn classify_window(window: &[WordToken]) -> Presence {
    if any_cue(window, NEGATION_CUES) {
        Presence::DefinitelyAbsent
    } else if any_cue(window, HEDGE_CUES) {
        Presence::Uncertain
    } else {
        Presence::DefinitelyPresent
    }
}

/// Longest-match lexicon scan with cue-window presence classification.
pub fn extract_entities(report: &str, lexicon: &Lexicon) -> Vec<EntityMention> {
    let tokens = word_tokens(report);
    // (start token, length, entry)
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for start in 0..tokens.len() {
        for (e, words) in lexicon.words.iter().enumerate() {
            let end = start + words.len();
            if end > tokens.len() {
                continue;
            }
            let same_sentence = tokens[start].sentence == tokens[end - 1].sentence;
            if same_sentence && tokens[start..end].iter().zip(words).all(|(t, w)| t.text == *w) {
                candidates.push((start, words.len(), e));
            }
        }
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; tokens.len()];
    let mut chosen = Vec::new();
    for (start, len, e) in candidates {
        if taken[start..start + len].iter().any(|t| *t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        chosen.push((start, len, e));
    }
    chosen.sort_unstable();

    let mut mentions = Vec::with_capacity(chosen.len());
    let mut prev_end = 0;
    for (start, len, e) in chosen {
        let sentence = tokens[start].sentence;
        let mut lo = start.saturating_sub(CUE_WINDOW).max(prev_end);
        while lo < start && tokens[lo].sentence != sentence {
            lo += 1;
        }
        let presence = classify_window(&tokens[lo..start]);
        let entry = &lexicon.entries[e];
        mentions.push(EntityMention {
            name: entry.name.clone(),
            category: entry.category,
            presence,
            span: (tokens[start].start, tokens[start + len - 1].end),
        });
        prev_end = start + len;
    }
    mentions
}
