//! Offline phrase-lexicon scorer.
//!
//! Matching is case- and punctuation-insensitive over word tokens, longest
//! phrase first, left to right, without overlaps. Each category's score is
//! the noisy-or of the weights of every matched occurrence:
//! `1 - prod(1 - w_i)`.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

use super::{CategoryScores, FlaggedSpan, ScoredText, Scorer, ToxError, ToxicityCategory};

/// The English lexicon shipped with the crate (`lexicon/en.tsv`).
pub const BUNDLED_LEXICON: &str = include_str!("../../lexicon/en.tsv");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read lexicon {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: phrase {phrase:?} is already defined")]
    DuplicatePhrase { line: usize, phrase: String },
    #[error("line {line}: weight {weight} is outside (0, 1]")]
    WeightOutOfRange { line: usize, weight: f64 },
}

/// A word token: byte range in the source text plus its normalized form
/// (lowercase, apostrophes removed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub norm: String,
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits text into runs of alphanumeric characters. An apostrophe between
/// two alphanumerics stays inside the word ("you're" is one token, `youre`).
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut current: Option<Token> = None;
    while let Some((i, c)) = chars.next() {
        if c.is_alphanumeric() {
            let tok = current.get_or_insert_with(|| Token {
                start: i,
                end: i,
                norm: String::new(),
            });
            tok.norm.extend(c.to_lowercase());
            tok.end = i + c.len_utf8();
        } else if is_apostrophe(c)
            && current.is_some()
            && chars.peek().is_some_and(|(_, next)| next.is_alphanumeric())
        {
            // Interior apostrophe: keep the token open, drop the character.
        } else if let Some(tok) = current.take() {
            tokens.push(tok);
        }
    }
    tokens.extend(current);
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconEntry {
    pub phrase: String,
    pub tokens: Vec<String>,
    pub weights: Vec<(ToxicityCategory, f64)>,
}

impl LexiconEntry {
    /// Category reported on spans: the heaviest weight, earliest category on ties.
    fn primary_category(&self) -> ToxicityCategory {
        let mut best = self.weights[0];
        for &(c, w) in &self.weights[1..] {
            if w > best.1 || (w == best.1 && c < best.0) {
                best = (c, w);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    id: String,
    entries: Vec<LexiconEntry>,
    /// First token -> entry indices, longest phrase first.
    by_first: HashMap<String, Vec<usize>>,
}

impl Lexicon {
    pub fn parse(source: &str) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        for (idx, raw) in source.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (phrase, spec) = raw.split_once('\t').ok_or_else(|| LexiconError::Parse {
                line,
                message: "expected `phrase<TAB>CATEGORY:weight[,...]`".into(),
            })?;
            let phrase = phrase.trim();
            let tokens: Vec<String> = tokenize(phrase).into_iter().map(|t| t.norm).collect();
            if tokens.is_empty() {
                return Err(LexiconError::Parse {
                    line,
                    message: "phrase has no word characters".into(),
                });
            }

            let mut weights: Vec<(ToxicityCategory, f64)> = Vec::new();
            for part in spec.split(',') {
                let (cat, w) = part.trim().split_once(':').ok_or_else(|| LexiconError::Parse {
                    line,
                    message: format!("expected CATEGORY:weight, got {:?}", part.trim()),
                })?;
                let category: ToxicityCategory = cat.trim().parse().map_err(|message| LexiconError::Parse { line, message })?;
                let weight: f64 = w.trim().parse().map_err(|_| LexiconError::Parse {
                    line,
                    message: format!("weight {:?} is not a number", w.trim()),
                })?;
                if !(weight > 0.0 && weight <= 1.0) {
                    return Err(LexiconError::WeightOutOfRange { line, weight });
                }
                if weights.iter().any(|(c, _)| *c == category) {
                    return Err(LexiconError::Parse {
                        line,
                        message: format!("category {category} listed twice"),
                    });
                }
                weights.push((category, weight));
            }

            if !seen.insert(tokens.clone()) {
                return Err(LexiconError::DuplicatePhrase {
                    line,
                    phrase: phrase.to_string(),
                });
            }
            entries.push(LexiconEntry {
                phrase: phrase.to_string(),
                tokens,
                weights,
            });
        }

        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_first.entry(e.tokens[0].clone()).or_default().push(i);
        }
        for list in by_first.values_mut() {
            list.sort_by(|a, b| entries[*b].tokens.len().cmp(&entries[*a].tokens.len()));
        }
        Ok(Self {
            id: "lexicon".to_string(),
            entries,
            by_first,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path).map_err(|e| LexiconError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&source)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    /// Non-overlapping matches as `(entry index, first token, token count)`.
    fn matches(&self, tokens: &[Token]) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.by_first.get(&tokens[i].norm).and_then(|candidates| {
                candidates.iter().copied().find(|&e| {
                    let want = &self.entries[e].tokens;
                    i + want.len() <= tokens.len()
                        && want.iter().zip(&tokens[i..]).all(|(w, t)| *w == t.norm)
                })
            });
            match hit {
                Some(e) => {
                    let n = self.entries[e].tokens.len();
                    out.push((e, i, n));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }

    pub fn score_text(&self, text: &str) -> ScoredText {
        let tokens = tokenize(text);
        let mut survive = [1.0f64; 6];
        let mut spans = Vec::new();
        for (e, first, n) in self.matches(&tokens) {
            let entry = &self.entries[e];
            for &(c, w) in &entry.weights {
                survive[c as usize] *= 1.0 - w;
            }
            let start = tokens[first].start;
            let end = tokens[first + n - 1].end;
            spans.push(FlaggedSpan {
                start,
                length: end - start,
                category: entry.primary_category(),
                matched: text[start..end].to_string(),
            });
        }
        let mut scores = CategoryScores::zero();
        for c in ToxicityCategory::ALL {
            let s = (1.0 - survive[c as usize]).clamp(0.0, 1.0);
            scores.set(c, s).expect("noisy-or stays in [0, 1]");
        }
        ScoredText { scores, spans }
    }
}

impl Scorer for Lexicon {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, text: &str) -> Result<ScoredText, ToxError> {
        Ok(self.score_text(text))
    }
}
