//! Tokenization, the function-word dictionary, and token masks.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";

/// Shortlisted function words, de-duplicated ("to" is listed twice in the
/// source list).
pub const BUILTIN_FUNCTION_WORDS: &[&str] = &[
    "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "do", "does",
    "did", "will", "would", "shall", "should", "may", "might", "must", "can", "could", "ought",
    "dare", "need", "used", "to", "a", "an", "the", "and", "but", "if", "or", "because", "as",
    "until", "while", "of", "at", "by", "for", "with", "about", "against", "between", "into",
    "through", "during", "before", "after", "above", "below", "from", "in", "out", "on", "off",
    "over", "under", "again", "further", "then", "once", "here", "there", "when", "where", "why",
    "how", "all", "any", "both", "each", "few", "more", "most", "other", "some", "such", "no",
    "nor", "not", "only", "own", "same", "so", "than", "too", "very",
];

/// Part-of-speech classes carried by each token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WordClass {
    Noun,
    Adj,
    Verb,
    Func,
    Punct,
    Other,
}

impl WordClass {
    pub fn as_str(self) -> &'static str {
        match self {
            WordClass::Noun => "NOUN",
            WordClass::Adj => "ADJ",
            WordClass::Verb => "VERB",
            WordClass::Func => "FUNC",
            WordClass::Punct => "PUNCT",
            WordClass::Other => "OTHER",
        }
    }
}

impl fmt::Display for WordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WordClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "NOUN" => WordClass::Noun,
            "ADJ" => WordClass::Adj,
            "VERB" => WordClass::Verb,
            "FUNC" => WordClass::Func,
            "PUNCT" => WordClass::Punct,
            "OTHER" => WordClass::Other,
            _ => return Err(Error::UnknownClass(s.to_string())),
        })
    }
}

/// Classes accepted by [`remove_by_class`]; `Content` is noun ∪ adj ∪ verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RemovalClass {
    Noun,
    Adj,
    Verb,
    Func,
    Content,
}

impl RemovalClass {
    pub fn matches(self, class: WordClass) -> bool {
        match self {
            RemovalClass::Noun => class == WordClass::Noun,
            RemovalClass::Adj => class == WordClass::Adj,
            RemovalClass::Verb => class == WordClass::Verb,
            RemovalClass::Func => class == WordClass::Func,
            RemovalClass::Content => {
                matches!(class, WordClass::Noun | WordClass::Adj | WordClass::Verb)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RemovalClass::Noun => "NOUN",
            RemovalClass::Adj => "ADJ",
            RemovalClass::Verb => "VERB",
            RemovalClass::Func => "FUNC",
            RemovalClass::Content => "CONTENT",
        }
    }
}

impl FromStr for RemovalClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "NOUN" => RemovalClass::Noun,
            "ADJ" => RemovalClass::Adj,
            "VERB" => RemovalClass::Verb,
            "FUNC" => RemovalClass::Func,
            "CONTENT" => RemovalClass::Content,
            _ => return Err(Error::UnknownClass(s.to_string())),
        })
    }
}

/// Lowercase tokens with parallel POS tags, led by `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<String>,
    pos_tags: Vec<WordClass>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, pos_tags: Vec<WordClass>) -> Result<Self> {
        if tokens.len() != pos_tags.len() {
            return Err(Error::LengthMismatch {
                expected: tokens.len(),
                got: pos_tags.len(),
            });
        }
        if tokens.first().map(String::as_str) != Some(CLS) {
            return Err(Error::Format("token sequence must start with [CLS]".into()));
        }
        Ok(Self { tokens, pos_tags })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pos_tags(&self) -> &[WordClass] {
        &self.pos_tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens after `[CLS]`, space-joined.
    pub fn text(&self) -> String {
        self.tokens[1..].join(" ")
    }

    /// Replaces the POS tags, keeping the `[CLS]` tag at OTHER.
    pub fn with_tags(mut self, tags: Vec<WordClass>) -> Result<Self> {
        if tags.len() != self.tokens.len() {
            return Err(Error::LengthMismatch {
                expected: self.tokens.len(),
                got: tags.len(),
            });
        }
        self.pos_tags = tags;
        self.pos_tags[0] = WordClass::Other;
        Ok(self)
    }

    /// Keeps `[CLS]` and every token for which `keep(i)` holds.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> TokenSequence {
        let (tokens, pos_tags) = self
            .tokens
            .iter()
            .zip(&self.pos_tags)
            .enumerate()
            .filter(|(i, _)| *i == 0 || keep(*i))
            .map(|(_, (t, p))| (t.clone(), *p))
            .unzip();
        TokenSequence { tokens, pos_tags }
    }
}

/// Splits on whitespace, breaks ASCII punctuation into its own tokens,
/// lowercases, prepends `[CLS]`, and truncates to `max_len` tokens.
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let mut tokens = vec![CLS.to_string()];
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens.truncate(max_len.max(1));
    let tags = vec![WordClass::Other; tokens.len()];
    TokenSequence::new(tokens, tags)
}

/// Set of lowercase surface forms treated as function words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionWordDictionary {
    entries: BTreeSet<String>,
    source: String,
}

impl FunctionWordDictionary {
    pub fn builtin() -> Self {
        Self {
            entries: BUILTIN_FUNCTION_WORDS.iter().map(|s| s.to_string()).collect(),
            source: "builtin".into(),
        }
    }

    pub fn empty() -> Self {
        Self {
            entries: BTreeSet::new(),
            source: "empty".into(),
        }
    }

    pub fn from_words<I, S>(words: I, source: &str) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        Self {
            entries,
            source: source.into(),
        }
    }

    /// One token per line; lines starting with `#` are comments.
    pub fn parse(text: &str, source: &str) -> Self {
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
            source,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text, &path.display().to_string()))
    }

    /// Dictionary file text, one entry per line.
    pub fn to_file_text(&self) -> String {
        let mut out = format!("# function words ({})\n", self.source);
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains(token)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }
}

/// Per-token selection bits; position 0 (`[CLS]`) is always selected.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(mut bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::LengthMismatch {
                expected: 1,
                got: 0,
            });
        }
        bits[0] = true;
        Ok(Self { bits })
    }

    pub fn all(len: usize) -> Self {
        Self {
            bits: vec![true; len.max(1)],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Selected positions other than `[CLS]`.
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }
}

/// Selects `[CLS]` plus every token found in `dict`.
pub fn function_word_mask(seq: &TokenSequence, dict: &FunctionWordDictionary) -> TokenMask {
    let bits = seq
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| i == 0 || dict.contains(t))
        .collect();
    TokenMask { bits }
}

/// Deletes every token whose tag falls in `cls`; `[CLS]` is kept.
pub fn remove_by_class(seq: &TokenSequence, cls: RemovalClass) -> TokenSequence {
    seq.retain_indices(|i| !cls.matches(seq.pos_tags()[i]))
}

/// Deletes every dictionary token; `[CLS]` is kept.
pub fn remove_dictionary_words(seq: &TokenSequence, dict: &FunctionWordDictionary) -> TokenSequence {
    seq.retain_indices(|i| !dict.contains(&seq.tokens()[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveStrategy {
    /// similarity below mean − std
    SimDelta,
    /// similarity below mean − 2·std
    Sim2Delta,
    /// the N least similar tokens, N = dictionary hits in the sequence
    SimN,
}

impl FromStr for AdaptiveStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sim_delta" => Ok(Self::SimDelta),
            "sim_2delta" => Ok(Self::Sim2Delta),
            "sim_n" => Ok(Self::SimN),
            _ => Err(Error::parse(s, "expected sim_delta, sim_2delta or sim_n")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSelection {
    pub mask: TokenMask,
    /// Fraction of selected tokens that are dictionary words; 1 when
    /// nothing is selected.
    pub dictionary_fraction: f64,
}

/// Picks low-similarity tokens as de-attention targets. Statistics exclude
/// `[CLS]`; thresholds are strict so zero-variance input selects nothing.
pub fn select_adaptive(
    seq: &TokenSequence,
    sims: &[f64],
    strategy: AdaptiveStrategy,
    dict: &FunctionWordDictionary,
) -> Result<AdaptiveSelection> {
    if sims.len() != seq.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            got: sims.len(),
        });
    }
    let body = &sims[1..];
    let mut bits = vec![false; seq.len()];
    bits[0] = true;
    if !body.is_empty() {
        let n = body.len() as f64;
        let mean = body.iter().sum::<f64>() / n;
        let std = (body.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        match strategy {
            AdaptiveStrategy::SimDelta | AdaptiveStrategy::Sim2Delta => {
                let k = if strategy == AdaptiveStrategy::SimDelta { 1.0 } else { 2.0 };
                let threshold = mean - k * std;
                for (i, &s) in body.iter().enumerate() {
                    bits[i + 1] = s < threshold;
                }
            }
            AdaptiveStrategy::SimN => {
                let n_func = seq.tokens()[1..].iter().filter(|t| dict.contains(t)).count();
                let mut order: Vec<usize> = (1..seq.len()).collect();
                order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
                for &i in order.iter().take(n_func) {
                    bits[i] = true;
                }
            }
        }
    }
    let mask = TokenMask { bits };
    let selected: Vec<usize> = mask.selected().collect();
    let dictionary_fraction = if selected.is_empty() {
        1.0
    } else {
        let hits = selected
            .iter()
            .filter(|&&i| dict.contains(&seq.tokens()[i]))
            .count();
        hits as f64 / selected.len() as f64
    };
    Ok(AdaptiveSelection {
        mask,
        dictionary_fraction,
    })
}
