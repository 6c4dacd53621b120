//! Tokenization, (subject, relation, object) extraction and vocabularies.
//!
//! Utterances come from a closed template family, so a synonym-table chunker
//! is exact: find the earliest (then longest) relation phrase, take the noun
//! phrase after the last determiner on its left as the subject and the noun
//! phrase on its right as the object.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

/// The four spatial relations a detector can be instructed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    In,
    Behind,
    LeftOf,
    RightOf,
}

impl Relation {
    /// Column order of the classification report.
    pub const ALL: [Relation; 4] = [Relation::In, Relation::Behind, Relation::LeftOf, Relation::RightOf];

    /// Short column name used in reports.
    pub fn short_name(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::Behind => "behind",
            Relation::LeftOf => "left",
            Relation::RightOf => "right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Relation::In => "In",
            Relation::Behind => "Behind",
            Relation::LeftOf => "LeftOf",
            Relation::RightOf => "RightOf",
        };
        f.write_str(s)
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "in" => Ok(Relation::In),
            "behind" => Ok(Relation::Behind),
            "leftof" | "left" => Ok(Relation::LeftOf),
            "rightof" | "right" => Ok(Relation::RightOf),
            other => Err(format!("unknown relation label \"{other}\"")),
        }
    }
}

/// Lowercase, strip punctuation, split on whitespace.
///
/// Apostrophes are dropped ("don't" -> "dont"); any other non-alphanumeric
/// character separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { text, tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub subject: String,
    pub relation_tokens: Vec<String>,
    /// Position of `relation_tokens` inside the parsed token list.
    pub relation_span: Range<usize>,
    pub object: String,
    pub relation: Relation,
    /// Token positions of the subject and object noun phrases.
    pub subject_span: Range<usize>,
    pub object_span: Range<usize>,
}

/// Relation phrases and the label each one denotes.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    // Longest phrase first, so that the first hit at a position is the longest.
    entries: Vec<(Vec<String>, Relation)>,
}

const DEFAULT_TABLE: &str = include_str!("../data/relations.tsv");

const DETERMINERS: &[&str] = &["the", "a", "an", "this", "that", "my", "your"];
const LEADING_FILLER: &[&str] = &[
    "i", "am", "im", "we", "are", "now", "placing", "putting", "moving", "put", "place", "move", "set",
    "setting", "please", "lets", "let", "us",
];
const TRAILING_FILLER: &[&str] = &[
    "is", "are", "was", "be", "should", "must", "will", "now", "being", "goes", "go", "sits", "please",
];

impl SynonymTable {
    /// Parse `phrase<TAB>label` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> std::result::Result<Self, ParseError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (phrase, label) = line.split_once('\t').ok_or_else(|| ParseError::SynonymTable {
                line: i + 1,
                reason: "missing TAB separator".into(),
            })?;
            let relation = label
                .parse::<Relation>()
                .map_err(|reason| ParseError::SynonymTable { line: i + 1, reason })?;
            let tokens = tokenize(phrase);
            if tokens.is_empty() {
                return Err(ParseError::SynonymTable { line: i + 1, reason: "empty phrase".into() });
            }
            entries.push((tokens, relation));
        }
        entries.sort_by_key(|e| std::cmp::Reverse(e.0.len()));
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    /// The table shipped in `data/relations.tsv`.
    pub fn builtin() -> &'static SynonymTable {
        static TABLE: OnceLock<SynonymTable> = OnceLock::new();
        TABLE.get_or_init(|| SynonymTable::parse(DEFAULT_TABLE).expect("builtin synonym table is valid"))
    }

    /// Resolve a relation phrase (already tokenized) to its label.
    pub fn label_of(&self, phrase: &[String]) -> Option<Relation> {
        self.entries.iter().find(|(p, _)| p.as_slice() == phrase).map(|(_, r)| *r)
    }

    /// Earliest match; at equal start, the longest phrase.
    fn find(&self, tokens: &[String]) -> Option<(Range<usize>, Relation)> {
        (0..tokens.len()).find_map(|start| {
            self.entries.iter().find_map(|(phrase, rel)| {
                tokens[start..]
                    .starts_with(phrase)
                    .then(|| (start..start + phrase.len(), *rel))
            })
        })
    }

    /// Extract the (subject, relation, object) triple.
    pub fn parse_expression(&self, tokens: &[String]) -> std::result::Result<ParsedExpression, ParseError> {
        let (span, relation) = self
            .find(tokens)
            .ok_or_else(|| ParseError::NoRelation(tokens.join(" ")))?;

        let before = &tokens[..span.start];
        let subject_tokens = match before.iter().rposition(|t| DETERMINERS.contains(&t.as_str())) {
            Some(det) => &before[det + 1..],
            None => strip_leading(before, LEADING_FILLER),
        };
        let subject_start = before.len() - subject_tokens.len();
        let subject_tokens = strip_trailing(subject_tokens, TRAILING_FILLER);
        let subject = subject_tokens.join(" ");

        let rest = &tokens[span.end..];
        let after = strip_leading(rest, DETERMINERS);
        let object_start = span.end + rest.len() - after.len();
        let object_tokens = strip_trailing(after, TRAILING_FILLER);
        let object = object_tokens.join(" ");

        if subject.is_empty() {
            return Err(ParseError::EmptyNounPhrase("subject"));
        }
        if object.is_empty() {
            return Err(ParseError::EmptyNounPhrase("object"));
        }
        if subject == object {
            return Err(ParseError::SameSubjectObject(subject));
        }
        Ok(ParsedExpression {
            subject,
            relation_tokens: tokens[span.clone()].to_vec(),
            relation_span: span,
            object,
            relation,
            subject_span: subject_start..subject_start + subject_tokens.len(),
            object_span: object_start..object_start + object_tokens.len(),
        })
    }
}

fn strip_leading<'a>(mut t: &'a [String], words: &[&str]) -> &'a [String] {
    while let Some((first, rest)) = t.split_first() {
        if !words.contains(&first.as_str()) {
            break;
        }
        t = rest;
    }
    t
}

fn strip_trailing<'a>(mut t: &'a [String], words: &[&str]) -> &'a [String] {
    while let Some((last, rest)) = t.split_last() {
        if !words.contains(&last.as_str()) {
            break;
        }
        t = rest;
    }
    t
}

/// Parse with the builtin synonym table.
pub fn parse_expression(tokens: &[String]) -> std::result::Result<ParsedExpression, ParseError> {
    SynonymTable::builtin().parse_expression(tokens)
}

/// Tokenize and parse in one go.
pub fn parse_text(text: &str) -> std::result::Result<ParsedExpression, ParseError> {
    parse_expression(&tokenize(text))
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens indexed in order of first occurrence after PAD and UNK.
    pub fn build(corpus: &[Utterance]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Self::from_tokens(Vec::new());
        for utt in corpus {
            for tok in &utt.tokens {
                if !vocab.index.contains_key(tok) {
                    vocab.index.insert(tok.clone(), vocab.tokens.len());
                    vocab.tokens.push(tok.clone());
                }
            }
        }
        Ok(vocab)
    }

    /// Rebuild from the stored token list (PAD and UNK are re-inserted if absent).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        all.extend(tokens.into_iter().filter(|t| t != "<pad>" && t != "<unk>"));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    /// Known tokens without the reserved entries.
    pub fn known_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Unknown tokens map to UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.get(t).unwrap_or(UNK)).collect()
    }
}

pub fn build_vocabulary(corpus: &[Utterance]) -> Result<Vocabulary> {
    Vocabulary::build(corpus)
}

pub fn encode_tokens(tokens: &[String], vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(tokens)
}
