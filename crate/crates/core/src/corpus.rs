//! Parallel corpora, vocabularies and the token codec.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("source has {source_lines} lines but target has {target_lines}")]
    Alignment {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("token index {index} is outside a vocabulary of size {size}")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("invalid synthetic corpus configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Origin {
    Reference,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// One aligned pair of whitespace-tokenized sentences. Neither side is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    source: Vec<String>,
    target: Vec<String>,
    origin: Origin,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(ToString::to_string).collect()
}

impl SentencePair {
    /// Returns `None` if either side has no tokens.
    pub fn new(source: &str, target: &str, origin: Origin) -> Option<Self> {
        Self::from_tokens(tokenize(source), tokenize(target), origin)
    }

    pub fn from_tokens(source: Vec<String>, target: Vec<String>, origin: Origin) -> Option<Self> {
        if source.is_empty() || target.is_empty() {
            return None;
        }
        Some(Self {
            source,
            target,
            origin,
        })
    }

    pub fn source(&self) -> &[String] {
        &self.source
    }

    pub fn target(&self) -> &[String] {
        &self.target
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn source_text(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_text(&self) -> String {
        self.target.join(" ")
    }

    pub fn side(&self, side: Side) -> &[String] {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    src_language: String,
    tgt_language: String,
}

impl ParallelCorpus {
    pub fn new(
        src_language: impl Into<String>,
        tgt_language: impl Into<String>,
        pairs: Vec<SentencePair>,
    ) -> Result<Self, CorpusError> {
        if pairs.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(Self {
            pairs,
            src_language: src_language.into(),
            tgt_language: tgt_language.into(),
        })
    }

    /// Builds a reference corpus from two line-aligned texts.
    ///
    /// A line pair in which either side is blank is dropped; the number of
    /// dropped pairs is returned alongside the corpus.
    pub fn from_aligned_text(
        src_language: impl Into<String>,
        tgt_language: impl Into<String>,
        source_text: &str,
        target_text: &str,
    ) -> Result<(Self, usize), CorpusError> {
        let src: Vec<&str> = source_text.lines().collect();
        let tgt: Vec<&str> = target_text.lines().collect();
        if src.len() != tgt.len() {
            return Err(CorpusError::Alignment {
                source_lines: src.len(),
                target_lines: tgt.len(),
            });
        }
        let mut dropped = 0;
        let mut pairs = Vec::with_capacity(src.len());
        for (s, t) in src.iter().zip(&tgt) {
            match SentencePair::new(s, t, Origin::Reference) {
                Some(p) => pairs.push(p),
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::info!("dropped {dropped} blank sentence pairs");
        }
        Ok((Self::new(src_language, tgt_language, pairs)?, dropped))
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn src_language(&self) -> &str {
        &self.src_language
    }

    pub fn tgt_language(&self) -> &str {
        &self.tgt_language
    }

    /// A corpus over the same languages with different pairs.
    pub fn with_pairs(&self, pairs: Vec<SentencePair>) -> Result<Self, CorpusError> {
        Self::new(self.src_language.clone(), self.tgt_language.clone(), pairs)
    }

    pub fn source_lines(&self) -> Vec<String> {
        self.pairs.iter().map(SentencePair::source_text).collect()
    }

    pub fn target_lines(&self) -> Vec<String> {
        self.pairs.iter().map(SentencePair::target_text).collect()
    }
}

/// Token inventory with the four reserved symbols at indices 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in the given order.
    /// Duplicates and reserved spellings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for r in RESERVED {
            vocab.push(r.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !vocab.index.contains_key(&t) {
                vocab.push(t);
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
    }

    /// Reserved tokens followed by every token on one side of the corpus,
    /// ordered by descending frequency, then lexicographically.
    pub fn build(corpus: &ParallelCorpus, side: Side) -> Result<Self, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in corpus.pairs() {
            for tok in pair.side(side) {
                *freq.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// All tokens including the reserved ones.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens after the reserved block.
    pub fn surface_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut out: Vec<u32> = tokens
            .iter()
            .map(|t| self.index_of(t.as_ref()).unwrap_or(UNK))
            .collect();
        out.push(EOS);
        out
    }

    /// Whitespace-tokenizes, maps unknown tokens to UNK and appends EOS.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let toks: Vec<&str> = sentence.split_whitespace().collect();
        self.encode_tokens(&toks)
    }

    /// Maps indices back to surface tokens, dropping reserved ones.
    pub fn decode_tokens(&self, indices: &[u32]) -> Result<Vec<String>, CorpusError> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let tok = self.token(i).ok_or(CorpusError::IndexOutOfRange {
                index: i,
                size: self.len(),
            })?;
            if (i as usize) >= RESERVED.len() {
                out.push(tok.to_string());
            }
        }
        Ok(out)
    }

    pub fn decode(&self, indices: &[u32]) -> Result<String, CorpusError> {
        Ok(self.decode_tokens(indices)?.join(" "))
    }
}
