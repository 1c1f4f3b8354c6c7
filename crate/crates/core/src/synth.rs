//! Deterministic synthetic translation task with a built-in length trade-off.
//!
//! Every abstract symbol has one source word and two target words: a SHORT
//! rendering whose phoneme count is close to the source word's, and a LONG
//! rendering with roughly 1.6–2.0 times as many phonemes. Reference targets
//! pick one of the two per occurrence, so a model trained on references
//! produces translations that are often too long, and shortening them costs
//! agreement with the references.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusError, Origin, ParallelCorpus, SentencePair};
use crate::phonology::{FallbackRule, PhonemeCounter};

pub const SOURCE_LANGUAGE: &str = "syn-src";
pub const TARGET_LANGUAGE: &str = "syn-tgt";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SOURCE_COUNT_RANGE: (u32, u32) = (2, 6);
const TEST_STREAM: u64 = 0x7465_7374_5f73_6574;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthSpec {
    pub n_symbols: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Mean probability that a reference renders a symbol LONG.
    pub p_long: f64,
    /// Half of the symbols use `p_long + symbol_lean`, the other half
    /// `p_long - symbol_lean` (clamped to [0, 1]). Zero gives every symbol
    /// the same rendering odds.
    pub symbol_lean: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_symbols: 50,
            len_min: 3,
            len_max: 10,
            p_long: 0.5,
            symbol_lean: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.n_symbols == 0 {
            return fail(format!("n_symbols must be >= 1, got {}", self.n_symbols));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return fail(format!(
                "need 1 <= len_min <= len_max, got [{}, {}]",
                self.len_min, self.len_max
            ));
        }
        if !(0.0..=1.0).contains(&self.p_long) {
            return fail(format!("p_long must be in [0, 1], got {}", self.p_long));
        }
        if !(0.0..=1.0).contains(&self.symbol_lean) {
            return fail(format!(
                "symbol_lean must be in [0, 1], got {}",
                self.symbol_lean
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SymbolEntry {
    pub source: String,
    pub source_count: u32,
    pub short: String,
    pub short_count: u32,
    pub long: String,
    pub long_count: u32,
    pub p_long: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
    pub symbols: Vec<SymbolEntry>,
    pub source_counter: PhonemeCounter,
    pub target_counter: PhonemeCounter,
}

fn word(rng: &mut ChaCha8Rng, len: u32) -> String {
    let mut s = String::with_capacity(len as usize);
    let start_vowel = rng.gen_bool(0.5);
    for i in 0..len {
        let pool = if (i % 2 == 0) == start_vowel {
            VOWELS
        } else {
            CONSONANTS
        };
        s.push(pool[rng.gen_range(0..pool.len())] as char);
    }
    s
}

fn fresh_word(
    rng: &mut ChaCha8Rng,
    len: u32,
    taken: &mut BTreeSet<String>,
) -> Result<String, CorpusError> {
    for _ in 0..1000 {
        let w = word(rng, len);
        if taken.insert(w.clone()) {
            return Ok(w);
        }
    }
    Err(CorpusError::Config(format!(
        "could not find an unused {len}-letter word"
    )))
}

fn draw_symbols(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SymbolEntry>, CorpusError> {
    let mut src_taken = BTreeSet::new();
    let mut tgt_taken = BTreeSet::new();
    let mut leaning_long: Vec<bool> = (0..spec.n_symbols).map(|i| i % 2 == 0).collect();
    // Fisher-Yates so lean is not tied to symbol index.
    for i in (1..leaning_long.len()).rev() {
        let j = rng.gen_range(0..=i);
        leaning_long.swap(i, j);
    }
    let mut out = Vec::with_capacity(spec.n_symbols);
    for &long_lean in &leaning_long {
        let source_count = rng.gen_range(SOURCE_COUNT_RANGE.0..=SOURCE_COUNT_RANGE.1);
        let jitter: i64 = rng.gen_range(-1..=1);
        let short_count = (i64::from(source_count) + jitter).max(1) as u32;
        let factor: f64 = rng.gen_range(1.6..=2.0);
        let long_count = num_traits::Float::round(f64::from(source_count) * factor) as u32;
        let p_long = if long_lean {
            spec.p_long + spec.symbol_lean
        } else {
            spec.p_long - spec.symbol_lean
        }
        .clamp(0.0, 1.0);
        out.push(SymbolEntry {
            source: fresh_word(rng, source_count, &mut src_taken)?,
            source_count,
            short: fresh_word(rng, short_count, &mut tgt_taken)?,
            short_count,
            long: fresh_word(rng, long_count, &mut tgt_taken)?,
            long_count,
            p_long,
        });
    }
    Ok(out)
}

fn draw_sentence(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(spec.len_min..=spec.len_max);
    (0..len).map(|_| rng.gen_range(0..spec.n_symbols)).collect()
}

fn render(symbols: &[SymbolEntry], sentence: &[usize], rng: &mut ChaCha8Rng) -> SentencePair {
    let mut src = Vec::with_capacity(sentence.len());
    let mut tgt = Vec::with_capacity(sentence.len());
    for &s in sentence {
        let e = &symbols[s];
        src.push(e.source.clone());
        let long = rng.gen_bool(e.p_long);
        tgt.push(if long {
            e.long.clone()
        } else {
            e.short.clone()
        });
    }
    SentencePair::from_tokens(src, tgt, Origin::Reference).expect("sentences are non-empty")
}

/// Generates train and test corpora plus the exact phoneme tables.
///
/// Output is a pure function of the arguments. Test sentences never repeat a
/// training source sequence.
pub fn generate(
    spec: &SynthSpec,
    n_train: usize,
    n_test: usize,
) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(CorpusError::Config(format!(
            "need n_train, n_test >= 1, got {n_train}, {n_test}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let symbols = draw_symbols(spec, &mut rng)?;

    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        let sentence = draw_sentence(spec, &mut rng);
        train.push(render(&symbols, &sentence, &mut rng));
        seen.insert(sentence);
    }

    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TEST_STREAM);
    let mut test = Vec::with_capacity(n_test);
    let mut attempts = 0usize;
    while test.len() < n_test {
        attempts += 1;
        if attempts > 1000 * n_test + 1000 {
            return Err(CorpusError::Config(
                "sentence space too small for a disjoint test set".into(),
            ));
        }
        let sentence = draw_sentence(spec, &mut test_rng);
        if seen.contains(&sentence) {
            continue;
        }
        test.push(render(&symbols, &sentence, &mut test_rng));
    }

    let source_counter = PhonemeCounter::new(
        SOURCE_LANGUAGE,
        symbols
            .iter()
            .map(|e| (e.source.clone(), e.source_count))
            .collect::<BTreeMap<_, _>>(),
        FallbackRule::LetterClusters,
    );
    let target_counter = PhonemeCounter::new(
        TARGET_LANGUAGE,
        symbols
            .iter()
            .flat_map(|e| {
                [
                    (e.short.clone(), e.short_count),
                    (e.long.clone(), e.long_count),
                ]
            })
            .collect::<BTreeMap<_, _>>(),
        FallbackRule::LetterClusters,
    );

    Ok(SyntheticCorpus {
        train: ParallelCorpus::new(SOURCE_LANGUAGE, TARGET_LANGUAGE, train)?,
        test: ParallelCorpus::new(SOURCE_LANGUAGE, TARGET_LANGUAGE, test)?,
        symbols,
        source_counter,
        target_counter,
    })
}
