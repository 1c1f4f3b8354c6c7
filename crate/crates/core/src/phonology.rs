//! Phoneme counting and the length-compliance reward built on top of it.
//!
//! A [`PhonemeCounter`] maps surface text to a phoneme count. Counts feed the
//! phoneme count ratio `PCR = s / t` (source count over translation count),
//! the binary band reward and the corpus-level compliance percentage.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use thiserror::Error;

/// Slack applied to both ends of the reward band so that ratios which are
/// mathematically on the boundary (e.g. `6/5` against `1 + 0.2`) stay inside
/// it despite binary floating point.
pub const BAND_EPSILON: f64 = 1e-12;

/// Bundled English lexicon in the `token<TAB>count` table format.
pub const ENGLISH_LEXICON_TSV: &str = include_str!("../data/en_lexicon.tsv");

const DIGRAPHS: [&[u8; 2]; 7] = [b"th", b"sh", b"ch", b"ph", b"ng", b"ck", b"wh"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhonologyError {
    #[error(
        "phoneme count ratio undefined: source count {source_count}, target count {target_count}"
    )]
    UndefinedRatio {
        source_count: u32,
        target_count: u32,
    },
    #[error("compliance score of an empty set of pairs is undefined")]
    EmptyInput,
    #[error("line {line}: {message}")]
    Table { line: usize, message: String },
}

/// Rule used for tokens missing from the lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FallbackRule {
    /// Maximal vowel-letter clusters count one each; consonant letters count
    /// one each except the digraphs th, sh, ch, ph, ng, ck, wh which count one
    /// per pair. Non-ASCII letters count one each; everything else is zero.
    #[default]
    LetterClusters,
    /// Unknown tokens contribute nothing.
    Zero,
}

impl FallbackRule {
    pub fn count(self, token: &str) -> u32 {
        match self {
            FallbackRule::Zero => 0,
            FallbackRule::LetterClusters => letter_cluster_count(token),
        }
    }
}

fn is_vowel(b: u8) -> bool {
    matches!(b, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn letter_cluster_count(token: &str) -> u32 {
    let mut count = 0u32;
    let mut ascii = alloc::vec::Vec::with_capacity(token.len());
    for ch in token.chars() {
        if ch.is_ascii_alphabetic() {
            ascii.push(ch.to_ascii_lowercase() as u8);
        } else if !ch.is_ascii() && ch.is_alphabetic() {
            count += 1;
        }
    }
    let mut i = 0;
    while i < ascii.len() {
        if is_vowel(ascii[i]) {
            count += 1;
            while i < ascii.len() && is_vowel(ascii[i]) {
                i += 1;
            }
        } else if i + 1 < ascii.len() && DIGRAPHS.iter().any(|d| d[..] == ascii[i..i + 2]) {
            count += 1;
            i += 2;
        } else {
            count += 1;
            i += 1;
        }
    }
    count
}

/// Per-language mapping from text to phoneme count.
///
/// Counting is additive over whitespace-separated tokens. A token is looked
/// up verbatim, then case-folded with surrounding punctuation trimmed, and
/// only then handed to the fallback rule.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhonemeCounter {
    language: String,
    lexicon: BTreeMap<String, u32>,
    fallback: FallbackRule,
}

impl PhonemeCounter {
    pub fn new(
        language: impl Into<String>,
        lexicon: BTreeMap<String, u32>,
        fallback: FallbackRule,
    ) -> Self {
        Self {
            language: language.into(),
            lexicon,
            fallback,
        }
    }

    /// Counter backed by the bundled English lexicon and the letter-cluster rule.
    pub fn english() -> Self {
        Self::from_tsv("en", ENGLISH_LEXICON_TSV, FallbackRule::LetterClusters)
            .expect("bundled lexicon is well formed")
    }

    /// Parses a `token<TAB>count` table. Blank lines and `#` comments are skipped.
    pub fn from_tsv(
        language: impl Into<String>,
        table: &str,
        fallback: FallbackRule,
    ) -> Result<Self, PhonologyError> {
        Ok(Self::new(language, parse_table(table)?, fallback))
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn lexicon(&self) -> &BTreeMap<String, u32> {
        &self.lexicon
    }

    pub fn fallback(&self) -> FallbackRule {
        self.fallback
    }

    /// Serializes the lexicon back into the table format read by [`Self::from_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("# language: ");
        out.push_str(&self.language);
        out.push('\n');
        for (token, count) in &self.lexicon {
            out.push_str(token);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        out
    }

    pub fn count_token(&self, token: &str) -> u32 {
        if let Some(&c) = self.lexicon.get(token) {
            return c;
        }
        let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric());
        if !trimmed.is_empty() {
            if let Some(&c) = self.lexicon.get(trimmed) {
                return c;
            }
            if trimmed.chars().any(|c| c.is_uppercase()) {
                if let Some(&c) = self.lexicon.get(&trimmed.to_lowercase()) {
                    return c;
                }
            }
        }
        self.fallback.count(token)
    }

    pub fn count_phonemes(&self, text: &str) -> u32 {
        text.split_whitespace().map(|t| self.count_token(t)).sum()
    }
}

fn parse_table(table: &str) -> Result<BTreeMap<String, u32>, PhonologyError> {
    let mut lexicon = BTreeMap::new();
    for (idx, raw) in table.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(token), Some(count), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(PhonologyError::Table {
                line: idx + 1,
                message: "expected `token<TAB>count`".to_string(),
            });
        };
        let token = token.trim();
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(PhonologyError::Table {
                line: idx + 1,
                message: "token must be a single non-empty word".to_string(),
            });
        }
        let count = count
            .trim()
            .parse::<u32>()
            .map_err(|_| PhonologyError::Table {
                line: idx + 1,
                message: alloc::format!("invalid count {:?}", count.trim()),
            })?;
        lexicon.insert(token.to_string(), count);
    }
    Ok(lexicon)
}

/// Phoneme count ratio `source_count / target_count`.
pub fn pcr(source_count: u32, target_count: u32) -> Result<f64, PhonologyError> {
    if source_count == 0 || target_count == 0 {
        return Err(PhonologyError::UndefinedRatio {
            source_count,
            target_count,
        });
    }
    Ok(f64::from(source_count) / f64::from(target_count))
}

/// Closed-interval membership `ratio ∈ [1 − delta, 1 + delta]`.
pub fn within_band(ratio: f64, delta: f64) -> bool {
    ratio >= 1.0 - delta - BAND_EPSILON && ratio <= 1.0 + delta + BAND_EPSILON
}

/// Band membership for a possibly undefined ratio; undefined is never compliant.
pub fn ratio_reward(ratio: Option<f64>, delta: f64) -> u8 {
    match ratio {
        Some(r) if within_band(r, delta) => 1,
        _ => 0,
    }
}

/// Binary reward of a candidate translation: 1 iff its PCR lies in the band.
///
/// A zero phoneme count on either side yields 0.
pub fn reward(
    source: &str,
    candidate: &str,
    delta: f64,
    source_counter: &PhonemeCounter,
    target_counter: &PhonemeCounter,
) -> u8 {
    let s = source_counter.count_phonemes(source);
    let t = target_counter.count_phonemes(candidate);
    ratio_reward(pcr(s, t).ok(), delta)
}

/// Per-pair outcome of scoring one sentence pair under a band half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RewardRecord {
    pub pair_id: usize,
    /// `None` when either side has no phonemes.
    pub pcr: Option<f64>,
    pub reward: u8,
    pub delta: f64,
}

impl RewardRecord {
    pub fn new(pair_id: usize, pcr: Option<f64>, delta: f64) -> Self {
        Self {
            pair_id,
            pcr,
            reward: ratio_reward(pcr, delta),
            delta,
        }
    }
}

/// Percentage of ratios inside the band; `None` entries count as non-compliant.
pub fn pcc_from_ratios(ratios: &[Option<f64>], delta: f64) -> Result<f64, PhonologyError> {
    if ratios.is_empty() {
        return Err(PhonologyError::EmptyInput);
    }
    let hits = ratios
        .iter()
        .filter(|r| ratio_reward(**r, delta) == 1)
        .count();
    Ok(hits as f64 * 100.0 / ratios.len() as f64)
}

/// Phoneme count compliance of (source, translation) pairs, in percent.
pub fn pcc_score<S: AsRef<str>, T: AsRef<str>>(
    pairs: &[(S, T)],
    delta: f64,
    source_counter: &PhonemeCounter,
    target_counter: &PhonemeCounter,
) -> Result<f64, PhonologyError> {
    let ratios: alloc::vec::Vec<Option<f64>> = pairs
        .iter()
        .map(|(s, t)| {
            pcr(
                source_counter.count_phonemes(s.as_ref()),
                target_counter.count_phonemes(t.as_ref()),
            )
            .ok()
        })
        .collect();
    pcc_from_ratios(&ratios, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn synth_counter() -> PhonemeCounter {
        PhonemeCounter::from_tsv(
            "syn",
            "ka\t2\nbo\t3\n# comment\n\nlumo\t4\n",
            FallbackRule::LetterClusters,
        )
        .unwrap()
    }

    #[test]
    fn empty_text_has_no_phonemes() {
        assert_eq!(PhonemeCounter::english().count_phonemes(""), 0);
        assert_eq!(synth_counter().count_phonemes("   "), 0);
    }

    #[test]
    fn english_lexicon_entries() {
        let en = PhonemeCounter::english();
        assert_eq!(en.count_phonemes("cat"), 3);
        assert_eq!(en.count_phonemes("The cat."), 5);
        assert_eq!(en.language(), "en");
    }

    #[test]
    fn synthetic_table_lookup() {
        let c = synth_counter();
        assert_eq!(c.count_phonemes("ka"), 2);
        assert_eq!(c.count_phonemes("ka bo lumo"), 9);
    }

    #[test]
    fn fallback_rule_clusters_and_digraphs() {
        let r = FallbackRule::LetterClusters;
        assert_eq!(r.count("cat"), 3);
        assert_eq!(r.count("shock"), 3);
        assert_eq!(r.count("queue"), 2);
        assert_eq!(r.count("thank"), 4);
        assert_eq!(r.count("strength"), 6);
        assert_eq!(r.count("42"), 0);
        assert_eq!(FallbackRule::Zero.count("cat"), 0);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(matches!(
            PhonemeCounter::from_tsv("x", "ka 2\n", FallbackRule::Zero),
            Err(PhonologyError::Table { line: 1, .. })
        ));
        assert!(matches!(
            PhonemeCounter::from_tsv("x", "ok\t1\nka\tmany\n", FallbackRule::Zero),
            Err(PhonologyError::Table { line: 2, .. })
        ));
    }

    #[test]
    fn table_round_trip() {
        let c = synth_counter();
        let again =
            PhonemeCounter::from_tsv("syn", &c.to_tsv(), FallbackRule::LetterClusters).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn pcr_examples() {
        assert_eq!(pcr(10, 10).unwrap(), 1.0);
        assert!((pcr(10, 18).unwrap() - 0.5556).abs() < 1e-4);
        assert!(matches!(
            pcr(10, 0),
            Err(PhonologyError::UndefinedRatio { .. })
        ));
        assert!(pcr(0, 3).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(ratio_reward(Some(1.0), 0.1), 1);
        assert_eq!(ratio_reward(Some(0.9), 0.1), 1);
        assert_eq!(ratio_reward(Some(10.0 / 18.0), 0.2), 0);
        assert_eq!(ratio_reward(None, 0.5), 0);
        let c = synth_counter();
        assert_eq!(reward("ka bo", "ka bo", 0.1, &c, &c), 1);
        assert_eq!(reward("ka", "", 0.9, &c, &c), 0);
    }

    #[test]
    fn pcc_examples() {
        let ratios = [Some(1.0), Some(0.95), Some(0.5), Some(1.3)];
        assert_eq!(pcc_from_ratios(&ratios, 0.1).unwrap(), 50.0);
        let ratios = [Some(0.81), Some(1.19), Some(1.21)];
        assert!((pcc_from_ratios(&ratios, 0.2).unwrap() - 66.667).abs() < 1e-3);
        assert_eq!(pcc_from_ratios(&[], 0.2), Err(PhonologyError::EmptyInput));

        let c = synth_counter();
        let pairs = vec![("ka bo", "ka bo"), ("lumo", "lumo"), ("bo", "bo")];
        assert_eq!(pcc_score(&pairs, 0.1, &c, &c).unwrap(), 100.0);
        let empty: Vec<(&str, &str)> = Vec::new();
        assert!(pcc_score(&empty, 0.1, &c, &c).is_err());
    }

    proptest! {
        #[test]
        fn band_edges_are_rewarded(delta in 0.001f64..0.999) {
            prop_assert_eq!(ratio_reward(Some(1.0 - delta), delta), 1);
            prop_assert_eq!(ratio_reward(Some(1.0 + delta), delta), 1);
        }

        #[test]
        fn exact_rational_edges_are_rewarded(t in 1u32..200, k in 1u32..100) {
            // s/t = 1 ± k/t exactly when s = t ± k.
            let delta = f64::from(k) / f64::from(t);
            prop_assume!(delta < 1.0);
            prop_assert_eq!(ratio_reward(pcr(t + k, t).ok(), delta), 1);
            prop_assert_eq!(ratio_reward(pcr(t - k, t).ok(), delta), 1);
        }

        #[test]
        fn pcc_monotone_in_delta(
            counts in proptest::collection::vec((0u32..30, 0u32..30), 1..40),
            d1 in 0.01f64..0.99,
            d2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let ratios: Vec<Option<f64>> = counts.iter().map(|&(s, t)| pcr(s, t).ok()).collect();
            prop_assert!(pcc_from_ratios(&ratios, lo).unwrap() <= pcc_from_ratios(&ratios, hi).unwrap());
        }

        #[test]
        fn pcc_matches_brute_force(counts in proptest::collection::vec((0u32..30, 0u32..30), 1..40), delta in 0.01f64..0.99) {
            let ratios: Vec<Option<f64>> = counts.iter().map(|&(s, t)| pcr(s, t).ok()).collect();
            let mut hits = 0usize;
            for &(s, t) in &counts {
                if s > 0 && t > 0 {
                    // s/t in [1-d, 1+d]  <=>  (1-d) t <= s <= (1+d) t
                    let (s, t) = (f64::from(s), f64::from(t));
                    if s >= (1.0 - delta) * t - 1e-9 && s <= (1.0 + delta) * t + 1e-9 {
                        hits += 1;
                    }
                }
            }
            let expected = hits as f64 * 100.0 / counts.len() as f64;
            prop_assert_eq!(pcc_from_ratios(&ratios, delta).unwrap(), expected);
        }

        #[test]
        fn ratio_is_source_over_target(s in 1u32..500, t in 1u32..500) {
            prop_assume!(s != t);
            let r = pcr(s, t).unwrap();
            prop_assert_eq!(r, f64::from(s) / f64::from(t));
            prop_assert!(r != f64::from(t) / f64::from(s));
        }

        #[test]
        fn counting_is_additive(words in proptest::collection::vec("[a-z]{1,8}", 0..8)) {
            let en = PhonemeCounter::english();
            let joined = words.join(" ");
            let sum: u32 = words.iter().map(|w| en.count_phonemes(w)).sum();
            prop_assert_eq!(en.count_phonemes(&joined), sum);
            prop_assert_eq!(en.count_phonemes(&joined), en.count_phonemes(&joined));
        }
    }
}
