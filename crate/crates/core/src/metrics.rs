//! Corpus-level BLEU and chrF, compatible with sacreBLEU's defaults
//! (13a tokenization, exponential smoothing; chrF with six character orders
//! and beta 2), and evaluation reports for a policy on a test set.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use thiserror::Error;

use crate::corpus::ParallelCorpus;
use crate::phonology::{pcc_score, PhonemeCounter, PhonologyError};
use crate::policy::{DecodeConfig, Policy, PolicyError};

const MAX_NGRAM: usize = 4;
const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch {
        hypotheses: usize,
        references: usize,
    },
    #[error("no sentences to score")]
    Empty,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Phonology(#[from] PhonologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Smoothing {
    /// Halve the pseudo-count for every successive zero-match order.
    #[default]
    Exp,
    None,
}

/// The mteval-v13a tokenizer as implemented by sacreBLEU.
pub fn tokenize_13a(line: &str) -> String {
    let mut line = line
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut chars: Vec<char> = Vec::with_capacity(line.len() + 2);
    chars.push(' ');
    chars.extend(line.chars());
    chars.push(' ');

    // Symbols and most ASCII punctuation become separate tokens.
    let mut out = Vec::with_capacity(chars.len() * 2);
    for c in chars {
        if is_13a_symbol(c) {
            out.extend([' ', c, ' ']);
        } else {
            out.push(c);
        }
    }
    // Periods and commas split unless preceded by a digit.
    let out = pairwise(
        &out,
        |a, b| !a.is_ascii_digit() && matches!(b, '.' | ','),
        |a, b| [a, ' ', b, ' '],
    );
    // Periods and commas split unless followed by a digit.
    let out = pairwise(
        &out,
        |a, b| matches!(a, '.' | ',') && !b.is_ascii_digit(),
        |a, b| [' ', a, ' ', b],
    );
    // Dashes after a digit split.
    let out = pairwise(
        &out,
        |a, b| a.is_ascii_digit() && b == '-',
        |a, b| [a, ' ', b, ' '],
    );

    let joined: String = out.into_iter().collect();
    let mut result = String::with_capacity(joined.len());
    for (i, token) in joined.split_whitespace().enumerate() {
        if i > 0 {
            result.push(' ');
        }
        result.push_str(token);
    }
    result
}

fn is_13a_symbol(c: char) -> bool {
    matches!(c, '{'..='~' | '['..='`' | ' '..='&' | '('..='+' | ':'..='@' | '/')
}

/// Left-to-right, non-overlapping rewrite of two-character matches.
fn pairwise(
    s: &[char],
    hit: impl Fn(char, char) -> bool,
    rewrite: impl Fn(char, char) -> [char; 4],
) -> Vec<char> {
    let mut out = Vec::with_capacity(s.len() + s.len() / 2);
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && hit(s[i], s[i + 1]) {
            out.extend(rewrite(s[i], s[i + 1]));
            i += 2;
        } else {
            out.push(s[i]);
            i += 1;
        }
    }
    out
}

fn check_lengths<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<(), MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn ngram_counts<T: Ord>(items: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub correct: [usize; MAX_NGRAM],
    pub total: [usize; MAX_NGRAM],
}

impl BleuStats {
    pub fn of_segment(hypothesis: &str, reference: &str) -> Self {
        let hyp = tokenize_13a(hypothesis.trim_end());
        let reference = tokenize_13a(reference.trim_end());
        let hyp: Vec<&str> = hyp.split_whitespace().collect();
        let reference: Vec<&str> = reference.split_whitespace().collect();
        let mut stats = Self {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Self::default()
        };
        for n in 1..=MAX_NGRAM {
            let ref_counts = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&hyp, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                stats.correct[n - 1] += count.min(clip);
            }
            stats.total[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        stats
    }

    fn add(&mut self, other: &Self) {
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        for n in 0..MAX_NGRAM {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
    }

    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            Float::exp(1.0 - self.ref_len as f64 / self.hyp_len as f64)
        };
        let mut precisions = [0.0; MAX_NGRAM];
        let mut pseudo = 1.0;
        #[allow(clippy::needless_range_loop)]
        for n in 0..MAX_NGRAM {
            if self.total[n] == 0 {
                break;
            }
            if self.correct[n] == 0 {
                if smoothing == Smoothing::Exp {
                    pseudo *= 2.0;
                    precisions[n] = 100.0 / (pseudo * self.total[n] as f64);
                }
            } else {
                precisions[n] = 100.0 * self.correct[n] as f64 / self.total[n] as f64;
            }
        }
        let log_sum: f64 = precisions
            .iter()
            .map(|&p| {
                if p == 0.0 {
                    -9_999_999_999.0
                } else {
                    Float::ln(p)
                }
            })
            .sum();
        bp * Float::exp(log_sum / MAX_NGRAM as f64)
    }
}

/// Corpus BLEU with the default exponential smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<f64, MetricsError> {
    bleu_with(hypotheses, references, Smoothing::Exp)
}

pub fn bleu_with<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    smoothing: Smoothing,
) -> Result<f64, MetricsError> {
    check_lengths(hypotheses, references)?;
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(&BleuStats::of_segment(h.as_ref(), r.as_ref()));
    }
    Ok(stats.score(smoothing))
}

/// Corpus chrF: character n-gram statistics (whitespace removed) summed over
/// the corpus, precision and recall averaged over the orders that occur in
/// both hypothesis and reference, combined as F-beta.
pub fn chrf<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<f64, MetricsError> {
    check_lengths(hypotheses, references)?;
    // [hyp, ref, match] per order.
    let mut stats = [[0usize; 3]; CHRF_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        let hyp: Vec<char> = h.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        let reference: Vec<char> = r.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        for (n, s) in stats.iter_mut().enumerate() {
            let hc = ngram_counts(&hyp, n + 1);
            let rc = ngram_counts(&reference, n + 1);
            s[0] += hc.values().sum::<usize>();
            s[1] += rc.values().sum::<usize>();
            s[2] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let (mut avg_prec, mut avg_rec, mut orders) = (0.0, 0.0, 0usize);
    for &[n_hyp, n_ref, n_match] in &stats {
        if n_hyp > 0 && n_ref > 0 {
            avg_prec += n_match as f64 / n_hyp as f64;
            avg_rec += n_match as f64 / n_ref as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    avg_prec /= orders as f64;
    avg_rec /= orders as f64;
    if avg_prec + avg_rec == 0.0 {
        return Ok(0.0);
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    Ok(100.0 * (1.0 + b2) * avg_prec * avg_rec / (b2 * avg_prec + avg_rec))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvaluationReport {
    pub model_id: String,
    pub test_set_id: String,
    pub bleu: f64,
    pub chrf: f64,
    pub pcc_02: f64,
    pub pcc_01: f64,
    pub n_sentences: usize,
    /// Slots for externally computed learned metrics; never filled here.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub bleurt: Option<f64>,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub comet: Option<f64>,
}

/// Scores hypotheses for a test set: BLEU and chrF against the references,
/// compliance at 0.2 and 0.1 between each source and its hypothesis.
pub fn score(
    model_id: &str,
    test_set_id: &str,
    test_set: &ParallelCorpus,
    hypotheses: &[String],
    source_counter: &PhonemeCounter,
    target_counter: &PhonemeCounter,
) -> Result<EvaluationReport, MetricsError> {
    let sources = test_set.source_lines();
    let references = test_set.target_lines();
    check_lengths(hypotheses, &references)?;
    let pairs: Vec<(&String, &String)> = sources.iter().zip(hypotheses).collect();
    Ok(EvaluationReport {
        model_id: model_id.into(),
        test_set_id: test_set_id.into(),
        bleu: bleu(hypotheses, &references)?,
        chrf: chrf(hypotheses, &references)?,
        pcc_02: pcc_score(&pairs, 0.2, source_counter, target_counter)?,
        pcc_01: pcc_score(&pairs, 0.1, source_counter, target_counter)?,
        n_sentences: hypotheses.len(),
        bleurt: None,
        comet: None,
    })
}

/// Translates every source of the test set and scores the outputs. Returns
/// the report together with the hypotheses in test-set order.
pub fn evaluate(
    policy: &Policy,
    test_set: &ParallelCorpus,
    source_counter: &PhonemeCounter,
    target_counter: &PhonemeCounter,
    decode: &DecodeConfig,
) -> Result<(EvaluationReport, Vec<String>), MetricsError> {
    let hypotheses = translate_all(policy, test_set, decode)?;
    let report = score(
        "policy",
        test_set.tgt_language(),
        test_set,
        &hypotheses,
        source_counter,
        target_counter,
    )?;
    Ok((report, hypotheses))
}

pub fn translate_all(
    policy: &Policy,
    corpus: &ParallelCorpus,
    decode: &DecodeConfig,
) -> Result<Vec<String>, PolicyError> {
    corpus
        .pairs()
        .iter()
        .map(|p| {
            policy
                .translate(&p.source_text(), decode)
                .map(|(text, _)| text)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, SentencePair, Vocabulary};
    use crate::phonology::FallbackRule;
    use crate::policy::ModelConfig;
    use alloc::vec;

    #[test]
    fn tokenizer_matches_reference_outputs() {
        let cases = [
            ("the cat sat on the mat.", "the cat sat on the mat ."),
            (
                "There is a book on the table, isn't there?",
                "There is a book on the table , isn't there ?",
            ),
            (
                "He paid $3.50 for 2 coffees.",
                "He paid $ 3.50 for 2 coffees .",
            ),
            (
                "we will meet at 10:30 tomorrow",
                "we will meet at 10 : 30 tomorrow",
            ),
            (
                "The well-known author wrote 12-15 pages a day.",
                "The well-known author wrote 12 - 15 pages a day .",
            ),
            (
                "She said: \"Go home now!\"",
                "She said : \" Go home now ! \"",
            ),
            (
                "Prices rose by 4,5 % last year.",
                "Prices rose by 4,5 % last year .",
            ),
            (
                "The meeting was cancelled &amp; rescheduled.",
                "The meeting was cancelled & rescheduled .",
            ),
            (
                "Café au lait costs €4 in Zürich.",
                "Café au lait costs €4 in Zürich .",
            ),
            (
                "They arrived late (around midnight).",
                "They arrived late ( around midnight ) .",
            ),
        ];
        for (input, expected) in cases {
            assert_eq!(tokenize_13a(input), expected, "{input}");
        }
    }

    #[test]
    fn identical_corpora_score_100() {
        let s = ["a b c d e", "the cat sat"];
        assert!((bleu(&s, &s).unwrap() - 100.0).abs() < 1e-9);
        assert!((chrf(&s, &s).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn unsmoothed_hand_example() {
        let b = bleu_with(&["a b c d e"], &["a b c d"], Smoothing::None).unwrap();
        // (4/5 · 3/4 · 2/3 · 1/2)^(1/4), brevity penalty 1.
        let hand = 100.0 * Float::powf(0.8f64 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
        assert!((b - hand).abs() < 1e-9);
        assert!((b - 66.87).abs() < 0.05);
    }

    #[test]
    fn exp_smoothing_and_brevity_penalty() {
        let b = bleu(
            &["the cat sat", "on a mat today"],
            &["the cat sat down", "on the mat today"],
        )
        .unwrap();
        assert!((b - 46.905226098954216).abs() < 1e-9);
        assert_eq!(bleu_with(&["a b"], &["c d"], Smoothing::None).unwrap(), 0.0);
    }

    #[test]
    fn chrf_edge_cases() {
        assert_eq!(chrf(&["abc"], &["xyz"]).unwrap(), 0.0);
        assert!(
            (chrf(&["the cat"], &["the hat and cat"]).unwrap() - 19.862710363153234).abs() < 1e-9
        );
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            bleu(&["a"], &["a", "b"]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            chrf::<&str, &str>(&[], &[]),
            Err(MetricsError::Empty)
        ));
    }

    fn shared_counter() -> PhonemeCounter {
        PhonemeCounter::new("copy", BTreeMap::new(), FallbackRule::LetterClusters)
    }

    fn copy_corpus() -> ParallelCorpus {
        let pairs = vec![
            SentencePair::new("ka", "bo", Origin::Reference).unwrap(),
            SentencePair::new("ka ka", "bo", Origin::Reference).unwrap(),
            SentencePair::new("bo ka", "ka bo", Origin::Reference).unwrap(),
        ];
        ParallelCorpus::new("copy", "copy", pairs).unwrap()
    }

    fn random_policy(seed: u64) -> Policy {
        let config = ModelConfig {
            layers: 1,
            d_model: 4,
            heads: 1,
            d_ff: 4,
            max_len: 6,
        };
        let vocab = Vocabulary::from_tokens(["ka", "bo"]);
        Policy::init(config, vocab.clone(), vocab, seed).unwrap()
    }

    #[test]
    fn compliance_is_measured_against_sources() {
        let corpus = copy_corpus();
        let counter = shared_counter();
        // Hypotheses equal the references, whose lengths differ from the sources.
        let hyps = corpus.target_lines();
        let report = score("m", "t", &corpus, &hyps, &counter, &counter).unwrap();
        assert!((report.chrf - 100.0).abs() < 1e-9);
        // PCRs are 1, 2 and 1.
        assert!((report.pcc_02 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.pcc_01, report.pcc_02);
    }

    #[test]
    fn evaluate_reports_recountable_compliance() {
        let corpus = copy_corpus();
        let counter = shared_counter();
        for seed in 0..8 {
            let p = random_policy(seed);
            let (report, hyps) =
                evaluate(&p, &corpus, &counter, &counter, &DecodeConfig::greedy()).unwrap();
            assert_eq!(hyps.len(), 3);
            assert_eq!(report.n_sentences, 3);
            let sources = corpus.source_lines();
            let recount = |delta: f64| {
                let hits = sources
                    .iter()
                    .zip(&hyps)
                    .filter(|(s, h)| {
                        let (a, b) = (counter.count_phonemes(s), counter.count_phonemes(h));
                        b > 0 && a > 0 && (a as f64 / b as f64 - 1.0).abs() <= delta + 1e-12
                    })
                    .count();
                100.0 * hits as f64 / hyps.len() as f64
            };
            assert_eq!(report.pcc_02, recount(0.2));
            assert_eq!(report.pcc_01, recount(0.1));
            assert!(report.pcc_01 <= report.pcc_02);
        }
    }
}
