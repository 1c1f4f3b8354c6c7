use alloc::vec::Vec;

use super::{log_softmax, Policy, PolicyError};
use crate::corpus::{BOS, EOS};
use crate::policy::net::{EncoderTape, Net};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DecodeMethod {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecodeConfig {
    pub method: DecodeMethod,
    pub beam_size: usize,
    /// Maximum number of emitted tokens, EOS included. Capped by the
    /// policy's own maximum length.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: DecodeMethod::Greedy,
            beam_size: 1,
            max_len: usize::MAX,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(beam_size: usize) -> Self {
        Self {
            method: DecodeMethod::Beam,
            beam_size,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted tokens without the closing EOS.
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities of the emitted tokens (EOS included when emitted).
    pub logprob: f64,
    /// Decoding stopped at the length limit before producing EOS.
    pub truncated: bool,
}

struct Decoder<'a> {
    net: Net<'a, f64>,
    enc: EncoderTape<f64>,
    vocab: usize,
}

impl Decoder<'_> {
    fn next_log_probs(&self, prefix: &[u32]) -> Vec<f64> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let (logits, _) = self.net.decode(&self.enc, &input);
        log_softmax(&logits[prefix.len() * self.vocab..])
    }
}

pub(super) fn generate(
    policy: &Policy,
    x: &[u32],
    config: &DecodeConfig,
) -> Result<Generation, PolicyError> {
    if config.beam_size == 0 {
        return Err(PolicyError::Config("beam_size must be >= 1".into()));
    }
    let max_len = config.max_len.min(policy.hp.max_len);
    let net = policy.net(&policy.params);
    let enc = net.encode(x);
    let dec = Decoder {
        net,
        enc,
        vocab: policy.hp.tgt_vocab,
    };
    let greedy = greedy(&dec, max_len);
    if config.method == DecodeMethod::Greedy || config.beam_size == 1 {
        return Ok(greedy);
    }
    let beam = beam(&dec, max_len, config.beam_size);
    // The greedy path competes as a candidate so that a wider beam never
    // returns a lower-scoring sequence than greedy search.
    let greedy_wins = match (greedy.truncated, beam.truncated) {
        (false, true) => true,
        (true, false) => false,
        _ => greedy.logprob > beam.logprob,
    };
    Ok(if greedy_wins { greedy } else { beam })
}

fn greedy(dec: &Decoder<'_>, max_len: usize) -> Generation {
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    while tokens.len() < max_len {
        let lp = dec.next_log_probs(&tokens);
        let best = super::argmax(&lp);
        logprob += lp[best as usize];
        if best == EOS {
            return Generation {
                tokens,
                logprob,
                truncated: false,
            };
        }
        tokens.push(best);
    }
    Generation {
        tokens,
        logprob,
        truncated: true,
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    logprob: f64,
}

fn beam(dec: &Decoder<'_>, max_len: usize, width: usize) -> Generation {
    let mut live = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Option<Hypothesis> = None;
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let lp = dec.next_log_probs(&hyp.tokens);
            candidates.extend(
                lp.iter()
                    .enumerate()
                    .map(|(t, &l)| (hyp.logprob + l, b, t as u32)),
            );
        }
        // Score descending; ties by beam rank then token index.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for &(score, b, t) in candidates.iter().take(width) {
            if t == EOS {
                if finished.as_ref().is_none_or(|f| score > f.logprob) {
                    finished = Some(Hypothesis {
                        tokens: live[b].tokens.clone(),
                        logprob: score,
                    });
                }
            } else {
                let mut tokens = live[b].tokens.clone();
                tokens.push(t);
                next.push(Hypothesis {
                    tokens,
                    logprob: score,
                });
            }
        }
        live = next;
        // Scores only decrease with length, so a finished hypothesis that
        // beats every live one is final.
        match (&finished, live.first()) {
            (_, None) => break,
            (Some(f), Some(best_live)) if f.logprob >= best_live.logprob => break,
            _ => {}
        }
    }
    match finished {
        Some(f) => Generation {
            tokens: f.tokens,
            logprob: f.logprob,
            truncated: false,
        },
        None => {
            let best = live
                .into_iter()
                .next()
                .expect("beam keeps at least one hypothesis");
            Generation {
                tokens: best.tokens,
                logprob: best.logprob,
                truncated: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tests::tiny;

    #[test]
    fn beam_of_one_is_greedy() {
        let p = tiny(11);
        let mut state = 12345u64;
        for _ in 0..20 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let len = 1 + (state >> 60) as usize % 5;
            let x: Vec<u32> = (0..len)
                .map(|i| 4 + ((state >> (i * 7)) % 3) as u32)
                .chain([EOS])
                .collect();
            let g = p.generate(&x, &DecodeConfig::greedy()).unwrap();
            let b = p
                .generate(
                    &x,
                    &DecodeConfig {
                        method: DecodeMethod::Beam,
                        beam_size: 1,
                        max_len: usize::MAX,
                    },
                )
                .unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn wider_beam_never_scores_below_greedy() {
        for seed in 0..10 {
            let p = tiny(seed);
            let x = [4, 5, 6, EOS];
            let g = p.generate(&x, &DecodeConfig::greedy()).unwrap();
            let b = p.generate(&x, &DecodeConfig::beam(4)).unwrap();
            assert!(b.logprob >= g.logprob - 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic_and_scored_consistently() {
        let p = tiny(13);
        let x = [6, 4, EOS];
        let a = p.generate(&x, &DecodeConfig::beam(3)).unwrap();
        assert_eq!(a, p.generate(&x, &DecodeConfig::beam(3)).unwrap());
        if !a.truncated {
            let mut y = a.tokens.clone();
            y.push(EOS);
            assert!((p.sequence_logprob(&x, &y).unwrap() - a.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let p = tiny(14);
        let g = p
            .generate(
                &[4, EOS],
                &DecodeConfig {
                    max_len: 1,
                    ..DecodeConfig::greedy()
                },
            )
            .unwrap();
        assert!(g.truncated || g.tokens.is_empty());
        assert!(g.tokens.len() <= 1);
    }

    /// With a beam at least as wide as every length-2 prefix and outputs
    /// capped at three tokens, beam search is exhaustive; compare it with a
    /// brute-force enumeration of every EOS-terminated output.
    #[test]
    fn wide_beam_finds_exhaustive_argmax() {
        for seed in 0..5 {
            let p = tiny(seed);
            let v = p.hyperparams().tgt_vocab as u32;
            let x = [5, 4, 6, EOS];
            let mut best: Option<(f64, Vec<u32>)> = None;
            let mut stack: Vec<Vec<u32>> = alloc::vec![Vec::new()];
            while let Some(prefix) = stack.pop() {
                let mut y = prefix.clone();
                y.push(EOS);
                let lp = p.sequence_logprob(&x, &y).unwrap();
                if best.as_ref().is_none_or(|(b, _)| lp > *b) {
                    best = Some((lp, prefix.clone()));
                }
                if prefix.len() < 2 {
                    for t in (0..v).filter(|&t| t != EOS) {
                        let mut n = prefix.clone();
                        n.push(t);
                        stack.push(n);
                    }
                }
            }
            let (best_lp, best_path) = best.unwrap();
            let config = DecodeConfig {
                method: DecodeMethod::Beam,
                beam_size: (v * v) as usize,
                max_len: 3,
            };
            let g = p.generate(&x, &config).unwrap();
            assert!(!g.truncated);
            assert_eq!(g.tokens, best_path);
            assert!((g.logprob - best_lp).abs() < 1e-9);
        }
    }
}
