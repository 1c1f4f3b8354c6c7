//! Reward-filtered self-training.
//!
//! A base model is trained on the reference corpus and frozen as teacher.
//! Each generation step translates the training sources with the current
//! model, scores every completed output by its phoneme count ratio and then
//! fine-tunes on the outputs inside a band that tightens over the schedule.
//! Reward is terminal: it exists only for finished translations and a pair is
//! either kept (reward 1) or rejected (reward 0). An optional last step
//! distills against the teacher on the final filtered set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use log::{info, warn};
use thiserror::Error;

use crate::corpus::{CorpusError, Origin, ParallelCorpus, SentencePair};
use crate::metrics::{evaluate, MetricsError};
use crate::phonology::{pcr, ratio_reward, PhonemeCounter, RewardRecord};
use crate::policy::{DecodeConfig, Policy, PolicyError};
use crate::training::{train, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("teacher parameters changed during the run")]
    TeacherModified,
    #[error("{0}")]
    Observer(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Band half-widths used by the fine-tuning steps of one generation step.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeltaSchedule(Vec<f64>);

impl DeltaSchedule {
    /// Values must lie in (0, 1) and strictly decrease.
    pub fn new(values: Vec<f64>) -> Result<Self, RlError> {
        if values.is_empty() {
            return Err(RlError::Config("delta schedule is empty".into()));
        }
        if let Some(d) = values.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(RlError::Config(format!("delta {d} is outside (0, 1)")));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(RlError::Config(
                "delta schedule must strictly decrease".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for DeltaSchedule {
    fn default() -> Self {
        Self(alloc::vec![0.3, 0.2, 0.1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub generations: usize,
    pub schedule: DeltaSchedule,
    pub st_flag: bool,
    /// Filtered sets smaller than this skip their fine-tuning step.
    pub min_filtered: usize,
    /// Decoding used for both generation and evaluation.
    pub decode: DecodeConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub distill: TrainConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            generations: 3,
            schedule: DeltaSchedule::default(),
            st_flag: true,
            min_filtered: 16,
            decode: DecodeConfig::greedy(),
            base: TrainConfig::default(),
            finetune: TrainConfig::default(),
            distill: TrainConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.generations == 0 {
            return Err(RlError::Config("generations must be >= 1".into()));
        }
        // Re-check in case the schedule was built without `DeltaSchedule::new`.
        DeltaSchedule::new(self.schedule.0.clone())?;
        if self.decode.beam_size == 0 {
            return Err(RlError::Config("beam_size must be >= 1".into()));
        }
        self.base.validate()?;
        self.finetune.validate()?;
        self.distill.validate()?;
        Ok(())
    }

    /// Number of trace records a run produces.
    pub fn trace_len(&self) -> usize {
        1 + self.generations * self.schedule.len() + usize::from(self.st_flag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Phase {
    Base,
    Rl,
    Distill,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    pub step: usize,
    pub phase: Phase,
    /// Generation step this record belongs to (0 for the base model).
    pub generation: usize,
    pub delta: Option<f64>,
    pub dg_size: Option<usize>,
    pub df_size: Option<usize>,
    /// The filtered set was below the floor and no training happened.
    pub skipped: bool,
    /// Mean training loss of the last epoch of this step.
    pub train_loss: Option<f64>,
    pub bleu: f64,
    pub chrf: f64,
    pub pcc_02: f64,
    pub pcc_01: f64,
}

/// Output of one generation step: completed translations of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub pairs: Vec<SentencePair>,
    /// Sources whose translation was empty or hit the length limit.
    pub dropped: usize,
}

/// Translates every source of `corpus`. Empty and unfinished outputs carry
/// no reward and are dropped.
pub fn generation_step(
    policy: &Policy,
    corpus: &ParallelCorpus,
    decode: &DecodeConfig,
) -> Result<Generated, RlError> {
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut dropped = 0;
    for pair in corpus.pairs() {
        let x = policy.src_vocab().encode(&pair.source_text());
        let g = policy.generate(&x, decode)?;
        let tokens = policy.tgt_vocab().decode_tokens(&g.tokens)?;
        match (
            g.truncated,
            SentencePair::from_tokens(pair.source().to_vec(), tokens, Origin::Generated),
        ) {
            (false, Some(p)) => pairs.push(p),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        info!(
            "generation step dropped {dropped} of {} outputs",
            corpus.len()
        );
    }
    Ok(Generated { pairs, dropped })
}

/// Phoneme count ratio of every pair; `None` where a side counts zero.
pub fn annotate(
    pairs: &[SentencePair],
    source_counter: &PhonemeCounter,
    target_counter: &PhonemeCounter,
) -> Vec<Option<f64>> {
    pairs
        .iter()
        .map(|p| {
            let s = p
                .source()
                .iter()
                .map(|t| source_counter.count_token(t))
                .sum();
            let t = p
                .target()
                .iter()
                .map(|t| target_counter.count_token(t))
                .sum();
            pcr(s, t).ok()
        })
        .collect()
}

pub fn reward_records(ratios: &[Option<f64>], delta: f64) -> Vec<RewardRecord> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| RewardRecord::new(i, r, delta))
        .collect()
}

/// Indices of the pairs with reward 1 at `delta`, in order.
pub fn filter_indices(ratios: &[Option<f64>], delta: f64) -> Vec<usize> {
    ratios
        .iter()
        .enumerate()
        .filter(|(_, r)| ratio_reward(**r, delta) == 1)
        .map(|(i, _)| i)
        .collect()
}

pub fn filter(pairs: &[SentencePair], ratios: &[Option<f64>], delta: f64) -> Vec<SentencePair> {
    assert_eq!(pairs.len(), ratios.len(), "one ratio per pair");
    filter_indices(ratios, delta)
        .into_iter()
        .map(|i| pairs[i].clone())
        .collect()
}

/// Hooks for persisting a run as it progresses.
pub trait RunObserver {
    fn generated(
        &mut self,
        _generation: usize,
        _pairs: &[SentencePair],
        _ratios: &[Option<f64>],
    ) -> Result<(), String> {
        Ok(())
    }

    fn record(&mut self, _record: &TraceRecord, _policy: &Policy) -> Result<(), String> {
        Ok(())
    }
}

/// Observer that keeps nothing.
pub struct NoObserver;

impl RunObserver for NoObserver {}

pub struct RunContext<'a> {
    pub eval_set: &'a ParallelCorpus,
    pub source_counter: &'a PhonemeCounter,
    pub target_counter: &'a PhonemeCounter,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub policy: Policy,
    pub teacher: Policy,
    pub base_report: TrainReport,
    pub trace: Vec<TraceRecord>,
}

fn step_seed(config: &TrainConfig, step: usize) -> TrainConfig {
    TrainConfig {
        seed: config.seed.wrapping_add(step as u64),
        ..config.clone()
    }
}

struct Recorder<'a, 'o> {
    ctx: &'a RunContext<'a>,
    decode: DecodeConfig,
    observer: &'o mut dyn RunObserver,
    trace: Vec<TraceRecord>,
}

impl Recorder<'_, '_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        policy: &Policy,
        phase: Phase,
        generation: usize,
        delta: Option<f64>,
        dg_size: Option<usize>,
        df_size: Option<usize>,
        skipped: bool,
        train_loss: Option<f64>,
    ) -> Result<(), RlError> {
        let (report, _) = evaluate(
            policy,
            self.ctx.eval_set,
            self.ctx.source_counter,
            self.ctx.target_counter,
            &self.decode,
        )?;
        let record = TraceRecord {
            step: self.trace.len(),
            phase,
            generation,
            delta,
            dg_size,
            df_size,
            skipped,
            train_loss,
            bleu: report.bleu,
            chrf: report.chrf,
            pcc_02: report.pcc_02,
            pcc_01: report.pcc_01,
        };
        info!(
            "step {} {:?}: bleu {:.2} chrf {:.2} pcc@0.2 {:.1} pcc@0.1 {:.1}",
            record.step, phase, record.bleu, record.chrf, record.pcc_02, record.pcc_01
        );
        self.observer
            .record(&record, policy)
            .map_err(RlError::Observer)?;
        self.trace.push(record);
        Ok(())
    }
}

/// Runs the whole pipeline from an untrained policy.
pub fn run(
    config: &RlConfig,
    initial: Policy,
    base_corpus: &ParallelCorpus,
    ctx: &RunContext<'_>,
    observer: &mut dyn RunObserver,
) -> Result<RlOutcome, RlError> {
    config.validate()?;
    let mut policy = initial;
    let base_report = train(&mut policy, base_corpus, &config.base, None)?;
    let teacher = policy.clone();
    let teacher_checksum = teacher.checksum();
    let mut rec = Recorder {
        ctx,
        decode: config.decode,
        observer,
        trace: Vec::with_capacity(config.trace_len()),
    };
    rec.push(
        &policy,
        Phase::Base,
        0,
        None,
        None,
        None,
        false,
        Some(base_report.last().total),
    )?;

    let mut last_filtered: Option<Vec<SentencePair>> = None;
    for g in 1..=config.generations {
        let generated = generation_step(&policy, base_corpus, &config.decode)?;
        let ratios = annotate(&generated.pairs, ctx.source_counter, ctx.target_counter);
        rec.observer
            .generated(g, &generated.pairs, &ratios)
            .map_err(RlError::Observer)?;
        for &delta in config.schedule.values() {
            let kept = filter(&generated.pairs, &ratios, delta);
            let n_kept = kept.len();
            let starved = n_kept < config.min_filtered.max(1);
            let mut loss = None;
            if starved {
                warn!(
                    "filtered set at delta {delta} has {n_kept} pairs (< {}), skipping step",
                    config.min_filtered
                );
            } else {
                let filtered = base_corpus.with_pairs(kept)?;
                let tc = step_seed(&config.finetune, rec.trace.len());
                loss = Some(train(&mut policy, &filtered, &tc, None)?.last().total);
                last_filtered = Some(filtered.pairs().to_vec());
            }
            rec.push(
                &policy,
                Phase::Rl,
                g,
                Some(delta),
                Some(generated.pairs.len()),
                Some(n_kept),
                starved,
                loss,
            )?;
        }
    }

    if config.st_flag {
        match last_filtered {
            Some(pairs) => {
                let filtered = base_corpus.with_pairs(pairs)?;
                let tc = step_seed(&config.distill, rec.trace.len());
                let loss = train(&mut policy, &filtered, &tc, Some(&teacher))?
                    .last()
                    .total;
                let n = filtered.len();
                rec.push(
                    &policy,
                    Phase::Distill,
                    config.generations,
                    None,
                    None,
                    Some(n),
                    false,
                    Some(loss),
                )?;
            }
            None => {
                warn!("no filtered set to distill on, skipping");
                rec.push(
                    &policy,
                    Phase::Distill,
                    config.generations,
                    None,
                    None,
                    Some(0),
                    true,
                    None,
                )?;
            }
        }
    }

    if teacher.checksum() != teacher_checksum {
        return Err(RlError::TeacherModified);
    }
    Ok(RlOutcome {
        policy,
        teacher,
        base_report,
        trace: rec.trace,
    })
}
