//! Losses, gradients and the mini-batch training loop.
//!
//! The token-level cross-entropy is averaged over every target token in a
//! batch. The consistency term is `KL(student ‖ teacher)` per target
//! position with the teacher held constant; inside training it is averaged
//! over the same tokens so that `total = ce + alpha * kl` mixes like with like.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{ParallelCorpus, SentencePair};
use crate::policy::net::Backprop;
use crate::policy::{log_softmax, Policy, PolicyError, TokenDistribution};
use crate::scalar::Scalar;

/// Floor applied to teacher probabilities before taking logarithms.
pub const KL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("distribution shapes differ: {0}")]
    Shape(String),
    #[error("teacher and student target vocabularies differ")]
    TeacherVocabulary,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the consistency term; only used when a teacher is given.
    pub alpha: f64,
    pub seed: u64,
    pub precision: Precision,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 32,
            alpha: 1.0,
            seed: 0,
            precision: Precision::F64,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::Config("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub token_count: usize,
}

/// `ce + alpha * kl`.
pub fn combined_loss(ce: f64, kl: f64, alpha: f64) -> f64 {
    ce + alpha * kl
}

/// `Σ_i Σ_k p_s(k) ln(p_s(k) / max(p_t(k), ε))` together with its gradient
/// with respect to the student *logits* at every position (the student
/// distributions being softmax outputs). Teacher distributions are constants.
pub fn kl_consistency_loss(
    student: &[TokenDistribution],
    teacher: &[TokenDistribution],
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    if student.len() != teacher.len() {
        return Err(TrainError::Shape(alloc::format!(
            "{} vs {} positions",
            student.len(),
            teacher.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.probs().len() != t.probs().len() {
            return Err(TrainError::Shape(alloc::format!(
                "position {i}: {} vs {} classes",
                s.probs().len(),
                t.probs().len()
            )));
        }
        let (kl, g) = kl_row(s.probs(), t.probs());
        total += kl;
        grads.push(g);
    }
    Ok((total, grads))
}

fn kl_row<T: Scalar>(ps: &[T], pt: &[T]) -> (T, Vec<T>) {
    let floor = T::of(KL_FLOOR);
    let log_ratio: Vec<T> = ps
        .iter()
        .zip(pt)
        .map(|(&s, &t)| {
            if s > T::zero() {
                s.ln() - t.max(floor).ln()
            } else {
                T::zero()
            }
        })
        .collect();
    let kl = ps.iter().zip(&log_ratio).map(|(&s, &r)| s * r).sum::<T>();
    let grad = ps
        .iter()
        .zip(&log_ratio)
        .map(|(&s, &r)| s * (r - kl))
        .collect();
    (kl, grad)
}

#[derive(Debug, Clone)]
pub(crate) struct EncodedPair {
    src: Vec<u32>,
    tgt: Vec<u32>,
    teacher_src: Vec<u32>,
}

fn encode_pairs(
    student: &Policy,
    teacher: Option<&Policy>,
    pairs: &[SentencePair],
) -> Result<Vec<EncodedPair>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            let src = student.src_vocab().encode_tokens(p.source());
            let tgt = student.tgt_vocab().encode_tokens(p.target());
            student.check_source(&src)?;
            student.decoder_input(&tgt)?;
            let teacher_src = match teacher {
                Some(t) => {
                    let s = t.src_vocab().encode_tokens(p.source());
                    t.check_source(&s)?;
                    s
                }
                None => Vec::new(),
            };
            Ok(EncodedPair {
                src,
                tgt,
                teacher_src,
            })
        })
        .collect()
}

#[derive(Default, Clone, Copy)]
struct Sums {
    ce: f64,
    kl: f64,
    tokens: usize,
}

impl Sums {
    fn report(self, alpha: f64) -> LossReport {
        let n = self.tokens.max(1) as f64;
        let (ce, kl) = (self.ce / n, self.kl / n);
        LossReport {
            ce,
            kl,
            total: combined_loss(ce, kl, alpha),
            token_count: self.tokens,
        }
    }
}

struct Objective<'a, T> {
    student: &'a Policy,
    params: &'a [T],
    teacher: Option<(&'a Policy, &'a [T])>,
    ce_weight: f64,
    kl_weight: f64,
}

impl<T: Scalar> Objective<'_, T> {
    /// Loss sums for one pair; when `grad` is given, accumulates the
    /// gradient of `ce_weight * ce_sum + kl_weight * kl_sum`.
    fn pair(&self, pair: &EncodedPair, grad: Option<&mut [T]>) -> Result<Sums, TrainError> {
        let v = self.student.hyperparams().tgt_vocab;
        let input = self.student.decoder_input(&pair.tgt)?;
        let net = self.student.net(self.params);
        let enc = net.encode(&pair.src);
        let (logits, tape) = net.decode(&enc, &input);

        let teacher_logits = match self.teacher {
            Some((t, tp)) => {
                let tnet = t.net(tp);
                let tenc = tnet.encode(&pair.teacher_src);
                Some(tnet.decode(&tenc, &input).0)
            }
            None => None,
        };

        let mut sums = Sums {
            tokens: pair.tgt.len(),
            ..Sums::default()
        };
        let mut dlogits = vec![T::zero(); logits.len()];
        for (s, &target) in pair.tgt.iter().enumerate() {
            let row = &logits[s * v..(s + 1) * v];
            let lp = log_softmax(row);
            let probs: Vec<T> = lp.iter().map(|l| l.exp()).collect();
            sums.ce -= lp[target as usize].to_f64();
            let drow = &mut dlogits[s * v..(s + 1) * v];
            let cw = T::of(self.ce_weight);
            for (k, d) in drow.iter_mut().enumerate() {
                *d = cw * probs[k];
            }
            drow[target as usize] -= cw;
            if let Some(tl) = &teacher_logits {
                let tp: Vec<T> = log_softmax(&tl[s * v..(s + 1) * v])
                    .iter()
                    .map(|l| l.exp())
                    .collect();
                let (kl, g) = kl_row(&probs, &tp);
                sums.kl += kl.to_f64();
                let kw = T::of(self.kl_weight);
                for (d, gk) in drow.iter_mut().zip(g) {
                    *d += kw * gk;
                }
            }
        }
        if let Some(grad) = grad {
            let mut bp = Backprop { net: &net, grad };
            let dmemory = bp.decoder(&enc, &tape, &dlogits);
            bp.encoder(&enc, &dmemory);
        }
        Ok(sums)
    }
}

fn convert<T: Scalar>(p: &[f64]) -> Vec<T> {
    p.iter().map(|&v| T::of(v)).collect()
}

/// Loss and gradient of one batch in precision `T`. The gradient is of the
/// reported `total`.
fn batch_gradient<T: Scalar>(
    student: &Policy,
    teacher: Option<&Policy>,
    batch: &[EncodedPair],
    alpha: f64,
) -> Result<(LossReport, Vec<f64>), TrainError> {
    let tokens: usize = batch.iter().map(|p| p.tgt.len()).sum();
    let params: Vec<T> = convert(student.params());
    let tparams: Option<Vec<T>> = teacher.map(|t| convert(t.params()));
    let obj = Objective {
        student,
        params: &params,
        teacher: teacher.zip(tparams.as_deref()),
        ce_weight: 1.0 / tokens as f64,
        kl_weight: alpha / tokens as f64,
    };
    let mut grad = vec![T::zero(); params.len()];
    let mut sums = Sums::default();
    for pair in batch {
        let s = obj.pair(pair, Some(&mut grad))?;
        sums.ce += s.ce;
        sums.kl += s.kl;
        sums.tokens += s.tokens;
    }
    Ok((
        sums.report(alpha),
        grad.into_iter().map(Scalar::to_f64).collect(),
    ))
}

fn batch_of(pairs: &[SentencePair]) -> Result<&[SentencePair], TrainError> {
    if pairs.is_empty() {
        Err(TrainError::EmptyBatch)
    } else {
        Ok(pairs)
    }
}

/// Mean token cross-entropy of a batch and its gradient (64-bit).
pub fn cross_entropy_loss(
    policy: &Policy,
    batch: &[SentencePair],
) -> Result<(LossReport, Vec<f64>), TrainError> {
    let encoded = encode_pairs(policy, None, batch_of(batch)?)?;
    batch_gradient::<f64>(policy, None, &encoded, 0.0)
}

/// `ce + alpha * kl` against a frozen teacher, and its gradient with respect
/// to the student parameters (64-bit).
pub fn distillation_loss(
    student: &Policy,
    teacher: &Policy,
    batch: &[SentencePair],
    alpha: f64,
) -> Result<(LossReport, Vec<f64>), TrainError> {
    if student.tgt_vocab() != teacher.tgt_vocab() {
        return Err(TrainError::TeacherVocabulary);
    }
    let encoded = encode_pairs(student, Some(teacher), batch_of(batch)?)?;
    batch_gradient::<f64>(student, Some(teacher), &encoded, alpha)
}

/// Loss over a whole corpus without touching gradients.
pub fn corpus_loss(
    policy: &Policy,
    corpus: &ParallelCorpus,
    teacher: Option<&Policy>,
    alpha: f64,
) -> Result<LossReport, TrainError> {
    let encoded = encode_pairs(policy, teacher, corpus.pairs())?;
    let tparams = teacher.map(|t| t.params());
    let obj = Objective {
        student: policy,
        params: policy.params(),
        teacher: teacher.zip(tparams),
        ce_weight: 0.0,
        kl_weight: 0.0,
    };
    let mut sums = Sums::default();
    for pair in &encoded {
        let s = obj.pair(pair, None)?;
        sums.ce += s.ce;
        sums.kl += s.kl;
        sums.tokens += s.tokens;
    }
    Ok(sums.report(if teacher.is_some() { alpha } else { 0.0 }))
}

enum Optimizer {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, step: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, step } => {
                *step += 1;
                let c1 = 1.0 - num_traits::Float::powi(ADAM_BETA1, *step);
                let c2 = 1.0 - num_traits::Float::powi(ADAM_BETA2, *step);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= lr * mh / (num_traits::Float::sqrt(vh) + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss of the starting model over the whole corpus, before any update.
    pub initial: LossReport,
    /// Token-weighted mean of the batch losses seen during each epoch.
    pub epochs: Vec<LossReport>,
}

impl TrainReport {
    pub fn last(&self) -> LossReport {
        self.epochs.last().copied().unwrap_or(self.initial)
    }
}

/// Mini-batch training in place.
///
/// Without a teacher this minimizes the cross-entropy; with one it minimizes
/// `ce + alpha * kl` where the teacher distributions come from teacher
/// forcing on the same batch. The teacher is never modified. Batches are
/// reshuffled every epoch from `config.seed`.
pub fn train(
    policy: &mut Policy,
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    teacher: Option<&Policy>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if let Some(t) = teacher {
        if t.tgt_vocab() != policy.tgt_vocab() {
            return Err(TrainError::TeacherVocabulary);
        }
    }
    let alpha = if teacher.is_some() { config.alpha } else { 0.0 };
    let encoded = encode_pairs(policy, teacher, corpus.pairs())?;
    let initial = corpus_loss(policy, corpus, teacher, alpha)?;
    let mut optimizer = Optimizer::new(config.optimizer, policy.params().len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<EncodedPair> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let (report, grad) = match config.precision {
                Precision::F64 => batch_gradient::<f64>(policy, teacher, &batch, alpha)?,
                Precision::F32 => batch_gradient::<f32>(policy, teacher, &batch, alpha)?,
            };
            if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: report.total,
                });
            }
            let n = report.token_count as f64;
            sums.ce += report.ce * n;
            sums.kl += report.kl * n;
            sums.tokens += report.token_count;
            optimizer.apply(policy.params_mut(), &grad, config.learning_rate);
        }
        let report = sums.report(alpha);
        log::debug!(
            "epoch {epoch}: ce {:.5} kl {:.5} total {:.5}",
            report.ce,
            report.kl,
            report.total
        );
        epochs.push(report);
    }
    Ok(TrainReport { initial, epochs })
}
