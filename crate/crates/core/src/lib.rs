//! Reward-filtered self-training for length-compliant machine translation.
//!
//! The crate is `no_std` + `alloc`; the `std` feature (on by default) only
//! switches the float math and error traits to their std versions. File
//! formats, run directories and the command-line front end live in the
//! companion `isonmt` crate.
//!
//! Module map:
//! - [`phonology`]: phoneme counting, the phoneme count ratio, the band reward
//!   and the compliance percentage.
//! - [`corpus`] and [`synth`]: parallel corpora, vocabularies, the token codec
//!   and the synthetic task.
//! - [`policy`]: the transformer translation model and its decoders.
//! - [`training`]: cross-entropy and consistency losses, gradients, training loop.
//! - [`metrics`]: corpus BLEU, chrF and evaluation reports.
//! - [`rl`]: the generate / annotate / filter / fine-tune pipeline.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod metrics;
pub mod phonology;
pub mod policy;
pub mod rl;
mod scalar;
pub mod synth;
pub mod training;

pub use scalar::Scalar;
