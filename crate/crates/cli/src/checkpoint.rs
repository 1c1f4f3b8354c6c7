//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes  "ISONMTCK"
//! version       u32
//! layers, d_model, heads, d_ff, max_len, src_vocab, tgt_vocab   7 x u64
//! param_count   u64
//! source vocabulary tokens   src_vocab x (u32 byte length, UTF-8 bytes)
//! target vocabulary tokens   tgt_vocab x (u32 byte length, UTF-8 bytes)
//! parameters    param_count x f64, declaration order
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use isonmt_core::corpus::Vocabulary;
use isonmt_core::policy::{Hyperparams, Policy};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ISONMTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint hyperparameters {found:?} do not match the expected {expected:?}")]
    Mismatch {
        expected: Hyperparams,
        found: Hyperparams,
    },
}

pub fn to_bytes(policy: &Policy) -> Vec<u8> {
    let hp = policy.hyperparams();
    let mut out = Vec::with_capacity(8 + 4 + 8 * 8 + policy.params().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        hp.layers,
        hp.d_model,
        hp.heads,
        hp.d_ff,
        hp.max_len,
        hp.src_vocab,
        hp.tgt_vocab,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(policy.params().len() as u64).to_le_bytes());
    for vocab in [policy.src_vocab(), policy.tgt_vocab()] {
        for token in vocab.tokens() {
            out.extend_from_slice(&(token.len() as u32).to_le_bytes());
            out.extend_from_slice(token.as_bytes());
        }
    }
    for p in policy.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self
            .bytes
            .get(self.at..end)
            .ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn size(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("size overflows".into()))
    }

    fn vocab(&mut self, len: usize) -> Result<Vocabulary, CheckpointError> {
        let mut tokens = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            let n = self.u32()? as usize;
            let raw = self.take(n)?;
            let token = std::str::from_utf8(raw)
                .map_err(|_| CheckpointError::Corrupt("token is not UTF-8".into()))?;
            tokens.push(token.to_string());
        }
        let vocab =
            Vocabulary::from_tokens(tokens.iter().skip(isonmt_core::corpus::RESERVED.len()));
        if vocab.tokens() != tokens.as_slice() {
            return Err(CheckpointError::Corrupt("vocabulary is malformed".into()));
        }
        Ok(vocab)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Policy, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::Magic)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hp = Hyperparams {
        layers: r.size()?,
        d_model: r.size()?,
        heads: r.size()?,
        d_ff: r.size()?,
        max_len: r.size()?,
        src_vocab: r.size()?,
        tgt_vocab: r.size()?,
    };
    hp.validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = r.size()?;
    if count != hp.param_count() {
        return Err(CheckpointError::Corrupt(format!(
            "header declares {count} parameters, hyperparameters imply {}",
            hp.param_count()
        )));
    }
    let src = r.vocab(hp.src_vocab)?;
    let tgt = r.vocab(hp.tgt_vocab)?;
    let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.at != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.at));
    }
    Policy::from_parts(hp, params, src, tgt).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn save(policy: &Policy, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(&to_bytes(policy)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Policy, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was written for `expected`.
pub fn load_expecting(path: &Path, expected: &Hyperparams) -> Result<Policy, CheckpointError> {
    let policy = load(path)?;
    let found = *policy.hyperparams();
    if found != *expected {
        return Err(CheckpointError::Mismatch {
            expected: *expected,
            found,
        });
    }
    Ok(policy)
}
