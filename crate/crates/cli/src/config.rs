//! `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use isonmt_core::corpus::RESERVED;
use isonmt_core::policy::{DecodeConfig, DecodeMethod, Hyperparams, ModelConfig};
use isonmt_core::rl::{DeltaSchedule, RlConfig};
use isonmt_core::synth::SynthSpec;
use isonmt_core::training::{OptimizerKind, Precision, TrainConfig};

use crate::error::CliError;

/// Every accepted key with its default and a one-line description, in the
/// order used when writing a resolved config.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "seed for corpus generation, initialization and batch order",
    ),
    ("n_symbols", "50", "synthetic vocabulary size"),
    ("len_min", "3", "shortest synthetic sentence, in symbols"),
    ("len_max", "10", "longest synthetic sentence, in symbols"),
    (
        "p_long",
        "0.5",
        "mean probability that a reference renders a symbol with its long word",
    ),
    (
        "symbol_lean",
        "0.0",
        "half the symbols use p_long + lean, the other half p_long - lean",
    ),
    ("n_train", "1000", "synthetic training pairs"),
    ("n_test", "500", "synthetic held-out pairs"),
    (
        "train_src",
        "",
        "source side of a parallel training corpus (replaces the synthetic one)",
    ),
    (
        "train_tgt",
        "",
        "target side of the parallel training corpus",
    ),
    ("test_src", "", "source side of the held-out corpus"),
    ("test_tgt", "", "target side of the held-out corpus"),
    (
        "src_table",
        "",
        "phoneme count table for the source language (default: English lexicon)",
    ),
    (
        "tgt_table",
        "",
        "phoneme count table for the target language (default: English lexicon)",
    ),
    ("layers", "2", "encoder and decoder layers"),
    ("d_model", "64", "model width"),
    ("heads", "2", "attention heads"),
    ("d_ff", "128", "feed-forward width"),
    (
        "max_len",
        "24",
        "longest source or target the model accepts, EOS included",
    ),
    ("optimizer", "sgd", "sgd or adam"),
    ("precision", "f64", "f64 or f32 arithmetic for gradients"),
    ("batch_size", "32", "pairs per update"),
    ("base_lr", "0.05", "learning rate of base training"),
    ("base_epochs", "1", "epochs of base training"),
    (
        "finetune_lr",
        "0.05",
        "learning rate of each filtered fine-tuning step",
    ),
    (
        "finetune_epochs",
        "1",
        "epochs of each filtered fine-tuning step",
    ),
    (
        "distill_lr",
        "0.05",
        "learning rate of the distillation step",
    ),
    ("distill_epochs", "1", "epochs of the distillation step"),
    (
        "alpha",
        "1.0",
        "weight of the consistency term during distillation",
    ),
    ("generations", "3", "generation steps"),
    (
        "deltas",
        "0.3, 0.2, 0.1",
        "band half-widths of the fine-tuning steps, strictly decreasing",
    ),
    (
        "st_flag",
        "true",
        "finish with a distillation step against the base model",
    ),
    (
        "min_filtered",
        "16",
        "filtered sets smaller than this skip their step",
    ),
    ("decode", "greedy", "greedy or beam"),
    ("beam_size", "4", "beam width when decode = beam"),
];

/// Raw key/value pairs as read from a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile(pub BTreeMap<String, String>);

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`",
                    i + 1
                )));
            };
            let key = key.trim();
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(CliError::Config(format!(
                    "line {}: unknown key `{key}`",
                    i + 1
                )));
            }
            if map
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(CliError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> &str {
        match self.0.get(key) {
            Some(v) => v,
            None => KEYS
                .iter()
                .find(|(k, _, _)| *k == key)
                .map(|(_, d, _)| *d)
                .unwrap_or(""),
        }
    }

    fn parse_value<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataFiles {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub synth: SynthSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub data: Option<DataFiles>,
    pub src_table: Option<PathBuf>,
    pub tgt_table: Option<PathBuf>,
    pub model: ModelConfig,
    pub rl: RlConfig,
    kv: KvFile,
}

impl Default for Settings {
    fn default() -> Self {
        Self::from_kv(KvFile::default(), None).expect("defaults are valid")
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "`{key}`: expected true or false, got `{v}`"
        ))),
    }
}

impl Settings {
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        Self::from_kv(KvFile::parse(text)?, seed_override)
    }

    pub fn from_kv(mut kv: KvFile, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let Some(seed) = seed_override {
            kv.0.insert("seed".into(), seed.to_string());
        }
        let seed: u64 = kv.parse_value("seed")?;
        let synth = SynthSpec {
            n_symbols: kv.parse_value("n_symbols")?,
            len_min: kv.parse_value("len_min")?,
            len_max: kv.parse_value("len_max")?,
            p_long: kv.parse_value("p_long")?,
            symbol_lean: kv.parse_value("symbol_lean")?,
            seed,
        };
        synth
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let data = match (kv.path("train_src"), kv.path("train_tgt")) {
            (Some(train_src), Some(train_tgt)) => Some(DataFiles {
                train_src,
                train_tgt,
                test_src: kv.path("test_src"),
                test_tgt: kv.path("test_tgt"),
            }),
            (None, None) => None,
            _ => {
                return Err(CliError::Config(
                    "train_src and train_tgt must be given together".into(),
                ))
            }
        };
        if let Some(d) = &data {
            if d.test_src.is_some() != d.test_tgt.is_some() {
                return Err(CliError::Config(
                    "test_src and test_tgt must be given together".into(),
                ));
            }
        }
        let model = ModelConfig {
            layers: kv.parse_value("layers")?,
            d_model: kv.parse_value("d_model")?,
            heads: kv.parse_value("heads")?,
            d_ff: kv.parse_value("d_ff")?,
            max_len: kv.parse_value("max_len")?,
        };
        Hyperparams::new(model, RESERVED.len(), RESERVED.len())
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let optimizer = match kv.get("optimizer") {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            v => {
                return Err(CliError::Config(format!(
                    "`optimizer`: expected sgd or adam, got `{v}`"
                )))
            }
        };
        let precision = match kv.get("precision") {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            v => {
                return Err(CliError::Config(format!(
                    "`precision`: expected f64 or f32, got `{v}`"
                )))
            }
        };
        let phase = |lr: &str, epochs: &str| -> Result<TrainConfig, CliError> {
            Ok(TrainConfig {
                learning_rate: kv.parse_value(lr)?,
                epochs: kv.parse_value(epochs)?,
                batch_size: kv.parse_value("batch_size")?,
                alpha: kv.parse_value("alpha")?,
                seed,
                precision,
                optimizer,
            })
        };
        let deltas = kv
            .get("deltas")
            .split(',')
            .map(|d| {
                d.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("`deltas`: cannot parse `{}`", d.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let method = match kv.get("decode") {
            "greedy" => DecodeMethod::Greedy,
            "beam" => DecodeMethod::Beam,
            v => {
                return Err(CliError::Config(format!(
                    "`decode`: expected greedy or beam, got `{v}`"
                )))
            }
        };
        let rl = RlConfig {
            generations: kv.parse_value("generations")?,
            schedule: DeltaSchedule::new(deltas).map_err(|e| CliError::Config(e.to_string()))?,
            st_flag: parse_bool("st_flag", kv.get("st_flag"))?,
            min_filtered: kv.parse_value("min_filtered")?,
            decode: DecodeConfig {
                method,
                beam_size: kv.parse_value("beam_size")?,
                max_len: usize::MAX,
            },
            base: phase("base_lr", "base_epochs")?,
            finetune: phase("finetune_lr", "finetune_epochs")?,
            distill: phase("distill_lr", "distill_epochs")?,
        };
        rl.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let kv = KvFile(
            KEYS.iter()
                .map(|(k, _, _)| (k.to_string(), kv.get(k).to_string()))
                .collect(),
        );
        Ok(Self {
            seed,
            synth,
            n_train: kv.parse_value("n_train")?,
            n_test: kv.parse_value("n_test")?,
            data,
            src_table: kv.path("src_table"),
            tgt_table: kv.path("tgt_table"),
            model,
            rl,
            kv,
        })
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.kv.0
    }

    /// The resolved configuration as a config file.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.kv.get(k));
        }
        out
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let mut out = String::from("Config keys (`key = value`, `#` starts a comment):\n");
    for (k, d, doc) in KEYS {
        let default = if d.is_empty() { "unset" } else { d };
        let _ = writeln!(out, "  {k:<16} {doc} [default: {default}]");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_key_table() {
        let s = Settings::default();
        assert_eq!(s.seed, 0);
        assert_eq!(s.rl.schedule.values(), &[0.3, 0.2, 0.1]);
        assert_eq!(s.rl.base.learning_rate, 0.05);
        assert_eq!(s.rl.base.batch_size, 32);
        assert_eq!(s.rl.min_filtered, 16);
        assert!(s.rl.st_flag);
        assert_eq!(s.model, ModelConfig::default());
        assert!(s.data.is_none());
    }

    #[test]
    fn comments_overrides_and_seed_flag() {
        let s = Settings::parse(
            "# desk\nseed = 4 # trailing\n\noptimizer = adam\ndeltas = 0.5,0.25\n",
            Some(9),
        )
        .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.synth.seed, 9);
        assert_eq!(s.rl.finetune.seed, 9);
        assert_eq!(s.rl.base.optimizer, OptimizerKind::Adam);
        assert_eq!(s.rl.schedule.values(), &[0.5, 0.25]);
        assert_eq!(s.resolved()["seed"], "9");
    }

    #[test]
    fn resolved_config_round_trips() {
        let s = Settings::parse("n_train = 20\nst_flag = false\n", None).unwrap();
        let again = Settings::parse(&s.to_kv(), None).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "unknown = 1",
            "seed",
            "seed = x",
            "seed = 1\nseed = 2",
            "deltas = 0.1, 0.2",
            "optimizer = lbfgs",
            "train_src = a.txt",
            "st_flag = maybe",
            "len_min = 5\nlen_max = 2",
            "d_model = 63",
        ] {
            assert!(
                matches!(Settings::parse(text, None), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }
}
