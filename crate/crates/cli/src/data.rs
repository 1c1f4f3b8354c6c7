//! Loading and writing corpora and phoneme tables.

use std::fs;
use std::path::Path;

use isonmt_core::corpus::ParallelCorpus;
use isonmt_core::phonology::{FallbackRule, PhonemeCounter};
use isonmt_core::synth;

use crate::config::Settings;
use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<(), CliError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    write_text(path, &text)
}

/// Reads two aligned files; blank pairs are dropped and counted.
pub fn load_parallel(
    src: &Path,
    tgt: &Path,
    src_language: &str,
    tgt_language: &str,
) -> Result<(ParallelCorpus, usize), CliError> {
    let s = read_text(src)?;
    let t = read_text(tgt)?;
    ParallelCorpus::from_aligned_text(src_language, tgt_language, &s, &t)
        .map_err(|e| CliError::Run(format!("{} / {}: {e}", src.display(), tgt.display())))
}

pub fn load_table(path: &Path, language: &str) -> Result<PhonemeCounter, CliError> {
    PhonemeCounter::from_tsv(language, &read_text(path)?, FallbackRule::LetterClusters)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

/// Training data, held-out data and counters for a run.
pub struct Task {
    pub train: ParallelCorpus,
    pub test: Option<ParallelCorpus>,
    pub source_counter: PhonemeCounter,
    pub target_counter: PhonemeCounter,
}

impl Task {
    pub fn from_settings(settings: &Settings) -> Result<Self, CliError> {
        let Some(files) = &settings.data else {
            let corpus = synth::generate(&settings.synth, settings.n_train, settings.n_test)
                .map_err(|e| CliError::Config(e.to_string()))?;
            return Ok(Task {
                train: corpus.train,
                test: Some(corpus.test),
                source_counter: corpus.source_counter,
                target_counter: corpus.target_counter,
            });
        };
        let (src_lang, tgt_lang) = ("src", "tgt");
        let (train, _) = load_parallel(&files.train_src, &files.train_tgt, src_lang, tgt_lang)?;
        let test = match (&files.test_src, &files.test_tgt) {
            (Some(s), Some(t)) => Some(load_parallel(s, t, src_lang, tgt_lang)?.0),
            _ => None,
        };
        let (source_counter, target_counter) = counters(settings)?;
        Ok(Task {
            train,
            test,
            source_counter,
            target_counter,
        })
    }

    /// Writes the corpora and counting tables so a run can be audited.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_lines(&dir.join("train.src"), &self.train.source_lines())?;
        write_lines(&dir.join("train.tgt"), &self.train.target_lines())?;
        if let Some(test) = &self.test {
            write_lines(&dir.join("test.src"), &test.source_lines())?;
            write_lines(&dir.join("test.tgt"), &test.target_lines())?;
        }
        write_text(&dir.join("src_table.tsv"), &self.source_counter.to_tsv())?;
        write_text(&dir.join("tgt_table.tsv"), &self.target_counter.to_tsv())
    }
}

/// Counters from the configured tables, defaulting to the English lexicon.
pub fn counters(settings: &Settings) -> Result<(PhonemeCounter, PhonemeCounter), CliError> {
    let load = |path: &Option<std::path::PathBuf>, lang: &str| match path {
        Some(p) => load_table(p, lang),
        None => Ok(PhonemeCounter::english()),
    };
    Ok((
        load(&settings.src_table, "src")?,
        load(&settings.tgt_table, "tgt")?,
    ))
}
