//! Run directories: lock file, manifest, trace and per-step artifacts.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use isonmt_core::corpus::SentencePair;
use isonmt_core::policy::Policy;
use isonmt_core::rl::{RunObserver, TraceRecord};
use serde::Serialize;

use crate::checkpoint;
use crate::config::Settings;
use crate::data::write_text;
use crate::error::CliError;

pub const LOCK_FILE: &str = ".lock";

/// Exclusive handle on an output directory; the lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(root.to_path_buf()))
            }
            Err(e) => return Err(CliError::io(lock, e)),
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path below the root, creating parent directories.
    pub fn file(&self, relative: &str) -> Result<PathBuf, CliError> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Everything needed to replay a run. Timestamps live only here.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

impl Manifest {
    /// Writes `config.kv` and the initial manifest.
    pub fn begin(
        dir: &RunDir,
        command: &str,
        config_path: Option<&Path>,
        settings: &Settings,
    ) -> Result<Self, CliError> {
        write_text(&dir.file("config.kv")?, &settings.to_kv())?;
        let m = Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config: settings.resolved().clone(),
            seed: settings.seed,
            artifacts: vec!["config.kv".into()],
            started_at: now(),
            finished_at: None,
            status: "running".into(),
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn write(&self, dir: &RunDir) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&dir.file("manifest.json")?, &(json + "\n"))
    }

    pub fn add(&mut self, artifact: impl Into<String>) {
        let a = artifact.into();
        if !self.artifacts.contains(&a) {
            self.artifacts.push(a);
        }
    }

    pub fn finish(&mut self, dir: &RunDir, ok: bool) -> Result<(), CliError> {
        self.finished_at = Some(now());
        self.status = if ok { "finished" } else { "failed" }.into();
        self.write(dir)
    }
}

/// Persists trace records, per-step checkpoints and generated sets.
pub struct RunRecorder<'a> {
    pub dir: &'a RunDir,
    pub manifest: &'a mut Manifest,
}

impl RunRecorder<'_> {
    fn append_trace(&mut self, record: &TraceRecord) -> Result<(), CliError> {
        let path = self.dir.file("trace.jsonl")?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        let line = serde_json::to_string(record).expect("trace record serializes");
        writeln!(f, "{line}").map_err(|e| CliError::io(&path, e))?;
        self.manifest.add("trace.jsonl");
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, policy: &Policy) -> Result<(), CliError> {
        let rel = format!("checkpoints/step_{step}.ckpt");
        checkpoint::save(policy, &self.dir.file(&rel)?)?;
        self.manifest.add(rel);
        self.manifest.write(self.dir)
    }
}

pub fn dg_tsv(pairs: &[SentencePair], ratios: &[Option<f64>]) -> String {
    let mut out = String::from("# source\tgenerated\tpcr\n");
    for (p, r) in pairs.iter().zip(ratios) {
        let pcr = r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{}\t{}\t{pcr}\n",
            p.source_text(),
            p.target_text()
        ));
    }
    out
}

impl RunObserver for RunRecorder<'_> {
    fn generated(
        &mut self,
        generation: usize,
        pairs: &[SentencePair],
        ratios: &[Option<f64>],
    ) -> Result<(), String> {
        let rel = format!("dg/step_{generation}.tsv");
        let path = self.dir.file(&rel).map_err(|e| e.to_string())?;
        write_text(&path, &dg_tsv(pairs, ratios)).map_err(|e| e.to_string())?;
        self.manifest.add(rel);
        Ok(())
    }

    fn record(&mut self, record: &TraceRecord, policy: &Policy) -> Result<(), String> {
        self.append_trace(record).map_err(|e| e.to_string())?;
        self.checkpoint(record.step, policy)
            .map_err(|e| e.to_string())
    }
}
