//! Result records and the append-only JSON-lines log that stores them.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use leakmark::metrics::{AttackMode, MetricRecord};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub attack_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    /// Index of the source image in the corpus.
    pub index: usize,
    pub image_id: String,
    /// Clean target id for forgery cells.
    pub target_id: Option<String>,
    pub codec: String,
    pub attack: String,
    /// `evasion`, `forge-stage1`, `forge-stage1+2`, `forge-only-stage2` or
    /// `baseline`.
    pub stage: String,
    pub mode: AttackMode,
    pub headline_threshold: f64,
    /// L∞ budget of feature-space attacks.
    pub epsilon: Option<f64>,
    /// `‖attacked − perturbed image‖_∞` after 8-bit quantisation.
    pub achieved_linf: f64,
    pub metrics: MetricRecord,
    /// Attacked image, relative to the output directory.
    pub attacked_path: PathBuf,
    pub timings: Timings,
    pub fingerprint: String,
}

impl ResultRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            codec: self.codec.clone(),
            attack: self.attack.clone(),
            stage: self.stage.clone(),
            index: self.index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub codec: String,
    pub attack: String,
    pub stage: String,
    pub index: usize,
}

/// Append-only record file. A trailing partial line left by an interrupted
/// write is discarded on open.
pub struct RecordLog {
    path: PathBuf,
    file: File,
    records: Vec<ResultRecord>,
    keys: HashSet<CellKey>,
}

impl RecordLog {
    /// Opens or creates the log. Existing records must carry `fingerprint`.
    pub fn open(path: impl AsRef<Path>, fingerprint: &str) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let records = if path.exists() { read_records(&path, true)? } else { Vec::new() };
        if let Some(r) = records.iter().find(|r| r.fingerprint != fingerprint) {
            return Err(HarnessError::Config(format!(
                "{} holds records of config {}, not {fingerprint}; use a fresh output directory",
                path.display(),
                r.fingerprint
            )));
        }
        // rewrite without any torn tail so appends start on a line boundary
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        let tmp = path.with_extension("jsonl.partial");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        let keys = records.iter().map(ResultRecord::key).collect();
        Ok(Self {
            path,
            file,
            records,
            keys,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.keys.contains(key)
    }

    /// Writes one line and syncs it to disk.
    pub fn append(&mut self, record: ResultRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.keys.insert(record.key());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ResultRecord> {
        self.records
    }
}

/// Reads a record file. With `tolerate_tail`, an unparsable last line is
/// treated as an interrupted write and dropped.
pub fn read_records(path: &Path, tolerate_tail: bool) -> Result<Vec<ResultRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if tolerate_tail && i + 1 == lines.len() => break,
            Err(e) => {
                return Err(HarnessError::Records {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
