//! Exclusive, all-or-nothing writes into a run's output directory.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use deepdrl::calibration::{CalibrationReport, ReliabilityBin};
use deepdrl::drl::Prediction;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".deepdrl.lock";

/// Holds the directory lock and a staging area. Files written through it appear in the
/// output directory only after [`RunDir::commit`]; dropping it uncommitted discards them.
pub struct RunDir {
    out: PathBuf,
    staging: PathBuf,
    lock: PathBuf,
    files: Vec<String>,
    created: bool,
    committed: bool,
}

impl RunDir {
    pub fn open(out: &Path) -> Result<Self, CliError> {
        let created = !out.exists();
        fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let lock = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Locked(out.to_path_buf()))
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        }
        let staging = out.join(format!(".staging-{}", std::process::id()));
        let dir = Self {
            out: out.to_path_buf(),
            staging,
            lock,
            files: Vec::new(),
            created,
            committed: false,
        };
        fs::create_dir_all(&dir.staging).map_err(|e| CliError::io(&dir.staging, e))?;
        Ok(dir)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.staging.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Path for a file the caller writes itself.
    pub fn stage(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.staging.join(name)
    }

    /// Moves every staged file into place.
    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut placed = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let from = self.staging.join(name);
            let to = self.out.join(name);
            if let Err(e) = fs::rename(&from, &to) {
                for p in &placed {
                    let _ = fs::remove_file(p);
                }
                return Err(CliError::io(&to, e));
            }
            placed.push(to);
        }
        self.committed = true;
        Ok(placed)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
        let _ = fs::remove_file(&self.lock);
        if self.created && !self.committed {
            let _ = fs::remove_dir(&self.out);
        }
    }
}

pub fn jsonl<T: Serialize>(records: &[T]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One evaluated model inside `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub class_count: usize,
    /// `target`, or `source` when the target carries no labels.
    pub evaluated_on: String,
    pub report: CalibrationReport,
}

/// Per-sample predictions of one model.
pub struct PredictionSet<'a> {
    pub model: &'a str,
    pub predictions: &'a [Prediction],
    pub labels: Option<&'a [usize]>,
    pub ratios: &'a [f64],
}

pub fn predictions_csv(sets: &[PredictionSet<'_>]) -> String {
    let mut out = String::from("model,index,label,predicted,confidence,ratio\n");
    for set in sets {
        for (i, (p, r)) in set.predictions.iter().zip(set.ratios).enumerate() {
            let label = set.labels.map(|l| l[i].to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{i},{label},{},{},{r}\n",
                set.model,
                p.argmax(),
                p.confidence()
            ));
        }
    }
    out
}

pub fn reliability_csv(models: &[(&str, &[ReliabilityBin])]) -> String {
    let mut out = String::from("model,lower,upper,count,confidence,accuracy\n");
    for (name, bins) in models {
        for b in *bins {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                b.lower, b.upper, b.count, b.mean_confidence, b.accuracy
            ));
        }
    }
    out
}

/// Reads a whole file, naming it in the error.
pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_files_and_releases_lock() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let mut dir = RunDir::open(&out).unwrap();
        assert!(RunDir::open(&out).is_err(), "second run must see the lock");
        dir.write("a.txt", "x").unwrap();
        assert!(!out.join("a.txt").exists());
        dir.commit().unwrap();
        assert_eq!(fs::read_to_string(out.join("a.txt")).unwrap(), "x");
        assert!(!out.join(LOCK_FILE).exists());
        let left: Vec<_> = fs::read_dir(&out).unwrap().collect();
        assert_eq!(left.len(), 1);
    }

    #[test]
    fn dropped_run_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        {
            let mut dir = RunDir::open(&out).unwrap();
            dir.write("a.txt", "x").unwrap();
        }
        assert!(!out.exists());
    }

    #[test]
    fn stale_lock_blocks_the_run() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join(LOCK_FILE), "").unwrap();
        match RunDir::open(tmp.path()) {
            Err(CliError::Locked(_)) => {}
            other => panic!("expected a lock error, got {:?}", other.err()),
        }
    }
}
